//! Composite Gauss–Legendre rules with spectral cumulative integration, plus
//! composite Simpson on uniform grids.
//!
//! A panel rule of order `p` carries, besides nodes and weights on [-1, 1],
//! the matrix `S[i][j] = ∫_{-1}^{ξ_i} ℓ_j(t) dt` of integrated Lagrange basis
//! polynomials. Multiplying it with nodal values gives the running integral
//! at every node, exact for polynomials of degree < p.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::math::cos;

/// Gauss–Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = cos(PI * (i as f64 + 0.75) / (n as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Reference panel data shared by every grid of the same order.
#[derive(Debug)]
pub struct PanelRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Row-major `order × order`: running integral from -1 to node i.
    left: Vec<f64>,
    /// Row-major: integral from node i to +1.
    right: Vec<f64>,
    /// Row-major differentiation matrix at the nodes.
    diff: Vec<f64>,
}

impl PanelRule {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        let p = order;
        let bary = barycentric_weights(&nodes);
        let mut left = vec![0.0; p * p];
        for i in 0..p {
            // GL on [-1, ξ_i] integrates the degree p-1 basis exactly.
            let half = 0.5 * (nodes[i] + 1.0);
            for (t, w) in nodes.iter().zip(&weights) {
                let s = -1.0 + half * (t + 1.0);
                let basis = lagrange_basis(&nodes, &bary, s);
                for j in 0..p {
                    left[i * p + j] += half * w * basis[j];
                }
            }
        }
        let mut right = vec![0.0; p * p];
        for i in 0..p {
            let half = 0.5 * (1.0 - nodes[i]);
            for (t, w) in nodes.iter().zip(&weights) {
                let s = nodes[i] + half * (t + 1.0);
                let basis = lagrange_basis(&nodes, &bary, s);
                for j in 0..p {
                    right[i * p + j] += half * w * basis[j];
                }
            }
        }
        let mut diff = vec![0.0; p * p];
        for i in 0..p {
            let mut diag = 0.0;
            for j in 0..p {
                if i != j {
                    let v = (bary[j] / bary[i]) / (nodes[i] - nodes[j]);
                    diff[i * p + j] = v;
                    diag -= v;
                }
            }
            diff[i * p + i] = diag;
        }
        Self { order, nodes, weights, left, right, diff }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn barycentric_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|j| {
            let mut prod = 1.0;
            for k in 0..n {
                if k != j {
                    prod *= nodes[j] - nodes[k];
                }
            }
            1.0 / prod
        })
        .collect()
}

fn lagrange_basis(nodes: &[f64], bary: &[f64], s: f64) -> Vec<f64> {
    let n = nodes.len();
    if let Some(hit) = nodes.iter().position(|&x| x == s) {
        let mut out = vec![0.0; n];
        out[hit] = 1.0;
        return out;
    }
    let terms: Vec<f64> = (0..n).map(|j| bary[j] / (s - nodes[j])).collect();
    let denom: f64 = terms.iter().sum();
    terms.iter().map(|t| t / denom).collect()
}

/// Composite Gauss–Legendre rule on `[lower, upper]` with equal-width panels.
#[derive(Debug, Clone)]
pub struct CompositeGrid {
    rule: Arc<PanelRule>,
    lower: f64,
    upper: f64,
    panels: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl CompositeGrid {
    /// `total_nodes` is rounded up to a whole number of panels.
    pub fn new(rule: Arc<PanelRule>, lower: f64, upper: f64, total_nodes: usize) -> Self {
        assert!(upper > lower, "empty quadrature interval");
        let p = rule.order;
        let panels = total_nodes.div_ceil(p).max(1);
        let width = (upper - lower) / panels as f64;
        let half = 0.5 * width;
        let mut nodes = Vec::with_capacity(panels * p);
        let mut weights = Vec::with_capacity(panels * p);
        for k in 0..panels {
            let a = lower + k as f64 * width;
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                nodes.push(a + half * (t + 1.0));
                weights.push(half * w);
            }
        }
        Self { rule, lower, upper, panels, nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower) / self.panels as f64
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Running integral from the left end of the grid to each node.
    pub fn cumulative(&self, values: &[f64], out: &mut [f64]) {
        let p = self.rule.order;
        let h = self.half_width();
        let mut carry = 0.0;
        for k in 0..self.panels {
            let f = &values[k * p..(k + 1) * p];
            for i in 0..p {
                let row = &self.rule.left[i * p..(i + 1) * p];
                let s: f64 = row.iter().zip(f).map(|(a, b)| a * b).sum();
                out[k * p + i] = carry + h * s;
            }
            let total: f64 = self.rule.weights.iter().zip(f).map(|(a, b)| a * b).sum();
            carry += h * total;
        }
    }

    /// Running integral from each node to the right end of the grid.
    pub fn cumulative_from_right(&self, values: &[f64], out: &mut [f64]) {
        let p = self.rule.order;
        let h = self.half_width();
        let mut carry = 0.0;
        for k in (0..self.panels).rev() {
            let f = &values[k * p..(k + 1) * p];
            for i in 0..p {
                let row = &self.rule.right[i * p..(i + 1) * p];
                let s: f64 = row.iter().zip(f).map(|(a, b)| a * b).sum();
                out[k * p + i] = carry + h * s;
            }
            let total: f64 = self.rule.weights.iter().zip(f).map(|(a, b)| a * b).sum();
            carry += h * total;
        }
    }

    /// Panel-wise spectral derivative of nodal values.
    pub fn differentiate(&self, values: &[f64], out: &mut [f64]) {
        let p = self.rule.order;
        let scale = 1.0 / self.half_width();
        for k in 0..self.panels {
            let f = &values[k * p..(k + 1) * p];
            for i in 0..p {
                let row = &self.rule.diff[i * p..(i + 1) * p];
                let s: f64 = row.iter().zip(f).map(|(a, b)| a * b).sum();
                out[k * p + i] = scale * s;
            }
        }
    }
}

/// Composite Simpson weights for `intervals` equal steps of width `h`
/// (`intervals` must be even).
pub fn simpson_weights(intervals: usize, h: f64) -> Vec<f64> {
    assert!(intervals >= 2 && intervals.is_multiple_of(2), "Simpson needs an even, positive interval count");
    let mut w = vec![0.0; intervals + 1];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = if j == 0 || j == intervals {
            h / 3.0
        } else if j % 2 == 1 {
            4.0 * h / 3.0
        } else {
            2.0 * h / 3.0
        };
    }
    w
}
