//! Deterministic averaged dynamics: X̄^θ, the propagator Z^θ(t,s), the
//! sensitivity ∇_θX̄^θ, the weights Q_k and the drift-correction integrals.
//!
//! Everything lives on one fine grid of n·r RK4 steps so the quadrature
//! nodes for Q_k coincide with ODE nodes. Within an observation interval
//! the matrix Φ(t) = Z(t, t_{k−1}) is integrated from the identity, and
//! Z(t_k, s_j) = Φ(t_k)·Φ(s_j)⁻¹.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fast_avg::{AveragedModel, Need, PointEval};
use crate::linalg::{inverse, min_eigenvalue, Mat};
use crate::math::sqrt;
use crate::quadrature::simpson_weights;

/// What [`build_flow`] should integrate besides X̄ and the step propagators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowRequest {
    /// RK4 steps per observation interval; must be even (Simpson).
    pub refinement: usize,
    pub sensitivity: bool,
    pub weights: bool,
    pub corrections: bool,
}

impl FlowRequest {
    pub fn full(refinement: usize) -> Self {
        Self { refinement, sensitivity: true, weights: true, corrections: true }
    }

    /// X̄ and Z only; all the simplified contrast needs.
    pub fn path_only(refinement: usize) -> Self {
        Self { refinement, sensitivity: false, weights: false, corrections: false }
    }
}

impl Default for FlowRequest {
    fn default() -> Self {
        Self::full(64)
    }
}

/// Flow quantities at one θ. Immutable once built.
#[derive(Debug, Clone)]
pub struct FlowCache {
    theta: Vec<f64>,
    m: usize,
    k: usize,
    n: usize,
    r: usize,
    horizon: f64,
    times: Vec<f64>,
    xbar: Vec<f64>,
    sensitivity: Option<Vec<f64>>,
    step_propagators: Vec<f64>,
    weights: Option<Vec<f64>>,
    corrections: Option<Vec<f64>>,
}

impl FlowCache {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn slow_dim(&self) -> usize {
        self.m
    }
    pub fn param_dim(&self) -> usize {
        self.k
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn refinement(&self) -> usize {
        self.r
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn delta_t(&self) -> f64 {
        self.horizon / self.n as f64
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// X̄ at fine node i.
    pub fn xbar_at(&self, i: usize) -> &[f64] {
        &self.xbar[i * self.m..(i + 1) * self.m]
    }

    /// X̄ at observation time t_k (k = 0..=n).
    pub fn xbar_obs(&self, k: usize) -> &[f64] {
        self.xbar_at(k * self.r)
    }

    /// ∇_θX̄ (m × k, row-major) at fine node i.
    pub fn sensitivity_at(&self, i: usize) -> Option<&[f64]> {
        let mk = self.m * self.k;
        self.sensitivity.as_ref().map(|s| &s[i * mk..(i + 1) * mk])
    }

    pub fn sensitivity_obs(&self, k: usize) -> Option<&[f64]> {
        self.sensitivity_at(k * self.r)
    }

    /// Z(t_k, t_{k−1}) for k = 1..=n.
    pub fn step_propagator(&self, k: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.step_propagators[(k - 1) * mm..k * mm]
    }

    /// Q_k for k = 1..=n.
    pub fn weight(&self, k: usize) -> Option<&[f64]> {
        let mm = self.m * self.m;
        self.weights.as_ref().map(|w| &w[(k - 1) * mm..k * mm])
    }

    /// ∫_{t_{k−1}}^{t_k} Z(t_k,s) J̄(X̄_s) ds, unscaled, for k = 1..=n.
    pub fn correction(&self, k: usize) -> Option<&[f64]> {
        self.corrections.as_ref().map(|c| &c[(k - 1) * self.m..k * self.m])
    }

    /// √ε·∫ Z J̄ for every interval, row-major n × m.
    pub fn drift_corrections(&self, epsilon: f64) -> Option<Vec<f64>> {
        let s = sqrt(epsilon);
        self.corrections.as_ref().map(|c| c.iter().map(|v| s * v).collect())
    }

    /// Index of the fine node at time `t`, if `t` is a node.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let nr = self.n * self.r;
        let pos = t / self.horizon * nr as f64;
        let i = crate::math::round(pos);
        if !(i >= 0.0 && i <= nr as f64) || (pos - i).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!("t = {t} is not a node of the flow grid")));
        }
        Ok(i as usize)
    }
}

struct Workspace {
    m: usize,
    k: usize,
    sens: bool,
    eval: PointEval,
    dx: [Vec<f64>; 4],
    ds: [Vec<f64>; 4],
    dphi: [Vec<f64>; 4],
    x_tmp: Vec<f64>,
    s_tmp: Vec<f64>,
    phi_tmp: Vec<f64>,
}

impl Workspace {
    fn new(m: usize, k: usize, sens: bool) -> Self {
        let four = |len: usize| [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
        Self {
            m,
            k,
            sens,
            eval: PointEval::new(m, k),
            dx: four(m),
            ds: four(m * k),
            dphi: four(m * m),
            x_tmp: vec![0.0; m],
            s_tmp: vec![0.0; m * k],
            phi_tmp: vec![0.0; m * m],
        }
    }

    /// Right-hand side at stage `st` from the values currently in `eval`.
    fn derivative(&mut self, st: usize, s: &[f64], phi: &[f64]) {
        let (m, k) = (self.m, self.k);
        let a = &self.eval.grad_x;
        self.dx[st].copy_from_slice(&self.eval.lambda_bar);
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += a[i * m + l] * phi[l * m + j];
                }
                self.dphi[st][i * m + j] = acc;
            }
        }
        if self.sens {
            let b = &self.eval.grad_theta;
            for i in 0..m {
                for j in 0..k {
                    let mut acc = b[i * k + j];
                    for l in 0..m {
                        acc += a[i * m + l] * s[l * k + j];
                    }
                    self.ds[st][i * k + j] = acc;
                }
            }
        }
    }
}

fn stage_need(sens: bool) -> Need {
    Need { grad_x: true, grad_theta: sens, q_bar: false, j_bar: false }
}

/// Classical RK4 step of (x, S, Φ). Stage 0 must already be in `ws` (from the
/// node evaluation).
#[allow(clippy::too_many_arguments)]
fn rk4_step(
    avg: &AveragedModel,
    theta: &[f64],
    h: f64,
    x: &mut [f64],
    s: &mut [f64],
    phi: &mut [f64],
    ws: &mut Workspace,
) -> Result<()> {
    let need = stage_need(ws.sens);
    for st in 1..4 {
        let c = if st == 3 { h } else { 0.5 * h };
        for i in 0..x.len() {
            ws.x_tmp[i] = x[i] + c * ws.dx[st - 1][i];
        }
        for i in 0..phi.len() {
            ws.phi_tmp[i] = phi[i] + c * ws.dphi[st - 1][i];
        }
        if ws.sens {
            for i in 0..s.len() {
                ws.s_tmp[i] = s[i] + c * ws.ds[st - 1][i];
            }
        }
        let xt = core::mem::take(&mut ws.x_tmp);
        let r = avg.evaluate(theta, &xt, need, &mut ws.eval);
        ws.x_tmp = xt;
        r?;
        let (st_s, st_phi) = (core::mem::take(&mut ws.s_tmp), core::mem::take(&mut ws.phi_tmp));
        ws.derivative(st, &st_s, &st_phi);
        ws.s_tmp = st_s;
        ws.phi_tmp = st_phi;
    }
    let w = h / 6.0;
    for i in 0..x.len() {
        x[i] += w * (ws.dx[0][i] + 2.0 * ws.dx[1][i] + 2.0 * ws.dx[2][i] + ws.dx[3][i]);
    }
    for i in 0..phi.len() {
        phi[i] += w * (ws.dphi[0][i] + 2.0 * ws.dphi[1][i] + 2.0 * ws.dphi[2][i] + ws.dphi[3][i]);
    }
    if ws.sens {
        for i in 0..s.len() {
            s[i] += w * (ws.ds[0][i] + 2.0 * ws.ds[1][i] + 2.0 * ws.ds[2][i] + ws.ds[3][i]);
        }
    }
    Ok(())
}

fn identity_into(phi: &mut [f64], m: usize) {
    phi.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        phi[i * m + i] = 1.0;
    }
}

/// Integrate X̄ (and whatever `req` asks for) on n·r RK4 steps over [0, T].
pub fn build_flow(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    horizon: f64,
    n: usize,
    req: FlowRequest,
) -> Result<FlowCache> {
    let (m, k) = (avg.slow_dim(), avg.param_dim());
    let r = req.refinement;
    if n == 0 || r < 2 || !r.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("need n >= 1 and an even refinement >= 2, got n = {n}, r = {r}")));
    }
    if x0.len() != m || theta.len() != k {
        return Err(Error::InvalidInput("x0 or theta has the wrong dimension".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    let nr = n * r;
    let h = horizon / nr as f64;
    let delta = horizon / n as f64;
    let mm = m * m;
    let node_need = Need { grad_x: true, grad_theta: req.sensitivity, q_bar: req.weights, j_bar: req.corrections };
    let simpson = simpson_weights(r, h);

    let mut times = Vec::with_capacity(nr + 1);
    let mut xbar = Vec::with_capacity((nr + 1) * m);
    let mut sens_path = if req.sensitivity { Some(Vec::with_capacity((nr + 1) * m * k)) } else { None };
    let mut props = Vec::with_capacity(n * mm);
    let mut weights = if req.weights { Some(Vec::with_capacity(n * mm)) } else { None };
    let mut corrections = if req.corrections { Some(Vec::with_capacity(n * m)) } else { None };

    let mut ws = Workspace::new(m, k, req.sensitivity);
    let mut x = x0.to_vec();
    let mut s = vec![0.0; m * k];
    let mut phi = vec![0.0; mm];
    // per-interval tables at the r+1 sub-nodes
    let mut phis = vec![0.0; (r + 1) * mm];
    let mut qs = vec![0.0; (r + 1) * mm];
    let mut js = vec![0.0; (r + 1) * m];

    let mut record = |i: usize, x: &[f64], s: &[f64], times: &mut Vec<f64>, xbar: &mut Vec<f64>| -> Result<()> {
        let t = if i == nr { horizon } else { i as f64 * h };
        if x.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t });
        }
        times.push(t);
        xbar.extend_from_slice(x);
        if let Some(sp) = sens_path.as_mut() {
            sp.extend_from_slice(s);
        }
        Ok(())
    };

    avg.evaluate(theta, &x, node_need, &mut ws.eval)?;
    record(0, &x, &s, &mut times, &mut xbar)?;
    for kk in 0..n {
        identity_into(&mut phi, m);
        for j in 0..=r {
            let i = kk * r + j;
            if j > 0 {
                avg.evaluate(theta, &x, node_need, &mut ws.eval)?;
            }
            phis[j * mm..(j + 1) * mm].copy_from_slice(&phi);
            if req.weights {
                qs[j * mm..(j + 1) * mm].copy_from_slice(&ws.eval.q_bar);
            }
            if req.corrections {
                js[j * m..(j + 1) * m].copy_from_slice(&ws.eval.j_bar);
            }
            if j == r {
                break;
            }
            ws.derivative(0, &s, &phi);
            rk4_step(avg, theta, h, &mut x, &mut s, &mut phi, &mut ws)
                .map_err(|e| if let Error::NonFinite { .. } = e { Error::NonFinite { time: i as f64 * h } } else { e })?;
            record(i + 1, &x, &s, &mut times, &mut xbar)?;
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { time: (i + 1) as f64 * h });
            }
        }
        props.extend_from_slice(&phi);

        if req.weights || req.corrections {
            let mut q_acc = vec![0.0; mm];
            let mut c_acc = vec![0.0; m];
            let mut z = vec![0.0; mm];
            for j in 0..=r {
                // Z(t_k, s_j) = Φ_r Φ_j⁻¹
                if j == r {
                    identity_into(&mut z, m);
                } else {
                    let inv = inverse(&phis[j * mm..(j + 1) * mm], m)
                        .ok_or(Error::NonFinite { time: (kk * r + j) as f64 * h })?;
                    crate::linalg::matmul_into(&phi, &inv, m, m, m, &mut z);
                }
                let wj = simpson[j];
                if req.weights {
                    let q = &qs[j * mm..(j + 1) * mm];
                    for a in 0..m {
                        for b in 0..m {
                            let mut acc = 0.0;
                            for p in 0..m {
                                for l in 0..m {
                                    acc += z[a * m + p] * q[p * m + l] * z[b * m + l];
                                }
                            }
                            q_acc[a * m + b] += wj * acc;
                        }
                    }
                }
                if req.corrections {
                    let jv = &js[j * m..(j + 1) * m];
                    for a in 0..m {
                        let mut acc = 0.0;
                        for p in 0..m {
                            acc += z[a * m + p] * jv[p];
                        }
                        c_acc[a] += wj * acc;
                    }
                }
            }
            if let Some(wv) = weights.as_mut() {
                let mut qm = Mat::from_row_major(m, m, q_acc);
                qm.symmetrize();
                let min_eig = min_eigenvalue(&qm);
                if !(min_eig >= 1e-14 * delta) {
                    return Err(Error::WeightDegenerate { k: kk + 1, min_eigenvalue: min_eig });
                }
                wv.extend_from_slice(qm.as_slice());
            }
            if let Some(cv) = corrections.as_mut() {
                cv.extend_from_slice(&c_acc);
            }
        }
    }

    Ok(FlowCache {
        theta: theta.to_vec(),
        m,
        k,
        n,
        r,
        horizon,
        times,
        xbar,
        sensitivity: sens_path,
        step_propagators: props,
        weights,
        corrections,
    })
}

/// X̄ on a uniform grid; `values` is row-major (steps+1) × m.
#[derive(Debug, Clone, PartialEq)]
pub struct XbarPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub m: usize,
}

impl XbarPath {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }
}

/// X̄ at `steps + 1` uniform nodes from RK4 steps spanning `stride` nodes
/// each, filled in by cubic Hermite interpolation. `stride` must divide `steps`.
pub fn integrate_xbar_dense(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    horizon: f64,
    steps: usize,
    stride: usize,
) -> Result<XbarPath> {
    if stride <= 1 {
        return integrate_xbar(avg, theta, x0, horizon, steps);
    }
    if steps == 0 || !steps.is_multiple_of(stride) {
        return Err(Error::InvalidInput(format!("stride {stride} does not divide {steps} steps")));
    }
    let m = avg.slow_dim();
    if x0.len() != m || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidInput("integrate_xbar needs matching x0 and a positive horizon".into()));
    }
    let coarse = steps / stride;
    let big = horizon / coarse as f64;
    let mut eval = PointEval::new(m, avg.param_dim());
    let mut drift = |x: &[f64], out: &mut [f64]| -> Result<()> {
        avg.evaluate(theta, x, Need::DRIFT, &mut eval)?;
        out.copy_from_slice(&eval.lambda_bar);
        Ok(())
    };
    let mut x = x0.to_vec();
    let mut f0 = vec![0.0; m];
    drift(&x, &mut f0)?;
    let (mut k2, mut k3, mut k4, mut f1) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity((steps + 1) * m);
    times.push(0.0);
    values.extend_from_slice(&x);
    for i in 0..coarse {
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * big * f0[j];
        }
        drift(&tmp, &mut k2)?;
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * big * k2[j];
        }
        drift(&tmp, &mut k3)?;
        for j in 0..m {
            tmp[j] = x[j] + big * k3[j];
        }
        drift(&tmp, &mut k4)?;
        for j in 0..m {
            next[j] = x[j] + big / 6.0 * (f0[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_end = if i + 1 == coarse { horizon } else { (i + 1) as f64 * big };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t_end });
        }
        drift(&next, &mut f1)?;
        for sub in 1..=stride {
            let s = sub as f64 / stride as f64;
            let (s2, s3) = (s * s, s * s * s);
            let (h00, h10, h01, h11) = (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2);
            times.push(if sub == stride { t_end } else { (i as f64 + s) * big });
            for j in 0..m {
                values.push(if sub == stride {
                    next[j]
                } else {
                    h00 * x[j] + h10 * big * f0[j] + h01 * next[j] + h11 * big * f1[j]
                });
            }
        }
        x.copy_from_slice(&next);
        f0.copy_from_slice(&f1);
    }
    Ok(XbarPath { times, values, m })
}

/// X̄ alone by RK4 with `steps` equal steps (drift evaluations only).
pub fn integrate_xbar(avg: &AveragedModel, theta: &[f64], x0: &[f64], horizon: f64, steps: usize) -> Result<XbarPath> {
    let m = avg.slow_dim();
    if steps == 0 || x0.len() != m || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidInput("integrate_xbar needs steps >= 1, matching x0 and a positive horizon".into()));
    }
    let h = horizon / steps as f64;
    let mut eval = PointEval::new(m, avg.param_dim());
    let mut x = x0.to_vec();
    let mut tmp = vec![0.0; m];
    let mut kv = [vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity((steps + 1) * m);
    times.push(0.0);
    values.extend_from_slice(&x);
    for i in 0..steps {
        for st in 0..4 {
            if st == 0 {
                tmp.copy_from_slice(&x);
            } else {
                let c = if st == 3 { h } else { 0.5 * h };
                for j in 0..m {
                    tmp[j] = x[j] + c * kv[st - 1][j];
                }
            }
            avg.evaluate(theta, &tmp, Need::DRIFT, &mut eval)?;
            kv[st].copy_from_slice(&eval.lambda_bar);
        }
        for j in 0..m {
            x[j] += h / 6.0 * (kv[0][j] + 2.0 * kv[1][j] + 2.0 * kv[2][j] + kv[3][j]);
        }
        let t = if i + 1 == steps { horizon } else { (i + 1) as f64 * h };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t });
        }
        times.push(t);
        values.extend_from_slice(&x);
    }
    Ok(XbarPath { times, values, m })
}

/// Z(t, s) for grid times s ≤ t, re-integrated along the cached path with
/// the same RK4 steps.
pub fn propagator(avg: &AveragedModel, flow: &FlowCache, s: f64, t: f64) -> Result<Mat> {
    let (i0, i1) = (flow.node_index(s)?, flow.node_index(t)?);
    if i1 < i0 {
        return Err(Error::GridMismatch(format!("propagator needs s <= t, got s = {s}, t = {t}")));
    }
    let m = flow.m;
    let h = flow.horizon / (flow.n * flow.r) as f64;
    let mut ws = Workspace::new(m, flow.k, false);
    let mut x = flow.xbar_at(i0).to_vec();
    let mut sdummy = vec![0.0; m * flow.k];
    let mut phi = vec![0.0; m * m];
    identity_into(&mut phi, m);
    for _ in i0..i1 {
        avg.evaluate(&flow.theta, &x, stage_need(false), &mut ws.eval)?;
        ws.derivative(0, &sdummy, &phi);
        rk4_step(avg, &flow.theta, h, &mut x, &mut sdummy, &mut phi, &mut ws)?;
    }
    Ok(Mat::from_row_major(m, m, phi))
}
