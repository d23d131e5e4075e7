//! Asymptotic covariances of √(1/ε)(θ̂ − θ₀) for both estimators.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fast_avg::{AveragedModel, Need, PointEval};
use crate::flow::{build_flow, integrate_xbar_dense, FlowCache, FlowRequest};
use crate::linalg::{min_eigenvalue, spd_inverse, Mat};
use crate::math::sqrt;
use crate::quadrature::simpson_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceKind {
    MceFinite,
    SmceFinite,
    MceLimit,
    SmceLimit,
}

impl VarianceKind {
    pub fn is_limit(&self) -> bool {
        matches!(self, VarianceKind::MceLimit | VarianceKind::SmceLimit)
    }

    pub fn is_mce(&self) -> bool {
        matches!(self, VarianceKind::MceFinite | VarianceKind::MceLimit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticVariance {
    pub kind: VarianceKind,
    pub matrix: Mat,
    /// `None` for the n → ∞ limit.
    pub n: Option<usize>,
    pub theta: Vec<f64>,
}

/// Which of the two limits to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    Mce,
    Smce,
}

pub const DEFAULT_LIMIT_NODES: usize = 4096;

/// Information-type sums are singular below this relative eigenvalue.
const SINGULAR_REL: f64 = 1e-12;

fn checked_inverse(a: &Mat, what: &str) -> Result<Mat> {
    let k = a.rows();
    let trace = a.trace();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(Error::IdentifiabilityFailure(format!("{what} has trace {trace}")));
    }
    let lo = min_eigenvalue(a);
    if lo < SINGULAR_REL * trace / k as f64 {
        return Err(Error::IdentifiabilityFailure(format!(
            "{what} is singular (min eigenvalue {lo:e}, trace {trace:e})"
        )));
    }
    let mut inv = spd_inverse(a).ok_or_else(|| Error::IdentifiabilityFailure(format!("{what} is not invertible")))?;
    inv.symmetrize();
    Ok(inv)
}

/// d_k = Z(t_k, t_{k−1}) S_{k−1} − S_k, each m × k.
pub fn sensitivity_differences(flow: &FlowCache) -> Result<Vec<Mat>> {
    let (m, k) = (flow.slow_dim(), flow.param_dim());
    let mut out = Vec::with_capacity(flow.n());
    for step in 1..=flow.n() {
        let prev = flow
            .sensitivity_obs(step - 1)
            .ok_or_else(|| Error::InvalidInput("flow was built without sensitivities".into()))?;
        let cur = flow.sensitivity_obs(step).unwrap_or(prev);
        let z = Mat::from_row_major(m, m, flow.step_propagator(step).to_vec());
        let zs = z.matmul(&Mat::from_row_major(m, k, prev.to_vec()));
        out.push(zs.sub(&Mat::from_row_major(m, k, cur.to_vec())));
    }
    Ok(out)
}

fn weights_of(flow: &FlowCache) -> Result<Vec<Mat>> {
    let m = flow.slow_dim();
    (1..=flow.n())
        .map(|step| {
            flow.weight(step)
                .map(|q| Mat::from_row_major(m, m, q.to_vec()))
                .ok_or_else(|| Error::InvalidInput("flow was built without weights".into()))
        })
        .collect()
}

fn check_nonzero(d: &[Mat]) -> Result<()> {
    let largest = d.iter().map(Mat::max_abs).fold(0.0, f64::max);
    if !(largest > 1e-12) {
        return Err(Error::IdentifiabilityFailure(format!(
            "every sensitivity difference vanishes (max |d_k| = {largest:e})"
        )));
    }
    Ok(())
}

fn finite_flow(avg: &AveragedModel, theta: &[f64], x0: &[f64], n: usize, horizon: f64, r: usize) -> Result<FlowCache> {
    let req = FlowRequest { refinement: r, sensitivity: true, weights: true, corrections: false };
    build_flow(avg, theta, x0, horizon, n, req)
}

/// M(θ; n) = [Σ d_kᵀ Q_k⁻¹ d_k]⁻¹.
pub fn mce_variance(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    n: usize,
    horizon: f64,
    refinement: usize,
) -> Result<AsymptoticVariance> {
    let flow = finite_flow(avg, theta, x0, n, horizon, refinement)?;
    let d = sensitivity_differences(&flow)?;
    check_nonzero(&d)?;
    let q = weights_of(&flow)?;
    let k = avg.param_dim();
    let mut info = Mat::zeros(k, k);
    for (step, (dk, qk)) in d.iter().zip(&q).enumerate() {
        let qi = spd_inverse(qk).ok_or(Error::WeightDegenerate { k: step + 1, min_eigenvalue: min_eigenvalue(qk) })?;
        info = info.add(&dk.transpose().matmul(&qi).matmul(dk));
    }
    info.symmetrize();
    let matrix = checked_inverse(&info, "sum of d_k' Q_k^-1 d_k")?;
    Ok(AsymptoticVariance { kind: VarianceKind::MceFinite, matrix, n: Some(n), theta: theta.to_vec() })
}

/// M̃(θ; n) = Ψ⁻¹ Ξ Ψ⁻¹ with Ψ = Σ d_kᵀ d_k and Ξ = Σ d_kᵀ Q_k d_k.
pub fn smce_variance(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    n: usize,
    horizon: f64,
    refinement: usize,
) -> Result<AsymptoticVariance> {
    let flow = finite_flow(avg, theta, x0, n, horizon, refinement)?;
    let d = sensitivity_differences(&flow)?;
    check_nonzero(&d)?;
    let q = weights_of(&flow)?;
    let matrix = sandwich(&d, &q)?;
    Ok(AsymptoticVariance { kind: VarianceKind::SmceFinite, matrix, n: Some(n), theta: theta.to_vec() })
}

/// Ψ⁻¹ Ξ Ψ⁻¹ from explicit d_k and Q_k.
pub fn sandwich(d: &[Mat], q: &[Mat]) -> Result<Mat> {
    let k = d.first().map(Mat::cols).unwrap_or(0);
    let mut psi = Mat::zeros(k, k);
    let mut xi = Mat::zeros(k, k);
    for (dk, qk) in d.iter().zip(q) {
        let dt = dk.transpose();
        psi = psi.add(&dt.matmul(dk));
        xi = xi.add(&dt.matmul(qk).matmul(dk));
    }
    psi.symmetrize();
    xi.symmetrize();
    let pi = checked_inverse(&psi, "Psi")?;
    let mut out = pi.matmul(&xi).matmul(&pi);
    out.symmetrize();
    Ok(out)
}

/// n → ∞ limits by Simpson along X̄ on `nodes` intervals (rounded up to even).
pub fn limit_variance(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    horizon: f64,
    kind: LimitKind,
    nodes: usize,
) -> Result<AsymptoticVariance> {
    let nodes = (nodes.max(2) + 1) & !1;
    let (m, k) = (avg.slow_dim(), avg.param_dim());
    // RK4 on at least 512 steps, Hermite-interpolated onto the Simpson nodes
    let stride = [8, 4, 2].into_iter().find(|s| nodes.is_multiple_of(*s) && nodes / s >= 512).unwrap_or(1);
    let path = integrate_xbar_dense(avg, theta, x0, horizon, nodes, stride)?;
    let w = simpson_weights(nodes, horizon / nodes as f64);
    let need = Need { grad_x: false, grad_theta: true, q_bar: true, j_bar: false };
    let mut e = PointEval::new(m, k);
    let mut a = Mat::zeros(k, k);
    let mut b = Mat::zeros(k, k);
    for (i, wi) in w.iter().enumerate() {
        avg.evaluate(theta, path.at(i), need, &mut e)?;
        let g = Mat::from_row_major(m, k, e.grad_theta.clone());
        let q = Mat::from_row_major(m, m, e.q_bar.clone());
        let gt = g.transpose();
        match kind {
            LimitKind::Mce => {
                let qi = spd_inverse(&q).ok_or_else(|| {
                    Error::InvalidInput(format!("effective diffusion is singular at t = {}", path.times[i]))
                })?;
                a = a.add(&gt.matmul(&qi).matmul(&g).scale(*wi));
            }
            LimitKind::Smce => {
                a = a.add(&gt.matmul(&g).scale(*wi));
                b = b.add(&gt.matmul(&q).matmul(&g).scale(*wi));
            }
        }
    }
    a.symmetrize();
    let (matrix, vk) = match kind {
        LimitKind::Mce => (checked_inverse(&a, "Fisher information integral")?, VarianceKind::MceLimit),
        LimitKind::Smce => {
            b.symmetrize();
            let pi = checked_inverse(&a, "Psi integral")?;
            let mut out = pi.matmul(&b).matmul(&pi);
            out.symmetrize();
            (out, VarianceKind::SmceLimit)
        }
    };
    Ok(AsymptoticVariance { kind: vk, matrix, n: None, theta: theta.to_vec() })
}

/// √(ε · diag M), the SD of θ̂ at noise level ε.
pub fn theoretical_sd(var: &AsymptoticVariance, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    Ok(var.matrix.diagonal().iter().map(|v| sqrt(epsilon * v)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdGap {
    pub gap: Mat,
    pub min_eigenvalue: f64,
    pub pass: bool,
}

/// M̃ − M with its smallest eigenvalue; passes at ≥ −1e-10·trace.
pub fn psd_gap(mtilde: &Mat, m: &Mat) -> PsdGap {
    let mut gap = mtilde.sub(m);
    gap.symmetrize();
    let lo = min_eigenvalue(&gap);
    let scale = mtilde.trace().abs().max(m.trace().abs());
    PsdGap { pass: lo >= -1e-10 * scale, min_eigenvalue: lo, gap }
}

/// Finite-n weights for the first `n` steps, for callers that want d and Q directly.
pub fn finite_ingredients(
    avg: &AveragedModel,
    theta: &[f64],
    x0: &[f64],
    n: usize,
    horizon: f64,
    refinement: usize,
) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let flow = finite_flow(avg, theta, x0, n, horizon, refinement)?;
    Ok((sensitivity_differences(&flow)?, weights_of(&flow)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fast_avg::ClosedForm;
    use crate::math::{exp, expm1};
    use crate::registry::example2_closed_form;
    use alloc::boxed::Box;
    use alloc::vec;

    const M_LIMIT: f64 = 1.163_953_413_738_653;

    fn decay(a: f64, q: f64) -> AveragedModel {
        // λ̄ = −a x + θ
        AveragedModel::closed_form(
            ClosedForm::new(1, 1, Box::new(move |t, x, o| o[0] = -a * x[0] + t[0]), Box::new(move |_, _, o| o[0] = q))
                .with_grad_x(Box::new(move |_, _, o| o[0] = -a))
                .with_grad_theta(Box::new(|_, _, o| o[0] = 1.0)),
        )
    }

    fn flat() -> AveragedModel {
        AveragedModel::closed_form(ClosedForm::new(
            1,
            1,
            Box::new(|_, x, o| o[0] = 0.5 * x[0]),
            Box::new(|_, _, o| o[0] = 1.0),
        ))
    }

    #[test]
    fn example2_limit_closed_form() {
        let avg = example2_closed_form();
        assert!((M_LIMIT - 2.0 / (exp(1.0) - 1.0)).abs() < 1e-14);
        let v = limit_variance(&avg, &[1.0], &[1.0], 1.0, LimitKind::Mce, DEFAULT_LIMIT_NODES).unwrap();
        assert!((v.matrix.get(0, 0) - M_LIMIT).abs() < 1e-9);
        assert_eq!(v.n, None);
        let sd = theoretical_sd(&v, 1e-2).unwrap()[0];
        assert!((sd - 0.1079).abs() < 5e-5);
        let sd3 = theoretical_sd(&v, 1e-3).unwrap()[0];
        assert!((sd3 - 0.0341).abs() < 5e-5);
        assert!((sd / sd3 - sqrt(10.0)).abs() < 1e-12);
        // q̄ constant: both limits agree
        let s = limit_variance(&avg, &[1.0], &[1.0], 1.0, LimitKind::Smce, DEFAULT_LIMIT_NODES).unwrap();
        assert!((s.matrix.get(0, 0) - M_LIMIT).abs() < 1e-9);
    }

    #[test]
    fn example2_finite_n_approaches_limit() {
        let avg = example2_closed_form();
        let m = mce_variance(&avg, &[1.0], &[1.0], 1000, 1.0, 4).unwrap();
        assert!((m.matrix.get(0, 0) - M_LIMIT).abs() < 0.02 * M_LIMIT);
        let m10 = mce_variance(&avg, &[1.0], &[1.0], 10, 1.0, 64).unwrap();
        let s10 = smce_variance(&avg, &[1.0], &[1.0], 10, 1.0, 64).unwrap();
        assert!(psd_gap(&s10.matrix, &m10.matrix).pass);
    }

    #[test]
    fn one_step_hand_evaluation() {
        // dX̄ = (−a X̄ + θ) dt: S_1 = (1 − e^{−aΔ})/a, d_1 = −S_1, Q_1 = q(1 − e^{−2aΔ})/(2a)
        let (a, q, h) = (0.7, 1.5, 0.4);
        let avg = decay(a, q);
        let v = mce_variance(&avg, &[0.3], &[2.0], 1, h, 256).unwrap();
        let d = -(-expm1(-a * h)) / a;
        let qq = q * (-expm1(-2.0 * a * h)) / (2.0 * a);
        assert!((v.matrix.get(0, 0) - qq / (d * d)).abs() < 1e-9 * qq / (d * d));
    }

    #[test]
    fn constant_weights_make_the_estimators_equal() {
        let d: Vec<Mat> = [0.3, -1.2, 0.8].iter().map(|v| Mat::scalar(*v)).collect();
        let q = vec![Mat::scalar(0.5); 3];
        let mt = sandwich(&d, &q).unwrap();
        let s2: f64 = [0.09, 1.44, 0.64].iter().sum();
        assert!((mt.get(0, 0) - 0.5 / s2).abs() < 1e-14);
        let g = psd_gap(&mt, &Mat::scalar(0.5 / s2));
        assert!(g.pass && g.min_eigenvalue.abs() < 1e-14);
    }

    #[test]
    fn no_theta_dependence_is_unidentifiable() {
        let avg = flat();
        for r in [
            mce_variance(&avg, &[1.0], &[1.0], 10, 1.0, 8),
            smce_variance(&avg, &[1.0], &[1.0], 10, 1.0, 8),
            limit_variance(&avg, &[1.0], &[1.0], 1.0, LimitKind::Mce, 64),
            limit_variance(&avg, &[1.0], &[1.0], 1.0, LimitKind::Smce, 64),
        ] {
            assert!(matches!(r, Err(Error::IdentifiabilityFailure(_))), "{r:?}");
        }
    }

    #[test]
    fn zero_epsilon_gives_zero_sd() {
        let v = AsymptoticVariance { kind: VarianceKind::MceLimit, matrix: Mat::scalar(2.0), n: None, theta: vec![1.0] };
        assert_eq!(theoretical_sd(&v, 0.0).unwrap(), vec![0.0]);
        assert!(theoretical_sd(&v, -1.0).is_err());
    }
}
