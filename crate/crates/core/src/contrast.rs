//! Weighted (MCE) and simplified (SMCE) contrasts and their minimisers.
//!
//! With F̃_k = [x_k − X̄_k] − Z(t_k, t_{k−1})[x_{k−1} − X̄_{k−1}] and
//! F_k = F̃_k − √ε ∫ Z(t_k,s) J̄(X̄_s) ds, the contrasts are
//! U = Σ F_kᵀ Q_k⁻¹ F_k and Ũ = Σ |F̃_k|².

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fast_avg::AveragedModel;
use crate::flow::{build_flow, FlowCache, FlowRequest};
use crate::linalg::{cholesky, cholesky_solve};
use crate::model::ParameterSpace;
use crate::optimize::{minimize, OptimizerSettings};
use crate::sim::ObservationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimatorKind {
    Mce,
    Smce,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Mce => "MCE",
            EstimatorKind::Smce => "SMCE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastEvaluation {
    pub theta: Vec<f64>,
    pub value: f64,
    /// F_k (MCE) or F̃_k (SMCE), row-major n × m.
    pub residuals: Vec<f64>,
    pub weights_used: bool,
}

fn check_grid(obs: &ObservationSet, flow: &FlowCache) -> Result<()> {
    if obs.n != flow.n() || obs.m() != flow.slow_dim() || (obs.horizon - flow.horizon()).abs() > 1e-12 * obs.horizon {
        return Err(Error::GridMismatch(format!(
            "observations (n = {}, m = {}, T = {}) do not match the flow (n = {}, m = {}, T = {})",
            obs.n,
            obs.m(),
            obs.horizon,
            flow.n(),
            flow.slow_dim(),
            flow.horizon()
        )));
    }
    Ok(())
}

/// F̃_k for k = 1..n, row-major n × m. The k = 1 bracket uses x₀ on both sides.
pub fn residuals_simplified(obs: &ObservationSet, flow: &FlowCache) -> Result<Vec<f64>> {
    check_grid(obs, flow)?;
    let m = obs.m();
    let mut out = vec![0.0; obs.n * m];
    let mut prev: Vec<f64> = obs.x0.iter().zip(flow.xbar_obs(0)).map(|(x, xb)| x - xb).collect();
    let mut cur = vec![0.0; m];
    for k in 1..=obs.n {
        let z = flow.step_propagator(k);
        for (i, c) in cur.iter_mut().enumerate() {
            *c = obs.at(k)[i] - flow.xbar_obs(k)[i];
        }
        for i in 0..m {
            let mut zp = 0.0;
            for j in 0..m {
                zp += z[i * m + j] * prev[j];
            }
            out[(k - 1) * m + i] = cur[i] - zp;
        }
        prev.copy_from_slice(&cur);
    }
    Ok(out)
}

/// F_k = F̃_k − √ε ∫ Z J̄; needs a flow built with corrections.
pub fn residuals_full(obs: &ObservationSet, flow: &FlowCache, epsilon: f64) -> Result<Vec<f64>> {
    let mut f = residuals_simplified(obs, flow)?;
    if epsilon == 0.0 {
        return Ok(f);
    }
    let corr = flow
        .drift_corrections(epsilon)
        .ok_or_else(|| Error::InvalidInput("flow was built without drift corrections".into()))?;
    f.iter_mut().zip(&corr).for_each(|(v, c)| *v -= c);
    Ok(f)
}

/// Σ F_kᵀ Q_k⁻¹ F_k using the weights stored in `flow`.
pub fn weighted_sum(flow: &FlowCache, residuals: &[f64]) -> Result<f64> {
    let m = flow.slow_dim();
    let mut total = 0.0;
    let mut buf = vec![0.0; m];
    for k in 1..=flow.n() {
        let q = flow.weight(k).ok_or_else(|| Error::InvalidInput("flow was built without weights".into()))?;
        let l = match cholesky(q, m) {
            Some(l) => l,
            None => {
                let trace: f64 = (0..m).map(|i| q[i * m + i]).sum();
                let mut jittered = q.to_vec();
                for i in 0..m {
                    jittered[i * m + i] += 1e-12 * trace / m as f64;
                }
                cholesky(&jittered, m).ok_or(Error::WeightDegenerate { k, min_eigenvalue: f64::NAN })?
            }
        };
        let f = &residuals[(k - 1) * m..k * m];
        buf.copy_from_slice(f);
        cholesky_solve(&l, m, &mut buf);
        total += f.iter().zip(&buf).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

fn flow_for(obs: &ObservationSet, theta: &[f64], avg: &AveragedModel, req: FlowRequest) -> Result<FlowCache> {
    build_flow(avg, theta, &obs.x0, obs.horizon, obs.n, req)
}

pub fn contrast_mce(
    obs: &ObservationSet,
    epsilon: f64,
    theta: &[f64],
    avg: &AveragedModel,
    refinement: usize,
) -> Result<ContrastEvaluation> {
    let req = FlowRequest { refinement, sensitivity: false, weights: true, corrections: epsilon != 0.0 };
    let flow = flow_for(obs, theta, avg, req)?;
    let residuals = residuals_full(obs, &flow, epsilon)?;
    let value = weighted_sum(&flow, &residuals)?;
    Ok(ContrastEvaluation { theta: theta.to_vec(), value, residuals, weights_used: true })
}

/// Never touches ε, q̄ or J̄.
pub fn contrast_smce(
    obs: &ObservationSet,
    theta: &[f64],
    avg: &AveragedModel,
    refinement: usize,
) -> Result<ContrastEvaluation> {
    let flow = flow_for(obs, theta, avg, FlowRequest::path_only(refinement))?;
    let residuals = residuals_simplified(obs, &flow)?;
    let value = residuals.iter().map(|v| v * v).sum();
    Ok(ContrastEvaluation { theta: theta.to_vec(), value, residuals, weights_used: false })
}

/// One of the two contrasts bound to an observation set.
#[derive(Clone, Copy)]
pub struct Contrast<'a> {
    pub kind: EstimatorKind,
    pub obs: &'a ObservationSet,
    pub avg: &'a AveragedModel,
    /// Read by the MCE only.
    pub epsilon: f64,
    pub refinement: usize,
}

impl<'a> Contrast<'a> {
    pub fn mce(obs: &'a ObservationSet, avg: &'a AveragedModel, epsilon: f64) -> Self {
        Self { kind: EstimatorKind::Mce, obs, avg, epsilon, refinement: 64 }
    }

    pub fn smce(obs: &'a ObservationSet, avg: &'a AveragedModel) -> Self {
        Self { kind: EstimatorKind::Smce, obs, avg, epsilon: f64::NAN, refinement: 64 }
    }

    pub fn with_refinement(mut self, r: usize) -> Self {
        self.refinement = r;
        self
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<ContrastEvaluation> {
        match self.kind {
            EstimatorKind::Mce => contrast_mce(self.obs, self.epsilon, theta, self.avg, self.refinement),
            EstimatorKind::Smce => contrast_smce(self.obs, theta, self.avg, self.refinement),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    pub contrast_at_min: f64,
    pub kind: EstimatorKind,
    pub trace: Vec<(Vec<f64>, f64)>,
    pub converged: bool,
    pub boundary_hit: bool,
}

pub fn estimate(contrast: &Contrast<'_>, space: &ParameterSpace, settings: &OptimizerSettings) -> Result<EstimationResult> {
    if space.dim() != contrast.avg.param_dim() {
        return Err(Error::InvalidInput(format!(
            "parameter box has dimension {}, model expects {}",
            space.dim(),
            contrast.avg.param_dim()
        )));
    }
    if contrast.kind == EstimatorKind::Mce && !(contrast.epsilon >= 0.0 && contrast.epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("MCE needs a finite epsilon >= 0, got {}", contrast.epsilon)));
    }
    let f = |theta: &[f64]| -> Result<f64> { contrast.evaluate(theta).map(|e| e.value) };
    let min = minimize(&f, space, settings)?;
    Ok(EstimationResult {
        theta_hat: min.theta,
        contrast_at_min: min.value,
        kind: contrast.kind,
        trace: min.trace,
        converged: min.converged,
        boundary_hit: min.boundary_hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fast_avg::ClosedForm;
    use crate::math::exp;
    use crate::registry::example2_closed_form;
    use alloc::boxed::Box;

    fn decay(a: f64, q: f64) -> AveragedModel {
        // λ̄ = −θ a x with θ the parameter
        AveragedModel::closed_form(
            ClosedForm::new(1, 1, Box::new(move |t, x, o| o[0] = -t[0] * a * x[0]), Box::new(move |_, _, o| o[0] = q))
                .with_grad_x(Box::new(move |t, _, o| o[0] = -t[0] * a))
                .with_grad_theta(Box::new(move |_, x, o| o[0] = -a * x[0])),
        )
    }

    fn exact_obs(avg: &AveragedModel, theta: f64, n: usize) -> ObservationSet {
        let flow = build_flow(avg, &[theta], &[1.0], 1.0, n, FlowRequest::path_only(64)).unwrap();
        let samples = (1..=n).map(|k| flow.xbar_obs(k)[0]).collect();
        ObservationSet::new(vec![1.0], samples, 1.0).unwrap()
    }

    #[test]
    fn perturbed_sample_residuals() {
        let (a, n, u) = (0.8, 10, 0.1);
        let avg = decay(a, 1.0);
        let mut obs = exact_obs(&avg, 1.0, n);
        obs.samples[0] += u;
        let flow = build_flow(&avg, &[1.0], &[1.0], 1.0, n, FlowRequest::path_only(64)).unwrap();
        let f = residuals_simplified(&obs, &flow).unwrap();
        assert!((f[0] - u).abs() < 1e-14);
        assert!((f[1] + exp(-a * 0.1) * u).abs() < 1e-12);
        assert!(f[2..].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn one_term_contrasts() {
        // n = 1, ∇ₓλ̄ = 0, q = 2, Δ = 0.1 is not reachable with T = 1, so use T = 0.1.
        let avg = decay(0.0, 2.0);
        let obs = ObservationSet::new(vec![1.0], vec![1.1], 0.1).unwrap();
        let mce = contrast_mce(&obs, 0.0, &[1.0], &avg, 64).unwrap();
        assert_eq!(mce.residuals.len(), 1);
        assert!((mce.value - 0.05).abs() < 1e-12);
        let smce = contrast_smce(&obs, &[1.0], &avg, 64).unwrap();
        assert!((smce.value - 0.01).abs() < 1e-14);
        assert!(mce.weights_used && !smce.weights_used);
    }

    #[test]
    fn zero_residuals_give_zero_contrast() {
        let avg = example2_closed_form();
        let obs = exact_obs(&avg, 1.0, 10);
        assert_eq!(contrast_smce(&obs, &[1.0], &avg, 64).unwrap().value, 0.0);
        assert_eq!(contrast_mce(&obs, 1e-2, &[1.0], &avg, 64).unwrap().value, 0.0);
    }

    #[test]
    fn example2_separation_and_recovery() {
        let avg = example2_closed_form();
        let obs = exact_obs(&avg, 1.0, 10);
        for c in [Contrast::mce(&obs, &avg, 1e-2), Contrast::smce(&obs, &avg)] {
            let at = |t: f64| c.evaluate(&[t]).unwrap().value;
            assert!(at(1.0) < at(1.2) && at(1.0) < at(0.8));
        }
        let space = ParameterSpace::new(vec![0.05], vec![3.0]).unwrap();
        let est = estimate(&Contrast::smce(&obs, &avg), &space, &OptimizerSettings::default()).unwrap();
        assert!((est.theta_hat[0] - 1.0).abs() < 1e-5);
        assert!(est.trace.iter().all(|(_, v)| *v >= est.contrast_at_min));
        assert!(!est.boundary_hit);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let avg = example2_closed_form();
        let obs = exact_obs(&avg, 1.0, 10);
        let flow = build_flow(&avg, &[1.0], &[1.0], 1.0, 5, FlowRequest::path_only(4)).unwrap();
        assert!(matches!(residuals_simplified(&obs, &flow), Err(Error::GridMismatch(_))));
    }
}
