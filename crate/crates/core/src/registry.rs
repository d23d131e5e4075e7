//! Built-in benchmark models with their averaged coefficients.
//!
//! * `example1-periodic`: dX = (ε/δ)(sin(X/δ) − cos(X/δ))dt − θX dt + √ε dW,
//!   fast variable Y = X/δ on the circle.
//! * `example2-ou`: dX = (ε/δ)θY dt + θXY² dt + √ε dW with an OU fast
//!   process dY = −(ε/δ²)(Y/θ)dt + (√ε/δ)dB.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fast_avg::{build_averaged_model, AveragedModel, ClosedForm, QuadratureSettings};
use crate::math::{cos, sin};
use crate::model::{Coefficients, FastDomain, FastMode, MultiscaleModel, ParameterSpace, Regime};

pub const EXAMPLE1: &str = "example1-periodic";
pub const EXAMPLE2: &str = "example2-ou";
pub const NAMES: [&str; 2] = [EXAMPLE1, EXAMPLE2];

struct PeriodicExample;

impl Coefficients for PeriodicExample {
    fn slow_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn b(&self, _theta: &[f64], _x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = sin(y) - cos(y);
    }
    fn c(&self, theta: &[f64], x: &[f64], _y: f64, out: &mut [f64]) {
        out[0] = -theta[0] * x[0];
    }
    fn sigma(&self, _x: &[f64], _y: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn f(&self, _theta: &[f64], _x: &[f64], y: f64) -> f64 {
        sin(y) - cos(y)
    }
    fn g(&self, theta: &[f64], x: &[f64], _y: f64) -> f64 {
        -theta[0] * x[0]
    }
    fn tau1(&self, _x: &[f64], _y: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn tau2(&self, _x: &[f64], _y: f64) -> f64 {
        0.0
    }
}

struct OuExample;

impl Coefficients for OuExample {
    fn slow_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn b(&self, theta: &[f64], _x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = theta[0] * y;
    }
    fn c(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = theta[0] * x[0] * y * y;
    }
    fn sigma(&self, _x: &[f64], _y: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn f(&self, theta: &[f64], _x: &[f64], y: f64) -> f64 {
        -y / theta[0]
    }
    fn g(&self, _theta: &[f64], _x: &[f64], _y: f64) -> f64 {
        0.0
    }
    fn tau1(&self, _x: &[f64], _y: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn tau2(&self, _x: &[f64], _y: f64) -> f64 {
        1.0
    }
}

/// Example 1 in the homogenization regime with rate constant `ell`
/// (ℓ = 1 for δ = ε^{3/2}).
pub fn example1_model(ell: f64) -> Result<MultiscaleModel> {
    let regime = Regime::homogenization(ell)?;
    MultiscaleModel::new(
        EXAMPLE1,
        Arc::new(PeriodicExample),
        FastDomain::Periodic { period: 2.0 * PI },
        vec![1.0],
        0.0,
        1.0,
        regime,
    )?
    .with_fast_mode(FastMode::SlowScaled)
}

pub fn example2_model(ell: f64) -> Result<MultiscaleModel> {
    let regime = Regime::homogenization(ell)?;
    MultiscaleModel::new(EXAMPLE2, Arc::new(OuExample), FastDomain::Line, vec![1.0], 1.0, 1.0, regime)
}

/// Constants of Example 1's averaged model, all obtained by quadrature:
/// λ̄ = −θ·a·x, q̄ = q (= a analytically), J̄ = κ·θ²·x²/ℓ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1Constants {
    /// L = ∫₀^{2π} e^{2(sin y + cos y)} dy.
    pub l: f64,
    pub a: f64,
    pub q: f64,
    pub kappa: f64,
}

pub fn example1_constants(quad: &QuadratureSettings) -> Result<Example1Constants> {
    let model = example1_model(1.0)?;
    let space = ParameterSpace::new(vec![0.5], vec![1.5])?;
    let avg = build_averaged_model(&model, &space, quad)?;
    let (theta, x) = ([1.0], [1.0]);
    let a = -avg.lambda_bar(&theta, &x)?[0];
    let q = avg.q_bar(&theta, &x)?.get(0, 0);
    let kappa = avg.j_bar(&theta, &x)?[0];
    if !(a > 0.0 && q > 0.0) {
        return Err(Error::InvalidInput("example 1 quadrature produced a non-positive constant".into()));
    }
    Ok(Example1Constants { l: 2.0 * PI / crate::math::sqrt(a), a, q, kappa })
}

pub fn example1_closed_form(consts: Example1Constants, ell: f64) -> AveragedModel {
    let Example1Constants { a, q, kappa, .. } = consts;
    let j_scale = if ell.is_finite() { kappa / ell } else { 0.0 };
    let form = ClosedForm::new(
        1,
        1,
        Box::new(move |t, x, o| o[0] = -t[0] * a * x[0]),
        Box::new(move |_, _, o| o[0] = q),
    )
    .with_grad_x(Box::new(move |t, _, o| o[0] = -t[0] * a))
    .with_grad_theta(Box::new(move |_, x, o| o[0] = -a * x[0]))
    .with_j_bar(Box::new(move |t, x, o| o[0] = j_scale * t[0] * t[0] * x[0] * x[0]));
    AveragedModel::closed_form(form)
}

/// λ̄ = θ²x/2, q̄ = 1 + θ⁴, J̄ = 0.
pub fn example2_closed_form() -> AveragedModel {
    let form = ClosedForm::new(
        1,
        1,
        Box::new(|t, x, o| o[0] = 0.5 * t[0] * t[0] * x[0]),
        Box::new(|t, _, o| o[0] = 1.0 + t[0] * t[0] * t[0] * t[0]),
    )
    .with_grad_x(Box::new(|t, _, o| o[0] = 0.5 * t[0] * t[0]))
    .with_grad_theta(Box::new(|t, x, o| o[0] = t[0] * x[0]));
    AveragedModel::closed_form(form)
}

/// A registry model bundled with its default box and averaged model.
#[derive(Debug, Clone)]
pub struct RegistryModel {
    pub model: MultiscaleModel,
    pub space: ParameterSpace,
    pub averaged: AveragedModel,
    pub theta0: Vec<f64>,
}

/// Look up a registry model; `closed_form = false` builds the averaged
/// model by quadrature instead.
pub fn lookup(name: &str, ell: f64, closed_form: bool, quad: &QuadratureSettings) -> Result<RegistryModel> {
    let (model, space) = match name {
        EXAMPLE1 => (example1_model(ell)?, ParameterSpace::new(vec![-1.0], vec![3.0])?),
        EXAMPLE2 => (example2_model(ell)?, ParameterSpace::new(vec![0.05], vec![3.0])?),
        other => return Err(Error::InvalidInput(alloc::format!("unknown registry model `{other}`"))),
    };
    let averaged = match (name, closed_form) {
        (EXAMPLE1, true) => example1_closed_form(example1_constants(quad)?, ell),
        (EXAMPLE2, true) => example2_closed_form(),
        _ => build_averaged_model(&model, &space, quad)?,
    };
    Ok(RegistryModel { model, space, averaged, theta0: vec![1.0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{exp, sqrt};
    use crate::model::{validate_model, CheckStatus};

    fn bessel_i0(x: f64) -> f64 {
        let (mut term, mut sum) = (1.0, 1.0);
        for k in 1..60 {
            term *= (x / 2.0) * (x / 2.0) / (k * k) as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn example1_constants_match_bessel_oracle() {
        let c = example1_constants(&QuadratureSettings::default()).unwrap();
        let l = 2.0 * PI * bessel_i0(2.0 * sqrt(2.0));
        assert!((c.l - l).abs() < 1e-9 * l, "{} vs {l}", c.l);
        let a = (2.0 * PI / l) * (2.0 * PI / l);
        assert!((c.a - a).abs() < 1e-10);
        // q̄ = ∫(1 + χ')² dμ collapses to (2π/L)²
        assert!((c.q - a).abs() < 1e-10);
        assert!(c.kappa.is_finite());
    }

    #[test]
    fn example2_quadrature_matches_closed_form() {
        let quad = QuadratureSettings::default();
        let reg = lookup(EXAMPLE2, 1.0, false, &quad).unwrap();
        let exact = example2_closed_form();
        for (theta, x) in [(1.0, 2.0), (0.7, -1.3), (2.2, 0.4)] {
            let (t, xs) = ([theta], [x]);
            let got = reg.averaged.lambda_bar(&t, &xs).unwrap()[0];
            let want = exact.lambda_bar(&t, &xs).unwrap()[0];
            assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
            let q = reg.averaged.q_bar(&t, &xs).unwrap().get(0, 0);
            assert!((q - (1.0 + theta.powi(4))).abs() < 1e-8);
            assert!(reg.averaged.j_bar(&t, &xs).unwrap()[0].abs() < 1e-12);
            let gt = reg.averaged.grad_theta_lambda_bar(&t, &xs).unwrap().get(0, 0);
            assert!((gt - theta * x).abs() < 1e-6 * (1.0 + (theta * x).abs()));
            let gx = reg.averaged.grad_x_lambda_bar(&t, &xs).unwrap().get(0, 0);
            assert!((gx - 0.5 * theta * theta).abs() < 1e-6);
        }
        let (t, xs) = ([1.0], [2.0]);
        assert!((reg.averaged.lambda_bar(&t, &xs).unwrap()[0] - 1.0).abs() < 1e-6);
        assert!((reg.averaged.q_bar(&t, &xs).unwrap().get(0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn example1_quadrature_matches_closed_form() {
        let quad = QuadratureSettings::default();
        let reg = lookup(EXAMPLE1, 1.0, false, &quad).unwrap();
        let closed = example1_closed_form(example1_constants(&quad).unwrap(), 1.0);
        for (theta, x) in [(1.0, 1.0), (0.3, -2.0), (2.5, 0.6)] {
            let (t, xs) = ([theta], [x]);
            let lq = reg.averaged.lambda_bar(&t, &xs).unwrap()[0];
            let lc = closed.lambda_bar(&t, &xs).unwrap()[0];
            assert!((lq - lc).abs() < 1e-10 * (1.0 + lc.abs()));
            let jq = reg.averaged.j_bar(&t, &xs).unwrap()[0];
            let jc = closed.j_bar(&t, &xs).unwrap()[0];
            assert!((jq - jc).abs() < 1e-8 * (1.0 + jc.abs()), "{jq} vs {jc}");
        }
    }

    #[test]
    fn example1_infinite_ell_drops_the_correction() {
        let quad = QuadratureSettings::default();
        let reg = lookup(EXAMPLE1, f64::INFINITY, false, &quad).unwrap();
        assert_eq!(reg.averaged.j_bar(&[1.0], &[1.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn doubling_nodes_leaves_averages_unchanged() {
        let coarse = QuadratureSettings::default();
        let fine = QuadratureSettings { nodes: 512, ..coarse };
        for name in NAMES {
            let a = lookup(name, 1.0, false, &coarse).unwrap().averaged;
            let b = lookup(name, 1.0, false, &fine).unwrap().averaged;
            let (t, x) = ([1.2], [0.8]);
            let (la, lb) = (a.lambda_bar(&t, &x).unwrap()[0], b.lambda_bar(&t, &x).unwrap()[0]);
            let (qa, qb) = (a.q_bar(&t, &x).unwrap().get(0, 0), b.q_bar(&t, &x).unwrap().get(0, 0));
            assert!((la - lb).abs() < 1e-6 * la.abs());
            assert!((qa - qb).abs() < 1e-6 * qa.abs());
        }
    }

    #[test]
    fn registry_models_validate() {
        let quad = QuadratureSettings::default();
        let r2 = validate_model(&example2_model(1.0).unwrap(), &[1.0], &quad).unwrap();
        assert!(r2.warnings().next().is_none(), "{r2:?}");
        let r1 = validate_model(&example1_model(1.0).unwrap(), &[1.0], &quad).unwrap();
        // τ₂ ≡ 0 in the constraint form is a warning, nothing else is
        let warned: Vec<_> = r1.warnings().map(|w| w.name).collect();
        assert_eq!(warned, ["tau2_nondegenerate"]);
        assert_eq!(r1.item("constraint_consistency").unwrap().status, CheckStatus::Pass);
    }

    #[test]
    fn example2_limit_path() {
        // X̄_t = e^{θ² t/2}
        let avg = example2_closed_form();
        assert!((avg.lambda_bar(&[1.0], &[exp(0.5)]).unwrap()[0] - 0.5 * exp(0.5)).abs() < 1e-15);
    }
}
