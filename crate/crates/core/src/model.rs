//! Slow–fast model definition, scaling regimes, parameter box and the
//! numeric spot checks of the structural conditions.
//!
//! The model is
//!
//! ```text
//! dX = (ε/δ) b_θ(X,Y) dt + c_θ(X,Y) dt + √ε σ(X,Y) dW
//! dY = (ε/δ²) f(X,Y) dt + (1/δ) g(X,Y) dt + (√ε/δ) τ₁(X,Y) dW + (√ε/δ) τ₂(X,Y) dB
//! ```
//!
//! with X ∈ ℝᵐ, scalar Y, W ∈ ℝʷ and scalar B.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fast_avg::{invariant_density, Domain1D, Generator1D, QuadratureSettings};

/// Coefficient functions of the slow–fast system.
///
/// Vector outputs are written into `out`; matrices are row-major. σ, τ₁ and
/// τ₂ do not depend on θ.
pub trait Coefficients: Send + Sync {
    fn slow_dim(&self) -> usize;
    /// Dimension w of the Brownian motion W.
    fn noise_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn b(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]);
    fn c(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]);
    /// m × w.
    fn sigma(&self, x: &[f64], y: f64, out: &mut [f64]);
    fn f(&self, theta: &[f64], x: &[f64], y: f64) -> f64;
    fn g(&self, theta: &[f64], x: &[f64], y: f64) -> f64;
    /// 1 × w.
    fn tau1(&self, x: &[f64], y: f64, out: &mut [f64]);
    fn tau2(&self, x: &[f64], y: f64) -> f64;
}

type ScalarFn = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Closure-backed coefficients for models with m = w = 1. Each closure
/// takes `(θ₀, x, y)`; θ-free coefficients simply ignore the first argument.
/// Only the first parameter component is passed, so `param_dim` is 1.
pub struct ScalarCoefficients {
    pub b: ScalarFn,
    pub c: ScalarFn,
    pub sigma: ScalarFn,
    pub f: ScalarFn,
    pub g: ScalarFn,
    pub tau1: ScalarFn,
    pub tau2: ScalarFn,
}

impl Coefficients for ScalarCoefficients {
    fn slow_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn b(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = (self.b)(theta[0], x[0], y);
    }
    fn c(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = (self.c)(theta[0], x[0], y);
    }
    fn sigma(&self, x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = (self.sigma)(0.0, x[0], y);
    }
    fn f(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        (self.f)(theta[0], x[0], y)
    }
    fn g(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        (self.g)(theta[0], x[0], y)
    }
    fn tau1(&self, x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = (self.tau1)(0.0, x[0], y);
    }
    fn tau2(&self, x: &[f64], y: f64) -> f64 {
        (self.tau2)(0.0, x[0], y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegimeKind {
    /// ε/δ → ∞.
    Homogenization,
    /// ε/δ → γ ∈ (0, ∞).
    Averaging { gamma: f64 },
}

/// Scaling regime plus the rate constant ℓ (ℓ_∞ or ℓ_γ), which may be +∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    kind: RegimeKind,
    ell: f64,
}

impl Regime {
    pub fn homogenization(ell: f64) -> Result<Self> {
        check_ell(ell)?;
        Ok(Self { kind: RegimeKind::Homogenization, ell })
    }

    pub fn averaging(gamma: f64, ell: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("averaging regime needs finite gamma > 0, got {gamma}")));
        }
        check_ell(ell)?;
        Ok(Self { kind: RegimeKind::Averaging { gamma }, ell })
    }

    pub fn kind(&self) -> RegimeKind {
        self.kind
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn gamma(&self) -> Option<f64> {
        match self.kind {
            RegimeKind::Averaging { gamma } => Some(gamma),
            RegimeKind::Homogenization => None,
        }
    }

    pub fn is_homogenization(&self) -> bool {
        matches!(self.kind, RegimeKind::Homogenization)
    }
}

fn check_ell(ell: f64) -> Result<()> {
    if ell > 0.0 && !ell.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("ell must lie in (0, inf], got {ell}")))
    }
}

/// Noise size ε and time-scale separation δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePair {
    pub epsilon: f64,
    pub delta: f64,
}

impl ScalePair {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite() && delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "epsilon and delta must be positive and finite, got ({epsilon}, {delta})"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    /// Soft consistency checks against the declared regime; the theory is
    /// asymptotic so these never fail.
    pub fn advisories(&self, regime: &Regime) -> Vec<String> {
        let ratio = self.epsilon / self.delta;
        let mut out = Vec::new();
        match regime.kind() {
            RegimeKind::Homogenization => {
                if ratio < 10.0 {
                    out.push(format!(
                        "epsilon/delta = {ratio:.3} is not large; homogenization asymptotics may not apply"
                    ));
                }
            }
            RegimeKind::Averaging { gamma } => {
                let rel = (ratio - gamma).abs() / gamma;
                if rel > 0.5 {
                    out.push(format!(
                        "epsilon/delta = {ratio:.3} deviates from gamma = {gamma} by {:.0}%",
                        rel * 100.0
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FastDomain {
    Periodic { period: f64 },
    /// Whole real line, truncated for quadrature per [`QuadratureSettings::truncation`].
    Line,
}

/// How the simulator advances the fast variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastMode {
    /// Integrate the fast SDE.
    Sde,
    /// Fast variable is the constraint Y = X/δ (m = 1); only X is simulated.
    SlowScaled,
}

/// Full coefficient set plus initial data, horizon and regime.
#[derive(Clone)]
pub struct MultiscaleModel {
    name: String,
    coefficients: Arc<dyn Coefficients>,
    fast_domain: FastDomain,
    fast_mode: FastMode,
    x0: Vec<f64>,
    y0: f64,
    horizon: f64,
    regime: Regime,
    nu: f64,
}

impl core::fmt::Debug for MultiscaleModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("MultiscaleModel")
            .field("name", &self.name)
            .field("slow_dim", &self.slow_dim())
            .field("param_dim", &self.param_dim())
            .field("fast_domain", &self.fast_domain)
            .field("fast_mode", &self.fast_mode)
            .field("x0", &self.x0)
            .field("y0", &self.y0)
            .field("horizon", &self.horizon)
            .field("regime", &self.regime)
            .finish()
    }
}

impl MultiscaleModel {
    pub fn new(
        name: impl Into<String>,
        coefficients: Arc<dyn Coefficients>,
        fast_domain: FastDomain,
        x0: Vec<f64>,
        y0: f64,
        horizon: f64,
        regime: Regime,
    ) -> Result<Self> {
        let m = coefficients.slow_dim();
        if m == 0 || coefficients.param_dim() == 0 || coefficients.noise_dim() == 0 {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        if x0.len() != m {
            return Err(Error::InvalidInput(format!("x0 has length {}, slow dimension is {m}", x0.len())));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if let FastDomain::Periodic { period } = fast_domain {
            if !(period > 0.0 && period.is_finite()) {
                return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
            }
        }
        Ok(Self {
            name: name.into(),
            coefficients,
            fast_domain,
            fast_mode: FastMode::Sde,
            x0,
            y0,
            horizon,
            regime,
            nu: 1e-8,
        })
    }

    pub fn with_fast_mode(mut self, mode: FastMode) -> Result<Self> {
        if mode == FastMode::SlowScaled && self.slow_dim() != 1 {
            return Err(Error::InvalidInput("Y = X/delta constraint requires a scalar slow state".into()));
        }
        self.fast_mode = mode;
        Ok(self)
    }

    /// Declared lower bound ν used by the nondegeneracy spot checks.
    pub fn with_nondegeneracy(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn coefficients(&self) -> &dyn Coefficients {
        &*self.coefficients
    }
    pub fn slow_dim(&self) -> usize {
        self.coefficients.slow_dim()
    }
    pub fn noise_dim(&self) -> usize {
        self.coefficients.noise_dim()
    }
    pub fn param_dim(&self) -> usize {
        self.coefficients.param_dim()
    }
    pub fn fast_domain(&self) -> FastDomain {
        self.fast_domain
    }
    pub fn fast_mode(&self) -> FastMode {
        self.fast_mode
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn regime(&self) -> Regime {
        self.regime
    }
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub(crate) fn domain_1d(&self) -> Domain1D {
        match self.fast_domain {
            FastDomain::Periodic { period } => Domain1D::Periodic(period),
            FastDomain::Line => Domain1D::Line,
        }
    }

    /// Generator of the frozen fast process at (θ, x) for this model's regime.
    pub fn fast_generator<'a>(&'a self, theta: &'a [f64], x: &'a [f64]) -> Generator1D<'a> {
        let coeffs = &*self.coefficients;
        let w = coeffs.noise_dim();
        let (drift_scale, g_scale, diff_scale) = match self.regime.kind() {
            RegimeKind::Homogenization => (1.0, 0.0, 0.5),
            RegimeKind::Averaging { gamma } => (gamma, 1.0, 0.5 * gamma),
        };
        let drift = move |y: f64| {
            let mut a = drift_scale * coeffs.f(theta, x, y);
            if g_scale != 0.0 {
                a += coeffs.g(theta, x, y);
            }
            a
        };
        let diffusion = move |y: f64| {
            let mut t1 = [0.0; 8];
            let tau2 = coeffs.tau2(x, y);
            let norm = if w <= t1.len() {
                coeffs.tau1(x, y, &mut t1[..w]);
                t1[..w].iter().map(|v| v * v).sum::<f64>()
            } else {
                let mut buf = vec![0.0; w];
                coeffs.tau1(x, y, &mut buf);
                buf.iter().map(|v| v * v).sum::<f64>()
            };
            diff_scale * (norm + tau2 * tau2)
        };
        Generator1D::new(drift, diffusion, self.domain_1d())
    }
}

/// Compact box Θ = [lower, upper] ⊂ ℝᵏ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidInput("parameter bounds must be non-empty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidInput("parameter box needs finite lower < upper componentwise".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Warn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Worst measured residual for this check (meaning depends on the check).
    pub residual: f64,
    pub detail: String,
}

/// Outcome of [`validate_model`]. Hard failures are returned as errors, so a
/// report only ever contains passes and warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub model: String,
    pub theta: Vec<f64>,
    pub items: Vec<CheckItem>,
}

impl ValidationReport {
    pub fn warnings(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| i.status == CheckStatus::Warn)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

/// Numeric spot checks of the recurrence, centering, periodicity and
/// nondegeneracy conditions at θ.
pub fn validate_model(model: &MultiscaleModel, theta: &[f64], quad: &QuadratureSettings) -> Result<ValidationReport> {
    let coeffs = model.coefficients();
    let m = model.slow_dim();
    let w = model.noise_dim();
    if theta.len() != model.param_dim() {
        return Err(Error::InvalidInput(format!(
            "theta has length {}, model expects {}",
            theta.len(),
            model.param_dim()
        )));
    }
    let x_scale = 1.0 + model.x0().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let x_probes: Vec<Vec<f64>> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|s| model.x0().iter().map(|x| x + s * x_scale).collect())
        .collect();

    let mut finite_worst = 0.0_f64;
    let mut tau2_min = f64::INFINITY;
    let mut diff_min = f64::INFINITY;
    let mut periodic_worst = 0.0_f64;
    let mut recurrence_worst = f64::NEG_INFINITY;
    let mut centering_worst = 0.0_f64;
    let mut constraint_worst = 0.0_f64;

    let mut bv = vec![0.0; m];
    let mut cv = vec![0.0; m];
    let mut sv = vec![0.0; m * w];
    let mut t1 = vec![0.0; w];
    let mut bv2 = vec![0.0; m];
    let mut cv2 = vec![0.0; m];
    let mut sv2 = vec![0.0; m * w];
    let mut t12 = vec![0.0; w];

    for x in &x_probes {
        let gen = model.fast_generator(theta, x);
        let mu = invariant_density(&gen, quad)?;
        let x_abs = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let stride = (mu.nodes().len() / 32).max(1);

        for &y in mu.nodes().iter().step_by(stride) {
            coeffs.b(theta, x, y, &mut bv);
            coeffs.c(theta, x, y, &mut cv);
            coeffs.sigma(x, y, &mut sv);
            coeffs.tau1(x, y, &mut t1);
            let fv = coeffs.f(theta, x, y);
            let gv = coeffs.g(theta, x, y);
            let tau2 = coeffs.tau2(x, y);
            let named: [(&'static str, &[f64]); 7] = [
                ("b", &bv),
                ("c", &cv),
                ("sigma", &sv),
                ("tau1", &t1),
                ("f", core::slice::from_ref(&fv)),
                ("g", core::slice::from_ref(&gv)),
                ("tau2", core::slice::from_ref(&tau2)),
            ];
            for (name, vals) in named {
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::EvaluationFailure { name, x: x[0], y });
                }
                finite_worst = finite_worst.max(vals.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            }
            tau2_min = tau2_min.min(tau2 * tau2);
            diff_min = diff_min.min(0.5 * (t1.iter().map(|v| v * v).sum::<f64>() + tau2 * tau2));

            if let FastDomain::Periodic { period } = model.fast_domain() {
                let y2 = y + period;
                coeffs.b(theta, x, y2, &mut bv2);
                coeffs.c(theta, x, y2, &mut cv2);
                coeffs.sigma(x, y2, &mut sv2);
                coeffs.tau1(x, y2, &mut t12);
                let pairs = [
                    (fv, coeffs.f(theta, x, y2)),
                    (gv, coeffs.g(theta, x, y2)),
                    (tau2, coeffs.tau2(x, y2)),
                ];
                let mut dev = pairs.iter().map(|(a, b)| rel_dev(*a, *b)).fold(0.0_f64, f64::max);
                for (a, b) in bv.iter().zip(&bv2).chain(cv.iter().zip(&cv2)).chain(sv.iter().zip(&sv2)).chain(t1.iter().zip(&t12)) {
                    dev = dev.max(rel_dev(*a, *b));
                }
                periodic_worst = periodic_worst.max(dev);
            }

            if model.fast_mode() == FastMode::SlowScaled {
                let dev = rel_dev(fv, bv[0])
                    .max(rel_dev(gv, cv[0]))
                    .max(rel_dev(t1[0], sv[0]))
                    .max(tau2.abs());
                constraint_worst = constraint_worst.max(dev);
            }
        }

        if model.fast_domain() == FastDomain::Line {
            // drift pointing inward at both truncation ends
            let nodes = mu.nodes();
            let center = mu.mean_of(nodes);
            for &y in [nodes[0], nodes[nodes.len() - 1]].iter() {
                let push = gen.drift(y) * (y - center);
                recurrence_worst = recurrence_worst.max(push);
            }
        }

        if model.regime().is_homogenization() {
            let nodes = mu.nodes().to_vec();
            let mut comp = vec![0.0; nodes.len()];
            for i in 0..m {
                for (j, &y) in nodes.iter().enumerate() {
                    coeffs.b(theta, x, y, &mut bv);
                    comp[j] = bv[i];
                }
                let residual = mu.mean_of(&comp).abs();
                let bound = 1e-6 * (1.0 + x_abs);
                centering_worst = centering_worst.max(residual);
                if residual > bound {
                    return Err(Error::CenteringViolation { x: x[0], residual, bound });
                }
            }
        }
    }

    let mut items = Vec::new();
    items.push(CheckItem {
        name: "finite_coefficients",
        status: CheckStatus::Pass,
        residual: finite_worst,
        detail: "largest coefficient magnitude at probe points".to_string(),
    });
    if model.regime().is_homogenization() {
        items.push(CheckItem {
            name: "centering",
            status: CheckStatus::Pass,
            residual: centering_worst,
            detail: "max |∫ b dμ| over probe x".to_string(),
        });
    }
    let recurrence = match model.fast_domain() {
        FastDomain::Periodic { .. } => CheckItem {
            name: "recurrence",
            status: CheckStatus::Pass,
            residual: 0.0,
            detail: "compact (periodic) fast domain".to_string(),
        },
        FastDomain::Line => CheckItem {
            name: "recurrence",
            status: if recurrence_worst < 0.0 { CheckStatus::Pass } else { CheckStatus::Warn },
            residual: recurrence_worst,
            detail: "heuristic: sign of fast drift·(y − mean) at the truncation boundary".to_string(),
        },
    };
    items.push(recurrence);
    if let FastDomain::Periodic { .. } = model.fast_domain() {
        items.push(CheckItem {
            name: "periodicity",
            status: if periodic_worst <= 1e-10 { CheckStatus::Pass } else { CheckStatus::Warn },
            residual: periodic_worst,
            detail: "max relative |h(y+P) − h(y)|".to_string(),
        });
    }
    items.push(CheckItem {
        name: "tau2_nondegenerate",
        status: if tau2_min >= model.nu() { CheckStatus::Pass } else { CheckStatus::Warn },
        residual: tau2_min,
        detail: format!("min τ₂² against ν = {:e}", model.nu()),
    });
    items.push(CheckItem {
        name: "generator_nondegenerate",
        status: if diff_min >= 0.5 * model.nu() { CheckStatus::Pass } else { CheckStatus::Warn },
        residual: diff_min,
        detail: "min ½(|τ₁|² + τ₂²)".to_string(),
    });
    if model.fast_mode() == FastMode::SlowScaled {
        items.push(CheckItem {
            name: "constraint_consistency",
            status: if constraint_worst <= 1e-12 { CheckStatus::Pass } else { CheckStatus::Warn },
            residual: constraint_worst,
            detail: "Y = X/δ requires f = b, g = c, τ₁ = σ, τ₂ = 0".to_string(),
        });
    }
    Ok(ValidationReport { model: model.name().to_string(), theta: theta.to_vec(), items })
}

fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}
