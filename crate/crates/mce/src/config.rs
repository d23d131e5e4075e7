//! Experiment configuration (TOML), presets and resolution into core objects.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mce_core::contrast::EstimatorKind;
use mce_core::fast_avg::{build_averaged_model, AveragedModel, QuadratureSettings};
use mce_core::model::{FastDomain, FastMode, MultiscaleModel, ParameterSpace, Regime, ScalarCoefficients, ScalePair};
use mce_core::registry::{self, EXAMPLE1, EXAMPLE2};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::expr::Expr;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MCE_OUTPUT_DIR";

pub const PRESETS: [&str; 6] = ["table1", "table2", "table3", "table4", "table5", "table6"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "UPPERCASE")]
pub enum Estimator {
    Mce,
    Smce,
}

impl From<Estimator> for EstimatorKind {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Mce => EstimatorKind::Mce,
            Estimator::Smce => EstimatorKind::Smce,
        }
    }
}

impl Estimator {
    pub fn label(self) -> &'static str {
        EstimatorKind::from(self).label()
    }
}

/// δ = scale · ε^power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaRule {
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn default_power() -> f64 {
    1.5
}

fn one() -> f64 {
    1.0
}

impl Default for DeltaRule {
    fn default() -> Self {
        Self { power: 1.5, scale: 1.0 }
    }
}

impl DeltaRule {
    pub fn delta(&self, eps: f64) -> f64 {
        self.scale * eps.powf(self.power)
    }

    /// lim ε^{3/2}/δ for the homogenization regime.
    pub fn ell(&self) -> f64 {
        if self.power > 1.5 {
            f64::INFINITY
        } else {
            1.0 / self.scale
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DomainSpec {
    #[default]
    Line,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FastModeSpec {
    #[default]
    Sde,
    SlowScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeSpec {
    #[default]
    Homogenization,
    Averaging,
}

/// Scalar slow–fast model with coefficients given as expressions in
/// `theta`, `x`, `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModelSpec {
    #[serde(default = "custom_name")]
    pub name: String,
    #[serde(default)]
    pub domain: DomainSpec,
    pub period: Option<f64>,
    #[serde(default)]
    pub fast_mode: FastModeSpec,
    #[serde(default)]
    pub regime: RegimeSpec,
    pub gamma: Option<f64>,
    pub x0: f64,
    #[serde(default)]
    pub y0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    pub b: String,
    #[serde(default = "zero_expr")]
    pub c: String,
    #[serde(default = "one_expr")]
    pub sigma: String,
    pub f: String,
    #[serde(default = "zero_expr")]
    pub g: String,
    #[serde(default = "zero_expr")]
    pub tau1: String,
    #[serde(default = "one_expr")]
    pub tau2: String,
}

fn custom_name() -> String {
    "custom".into()
}

fn zero_expr() -> String {
    "0".into()
}

fn one_expr() -> String {
    "1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Registry(String),
    Custom(CustomModelSpec),
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Registry(n) => n,
            ModelSpec::Custom(c) => &c.name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryKind {
    /// n → ∞ limit (what the published tables report).
    #[default]
    Limit,
    FiniteN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub theta0: Vec<f64>,
    pub theta_box: Option<BoxSpec>,
    pub eps: f64,
    #[serde(default)]
    pub delta_rule: DeltaRule,
    /// Overrides the ℓ implied by `delta_rule`.
    pub ell: Option<f64>,
    pub n_obs: usize,
    pub euler_steps: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub estimators: Vec<Estimator>,
    pub output_dir: Option<PathBuf>,
    /// RK4 sub-steps per observation interval.
    #[serde(default = "default_refinement")]
    pub refinement: usize,
    #[serde(default)]
    pub theory: TheoryKind,
    /// Use closed-form averages for registry models.
    #[serde(default = "yes")]
    pub closed_form: bool,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_refinement() -> usize {
    64
}

fn default_bins() -> usize {
    30
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> AppResult<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive and finite, got {}", self.eps));
        }
        if !(self.delta_rule.power > 0.0 && self.delta_rule.scale > 0.0) {
            return bad("delta_rule needs positive power and scale".into());
        }
        if self.n_obs == 0 {
            return bad("n_obs must be at least 1".into());
        }
        if self.euler_steps == 0 || !self.euler_steps.is_multiple_of(self.n_obs) {
            return bad(format!("euler_steps = {} is not a multiple of n_obs = {}", self.euler_steps, self.n_obs));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        if self.refinement == 0 {
            return bad("refinement must be at least 1".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be at least 1".into());
        }
        if let Some(ell) = self.ell {
            if !(ell > 0.0) {
                return bad(format!("ell must be positive (or inf), got {ell}"));
            }
        }
        if self.theta0.is_empty() || self.theta0.iter().any(|t| !t.is_finite()) {
            return bad("theta0 must be a non-empty vector of finite numbers".into());
        }
        if let ModelSpec::Registry(name) = &self.model {
            if !registry::NAMES.contains(&name.as_str()) {
                return bad(format!("unknown model `{name}` (known: {})", registry::NAMES.join(", ")));
            }
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.delta_rule.delta(self.eps)
    }

    pub fn ell(&self) -> f64 {
        self.ell.unwrap_or_else(|| self.delta_rule.ell())
    }

    /// Config value, else `$MCE_OUTPUT_DIR`, else `mce-output`.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output_dir(self.output_dir.as_deref())
    }

    /// Advisories that do not stop a run.
    pub fn warnings(&self, horizon: f64) -> Vec<String> {
        let mut w = Vec::new();
        if self.eps * self.n_obs as f64 > horizon {
            w.push(format!(
                "eps * n = {} exceeds T = {horizon}: high-frequency setting outside the eps = o(Delta) assumption",
                self.eps * self.n_obs as f64
            ));
        }
        if self.delta_rule.power < 1.5 && self.ell.is_none() {
            w.push(format!(
                "delta = eps^{} decays slower than eps^1.5; using ell = {} from the scale factor",
                self.delta_rule.power,
                self.delta_rule.ell()
            ));
        }
        w
    }
}

pub fn resolve_output_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("mce-output"),
    }
}

/// Desk-scale versions of the published tables.
pub fn preset(name: &str) -> AppResult<ExperimentConfig> {
    let base = |model: &str, estimators: Vec<Estimator>| ExperimentConfig {
        model: ModelSpec::Registry(model.into()),
        theta0: vec![1.0],
        theta_box: None,
        eps: 1e-3,
        delta_rule: DeltaRule::default(),
        ell: None,
        n_obs: 10,
        euler_steps: 1_000_000,
        replicates: 200,
        master_seed: 20_240_601,
        estimators,
        output_dir: None,
        refinement: 64,
        theory: TheoryKind::Limit,
        closed_form: true,
        threads: 0,
        histogram_bins: 30,
    };
    let high_frequency = |mut c: ExperimentConfig| {
        c.eps = 1e-2;
        c.n_obs = 10_000;
        c.refinement = 4;
        c
    };
    let cfg = match name {
        "table1" => base(EXAMPLE1, vec![Estimator::Mce]),
        "table2" => base(EXAMPLE1, vec![Estimator::Smce]),
        "table3" => base(EXAMPLE2, vec![Estimator::Smce]),
        "table4" => base(EXAMPLE2, vec![Estimator::Mce]),
        "table5" => high_frequency(base(EXAMPLE1, vec![Estimator::Mce, Estimator::Smce])),
        "table6" => high_frequency(base(EXAMPLE2, vec![Estimator::Mce, Estimator::Smce])),
        other => return Err(AppError::Config(format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
    };
    Ok(cfg)
}

/// Everything a run needs, built once.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: MultiscaleModel,
    pub averaged: AveragedModel,
    pub space: ParameterSpace,
    pub scales: ScalePair,
}

/// Builds model, averaged model and box. Custom models have no default box,
/// so `space` is required for them.
pub fn resolve_model(
    spec: &ModelSpec,
    ell: f64,
    closed_form: bool,
    space: Option<ParameterSpace>,
) -> AppResult<(MultiscaleModel, AveragedModel, ParameterSpace)> {
    let quad = QuadratureSettings::default();
    match spec {
        ModelSpec::Registry(name) => {
            let reg = registry::lookup(name, ell, closed_form, &quad)?;
            Ok((reg.model, reg.averaged, space.unwrap_or(reg.space)))
        }
        ModelSpec::Custom(c) => {
            let space = space.ok_or_else(|| AppError::Config("custom models need an explicit theta_box".into()))?;
            let model = build_custom(c, ell)?;
            if space.dim() != model.param_dim() {
                return Err(AppError::Config(format!("custom models take one parameter, theta_box has {}", space.dim())));
            }
            let averaged = build_averaged_model(&model, &space, &quad).map_err(AppError::Validation)?;
            Ok((model, averaged, space))
        }
    }
}

impl ExperimentConfig {
    pub fn resolve(&self) -> AppResult<Resolved> {
        let space = match &self.theta_box {
            Some(b) => Some(ParameterSpace::new(b.lower.clone(), b.upper.clone())?),
            None => None,
        };
        let (model, averaged, space) = resolve_model(&self.model, self.ell(), self.closed_form, space)?;
        if self.theta0.len() != model.param_dim() || space.dim() != model.param_dim() {
            return Err(AppError::Config(format!(
                "model has {} parameter(s); theta0 has {} and theta_box {}",
                model.param_dim(),
                self.theta0.len(),
                space.dim()
            )));
        }
        if !space.contains(&self.theta0) {
            return Err(AppError::Config("theta0 lies outside theta_box".into()));
        }
        let scales = ScalePair::new(self.eps, self.delta())?;
        Ok(Resolved { model, averaged, space, scales })
    }
}

fn parse_field(name: &str, src: &str) -> AppResult<Expr> {
    Expr::parse(src).map_err(|e| AppError::Config(format!("coefficient `{name}`: {e}")))
}

pub fn build_custom(spec: &CustomModelSpec, ell: f64) -> AppResult<MultiscaleModel> {
    let fields = [
        ("b", &spec.b),
        ("c", &spec.c),
        ("sigma", &spec.sigma),
        ("f", &spec.f),
        ("g", &spec.g),
        ("tau1", &spec.tau1),
        ("tau2", &spec.tau2),
    ];
    let mut parsed = Vec::with_capacity(7);
    for (name, src) in fields {
        let e = parse_field(name, src)?;
        if matches!(name, "sigma" | "tau1" | "tau2") && e.uses_theta() {
            return Err(AppError::Config(format!("coefficient `{name}` must not depend on theta")));
        }
        parsed.push(Arc::new(e));
    }
    let wrap = |e: &Arc<Expr>| {
        let e = Arc::clone(e);
        Box::new(move |t: f64, x: f64, y: f64| e.eval(t, x, y)) as Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>
    };
    let coeffs = ScalarCoefficients {
        b: wrap(&parsed[0]),
        c: wrap(&parsed[1]),
        sigma: wrap(&parsed[2]),
        f: wrap(&parsed[3]),
        g: wrap(&parsed[4]),
        tau1: wrap(&parsed[5]),
        tau2: wrap(&parsed[6]),
    };
    let domain = match spec.domain {
        DomainSpec::Line => FastDomain::Line,
        DomainSpec::Periodic => FastDomain::Periodic { period: spec.period.unwrap_or(2.0 * PI) },
    };
    let regime = match spec.regime {
        RegimeSpec::Homogenization => Regime::homogenization(ell)?,
        RegimeSpec::Averaging => {
            let gamma = spec.gamma.ok_or_else(|| AppError::Config("averaging regime needs `gamma`".into()))?;
            Regime::averaging(gamma, ell)?
        }
    };
    let model = MultiscaleModel::new(spec.name.clone(), Arc::new(coeffs), domain, vec![spec.x0], spec.y0, spec.horizon, regime)?;
    let mode = match spec.fast_mode {
        FastModeSpec::Sde => FastMode::Sde,
        FastModeSpec::SlowScaled => FastMode::SlowScaled,
    };
    Ok(model.with_fast_mode(mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
model = "example2-ou"
theta0 = [1.0]
eps = 1e-3
n_obs = 10
euler_steps = 1000000
replicates = 200
master_seed = 7
estimators = ["SMCE", "MCE"]
"#;

    #[test]
    fn parses_and_defaults() {
        let c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(c.delta_rule, DeltaRule { power: 1.5, scale: 1.0 });
        assert!((c.delta() - 1e-3f64.powf(1.5)).abs() < 1e-18);
        assert_eq!(c.ell(), 1.0);
        assert_eq!(c.refinement, 64);
        assert_eq!(c.theory, TheoryKind::Limit);
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            SAMPLE.replace("euler_steps = 1000000", "euler_steps = 1000001"),
            SAMPLE.replace("replicates = 200", "replicates = 0"),
            SAMPLE.replace("example2-ou", "example9"),
            SAMPLE.replace("eps = 1e-3", "eps = -1.0"),
            SAMPLE.replace("[\"SMCE\", \"MCE\"]", "[]"),
            format!("{SAMPLE}\nunknown_key = 3\n"),
        ];
        for c in cases {
            assert!(matches!(ExperimentConfig::from_toml_str(&c), Err(AppError::Config(_))), "{c}");
        }
    }

    #[test]
    fn high_frequency_warning() {
        let mut c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert!(c.warnings(1.0).is_empty());
        c.eps = 1e-2;
        c.n_obs = 10_000;
        assert_eq!(c.warnings(1.0).len(), 1);
    }

    #[test]
    fn presets_are_valid() {
        for p in PRESETS {
            let c = preset(p).unwrap();
            c.validate().unwrap();
            let hf = c.eps * c.n_obs as f64 > 1.0;
            assert_eq!(hf, p == "table5" || p == "table6", "{p}");
        }
        assert!(matches!(preset("table7"), Err(AppError::Config(_))));
    }

    #[test]
    fn custom_model_parses() {
        let text = r#"
theta0 = [1.0]
theta_box = { lower = [0.1], upper = [3.0] }
eps = 1e-2
n_obs = 10
euler_steps = 10000
replicates = 2
master_seed = 1
estimators = ["SMCE"]

[model]
name = "ou-copy"
x0 = 1.0
y0 = 1.0
b = "theta*y"
c = "theta*x*y^2"
f = "-y/theta"
g = "0"
tau1 = "0"
tau2 = "1"
"#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        let r = c.resolve().unwrap();
        let lam = r.averaged.lambda_bar(&[1.0], &[1.0]).unwrap()[0];
        assert!((lam - 0.5).abs() < 1e-8, "{lam}");
        let bad = text.replace("tau2 = \"1\"", "tau2 = \"theta\"");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad).unwrap().resolve(), Err(AppError::Config(_))));
    }
}
