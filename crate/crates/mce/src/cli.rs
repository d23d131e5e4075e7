//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mce_core::contrast::{estimate, Contrast};
use mce_core::fast_avg::QuadratureSettings;
use mce_core::model::{validate_model, CheckStatus, ParameterSpace, ScalePair};
use mce_core::optimize::OptimizerSettings;
use mce_core::registry::{EXAMPLE1, EXAMPLE2};
use mce_core::sim::{simulate_observations, simulate_path, step_warnings, subsample};
use mce_core::variance::{
    limit_variance, mce_variance, psd_gap, smce_variance, theoretical_sd, LimitKind, DEFAULT_LIMIT_NODES,
};

use crate::config::{
    preset, resolve_model, resolve_output_dir, CustomModelSpec, DeltaRule, Estimator, ExperimentConfig, ModelSpec,
};
use crate::error::{AppError, AppResult};
use crate::experiment::run_experiment;
use crate::report::{emit_report, read_observations, to_json, write_observations, write_trajectory, Format, ALL_FORMATS};

#[derive(Debug, Parser)]
#[command(name = "mce", version, about = "Minimum contrast estimation for small-noise multiscale diffusions")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one path and write its observations.
    Simulate(SimulateArgs),
    /// Estimate θ from an observation file with both estimators.
    Estimate(EstimateArgs),
    /// Asymptotic covariances and theoretical SDs.
    Variance(VarianceArgs),
    /// Run a Monte Carlo experiment from a config file or preset.
    Experiment(ExperimentArgs),
    /// Spot-check the structural conditions of a model.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Registry model (`example1`, `example2` or the full name).
    #[arg(long, default_value = "example2-ou")]
    model: String,
    /// TOML file holding a custom model table; overrides --model.
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// ℓ constant of the regime (default 1, i.e. δ = ε^{3/2}).
    #[arg(long, default_value_t = 1.0)]
    ell: f64,
    /// Average by quadrature even when a closed form exists.
    #[arg(long)]
    quadrature: bool,
    /// Parameter box lower bounds (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lower: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    upper: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1", allow_hyphen_values = true)]
    theta: Vec<f64>,
    #[arg(long)]
    eps: f64,
    /// δ = ε^p.
    #[arg(long, default_value_t = 1.5)]
    delta_power: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "1e6", value_parser = parse_count)]
    steps: usize,
    #[arg(long, default_value = "10", value_parser = parse_count)]
    n_obs: usize,
    /// Observation CSV (default: <output dir>/observations.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full fine path (t, x, y).
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Observation CSV (`t,x` with the t = 0 row first).
    #[arg(long)]
    obs: PathBuf,
    /// Noise level; required for the MCE, ignored by the SMCE.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "MCE,SMCE")]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 64)]
    refinement: usize,
    /// Write the JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Shorthand for --model.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1", allow_hyphen_values = true)]
    theta: Vec<f64>,
    #[arg(long)]
    eps: f64,
    /// Also report the finite-n covariances.
    #[arg(long, value_parser = parse_count)]
    n: Option<usize>,
    #[arg(long, default_value_t = 64)]
    refinement: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_parser = parse_count)]
    n_obs: Option<usize>,
    #[arg(long, value_parser = parse_count)]
    euler_steps: Option<usize>,
    #[arg(long, value_parser = parse_count)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Subset of json,csv,hist.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,hist")]
    formats: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Take the model from an experiment config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1", allow_hyphen_values = true)]
    theta: Vec<f64>,
}

fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(v) = s.parse::<usize>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= 1e15 => Ok(v as usize),
        _ => Err(format!("`{s}` is not a non-negative integer")),
    }
}

fn registry_name(s: &str) -> AppResult<String> {
    match s {
        "example1" | EXAMPLE1 => Ok(EXAMPLE1.into()),
        "example2" | EXAMPLE2 => Ok(EXAMPLE2.into()),
        other => Err(AppError::Config(format!("unknown model `{other}` (known: example1, example2)"))),
    }
}

fn parse_estimators(names: &[String]) -> AppResult<Vec<Estimator>> {
    let mut out = Vec::new();
    for n in names {
        let e = match n.to_ascii_uppercase().as_str() {
            "MCE" => Estimator::Mce,
            "SMCE" => Estimator::Smce,
            other => return Err(AppError::Config(format!("unknown estimator `{other}`"))),
        };
        if !out.contains(&e) {
            out.push(e);
        }
    }
    Ok(out)
}

fn parse_formats(names: &[String]) -> AppResult<Vec<Format>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "hist" => Ok(Format::Hist),
            other => Err(AppError::Config(format!("unknown format `{other}`"))),
        })
        .collect()
}

impl ModelArgs {
    fn spec(&self, name_override: Option<&str>) -> AppResult<ModelSpec> {
        if let Some(path) = &self.model_file {
            let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
            let spec: CustomModelSpec = toml::from_str(&text).map_err(|e| AppError::Config(e.to_string()))?;
            return Ok(ModelSpec::Custom(spec));
        }
        Ok(ModelSpec::Registry(registry_name(name_override.unwrap_or(&self.model))?))
    }

    fn space(&self) -> AppResult<Option<ParameterSpace>> {
        match (&self.lower, &self.upper) {
            (Some(l), Some(u)) => Ok(Some(ParameterSpace::new(l.clone(), u.clone())?)),
            (None, None) => Ok(None),
            _ => Err(AppError::Config("give both --lower and --upper".into())),
        }
    }

    fn resolve(
        &self,
        name_override: Option<&str>,
    ) -> AppResult<(mce_core::model::MultiscaleModel, mce_core::fast_avg::AveragedModel, ParameterSpace)> {
        if !(self.ell > 0.0) {
            return Err(AppError::Config(format!("ell must be positive, got {}", self.ell)));
        }
        resolve_model(&self.spec(name_override)?, self.ell, !self.quadrature, self.space()?)
    }
}

fn check_theta(theta: &[f64], k: usize) -> AppResult<()> {
    if theta.len() != k {
        return Err(AppError::Config(format!("model has {k} parameter(s), --theta has {}", theta.len())));
    }
    Ok(())
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> AppResult<()> {
    let (model, _, _) = a.model.resolve(None)?;
    check_theta(&a.theta, model.param_dim())?;
    let rule = DeltaRule { power: a.delta_power, scale: 1.0 };
    let scales = ScalePair::new(a.eps, rule.delta(a.eps))?;
    for w in step_warnings(&model, scales, a.steps) {
        eprintln!("warning: {w}");
    }
    let obs = match &a.dump {
        Some(path) => {
            let traj = simulate_path(&model, &a.theta, scales, a.seed, a.steps)?;
            write_trajectory(path, &traj)?;
            subsample(&traj, a.n_obs)?
        }
        None => simulate_observations(&model, &a.theta, scales, a.seed, a.steps, a.n_obs)?,
    };
    let path = a.out.clone().unwrap_or_else(|| resolve_output_dir(None).join("observations.csv"));
    write_observations(&path, &obs)?;
    let last = obs.at(obs.n);
    writeln!(out, "model {} theta {:?} eps {} delta {:e} steps {} seed {}", model.name(), a.theta, a.eps, scales.delta, a.steps, a.seed)
        .ok();
    writeln!(out, "wrote {} observations to {} (x_T = {:?})", obs.n, path.display(), last).ok();
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    model: String,
    observations: usize,
    horizon: f64,
    eps: Option<f64>,
    results: Vec<EstimateEntry>,
}

#[derive(Serialize)]
struct EstimateEntry {
    estimator: Estimator,
    theta_hat: Option<Vec<f64>>,
    contrast: Option<f64>,
    converged: Option<bool>,
    boundary_hit: Option<bool>,
    error: Option<String>,
}

fn estimate_cmd(a: &EstimateArgs, out: &mut dyn Write) -> AppResult<()> {
    let (model, avg, space) = a.model.resolve(None)?;
    let obs = read_observations(&a.obs)?;
    if obs.m() != model.slow_dim() {
        return Err(AppError::Config(format!("observations have {} columns, model expects {}", obs.m(), model.slow_dim())));
    }
    if let Some(e) = a.eps {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(AppError::Config(format!("eps must be finite and >= 0, got {e}")));
        }
    }
    let estimators = parse_estimators(&a.estimators)?;
    let settings = OptimizerSettings::default();
    let mut results = Vec::new();
    let mut numeric_failure = None;
    for e in estimators {
        let contrast = match (e, a.eps) {
            (Estimator::Mce, Some(eps)) => Contrast::mce(&obs, &avg, eps),
            (Estimator::Mce, None) => {
                results.push(EstimateEntry {
                    estimator: e,
                    theta_hat: None,
                    contrast: None,
                    converged: None,
                    boundary_hit: None,
                    error: Some("skipped: the MCE needs --eps".into()),
                });
                continue;
            }
            (Estimator::Smce, _) => Contrast::smce(&obs, &avg),
        }
        .with_refinement(a.refinement);
        match estimate(&contrast, &space, &settings) {
            Ok(r) => results.push(EstimateEntry {
                estimator: e,
                theta_hat: Some(r.theta_hat),
                contrast: Some(r.contrast_at_min),
                converged: Some(r.converged),
                boundary_hit: Some(r.boundary_hit),
                error: None,
            }),
            Err(err) => {
                results.push(EstimateEntry {
                    estimator: e,
                    theta_hat: None,
                    contrast: None,
                    converged: None,
                    boundary_hit: None,
                    error: Some(err.to_string()),
                });
                numeric_failure.get_or_insert(err);
            }
        }
    }
    let report = EstimateOutput { model: model.name().into(), observations: obs.n, horizon: obs.horizon, eps: a.eps, results };
    let text = to_json(&report);
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(|e| AppError::io(p, e))?;
    }
    out.write_all(text.as_bytes()).ok();
    match numeric_failure {
        Some(e) => Err(AppError::Numerical(e)),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct VarianceOutput {
    model: String,
    theta: Vec<f64>,
    eps: f64,
    mce_limit: Vec<f64>,
    smce_limit: Vec<f64>,
    sd_mce_limit: Vec<f64>,
    sd_smce_limit: Vec<f64>,
    n: Option<usize>,
    mce_finite: Option<Vec<f64>>,
    smce_finite: Option<Vec<f64>>,
    psd_gap_min_eigenvalue: Option<f64>,
}

fn variance_cmd(a: &VarianceArgs, out: &mut dyn Write) -> AppResult<()> {
    let (model, avg, _) = a.model.resolve(a.preset.as_deref())?;
    check_theta(&a.theta, model.param_dim())?;
    let (x0, t) = (model.x0(), model.horizon());
    let m_lim = limit_variance(&avg, &a.theta, x0, t, LimitKind::Mce, DEFAULT_LIMIT_NODES)?;
    let s_lim = limit_variance(&avg, &a.theta, x0, t, LimitKind::Smce, DEFAULT_LIMIT_NODES)?;
    let sd_m = theoretical_sd(&m_lim, a.eps)?;
    let sd_s = theoretical_sd(&s_lim, a.eps)?;
    let mut res = VarianceOutput {
        model: model.name().into(),
        theta: a.theta.clone(),
        eps: a.eps,
        mce_limit: m_lim.matrix.as_slice().to_vec(),
        smce_limit: s_lim.matrix.as_slice().to_vec(),
        sd_mce_limit: sd_m.clone(),
        sd_smce_limit: sd_s.clone(),
        n: a.n,
        mce_finite: None,
        smce_finite: None,
        psd_gap_min_eigenvalue: None,
    };
    if let Some(n) = a.n {
        let m = mce_variance(&avg, &a.theta, x0, n, t, a.refinement)?;
        let s = smce_variance(&avg, &a.theta, x0, n, t, a.refinement)?;
        res.psd_gap_min_eigenvalue = Some(psd_gap(&s.matrix, &m.matrix).min_eigenvalue);
        res.mce_finite = Some(m.matrix.into_vec());
        res.smce_finite = Some(s.matrix.into_vec());
    }
    if a.json {
        out.write_all(to_json(&res).as_bytes()).ok();
        return Ok(());
    }
    let fmt4 = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    let full = |v: &[f64]| v.iter().map(|x| format!("{x:.17}")).collect::<Vec<_>>().join(", ");
    writeln!(out, "model: {}  theta: {:?}  eps: {}", res.model, res.theta, res.eps).ok();
    writeln!(out, "MCE limit covariance:   [{}]", full(&res.mce_limit)).ok();
    writeln!(out, "SMCE limit covariance:  [{}]", full(&res.smce_limit)).ok();
    writeln!(out, "theoretical SD (MCE):   {}   ({})", fmt4(&sd_m), full(&sd_m)).ok();
    writeln!(out, "theoretical SD (SMCE):  {}   ({})", fmt4(&sd_s), full(&sd_s)).ok();
    if let (Some(n), Some(m), Some(s), Some(g)) = (res.n, &res.mce_finite, &res.smce_finite, res.psd_gap_min_eigenvalue) {
        writeln!(out, "n = {n}: M = [{}]  M~ = [{}]  min eig(M~ - M) = {g:e}", full(m), full(s)).ok();
    }
    Ok(())
}

fn experiment_cmd(a: &ExperimentArgs, out: &mut dyn Write) -> AppResult<()> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(p), _) => ExperimentConfig::from_file(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(AppError::Config("give --config FILE or --preset NAME".into())),
    };
    if let Some(v) = a.eps {
        cfg.eps = v;
    }
    if let Some(v) = a.n_obs {
        cfg.n_obs = v;
    }
    if let Some(v) = a.euler_steps {
        cfg.euler_steps = v;
    }
    if let Some(v) = a.replicates {
        cfg.replicates = v;
    }
    if let Some(v) = a.seed {
        cfg.master_seed = v;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    if let Some(v) = &a.estimators {
        cfg.estimators = parse_estimators(v)?;
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = Some(v.clone());
    }
    cfg.validate()?;
    let formats = parse_formats(&a.formats)?;
    if a.dry_run {
        out.write_all(cfg.to_toml_string().as_bytes()).ok();
        return Ok(());
    }
    let start = Instant::now();
    let report = run_experiment(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let dir = cfg.output_dir();
    let written = emit_report(&report, &dir, if formats.is_empty() { &ALL_FORMATS } else { &formats })?;
    writeln!(
        out,
        "{} eps={} n={} N={} R={} ({:.1}s)",
        report.model,
        cfg.eps,
        cfg.n_obs,
        cfg.euler_steps,
        cfg.replicates,
        start.elapsed().as_secs_f64()
    )
    .ok();
    writeln!(out, "estimator    mean     68% CI               95% CI               theoretical SD  failures").ok();
    for s in &report.estimators {
        let theory = s.theoretical_sd.as_ref().map(|t| format!("{:.4}", t[0])).unwrap_or_else(|| "n/a".into());
        writeln!(
            out,
            "{:<10} {:>8.4}  ({:.4}, {:.4})  ({:.4}, {:.4})  {:>14}  {}/{}",
            s.estimator.label(),
            s.mean[0],
            s.ci68[0].lower,
            s.ci68[0].upper,
            s.ci95[0].lower,
            s.ci95[0].upper,
            theory,
            s.failures,
            s.failures + s.successes
        )
        .ok();
    }
    for p in written {
        writeln!(out, "wrote {}", p.display()).ok();
    }
    report.check()
}

fn validate_cmd(a: &ValidateArgs, out: &mut dyn Write) -> AppResult<()> {
    let model = match &a.config {
        Some(p) => {
            let cfg = ExperimentConfig::from_file(p)?;
            let space = cfg
                .theta_box
                .as_ref()
                .map(|b| ParameterSpace::new(b.lower.clone(), b.upper.clone()))
                .transpose()?;
            resolve_model(&cfg.model, cfg.ell(), cfg.closed_form, space).map_err(to_validation)?.0
        }
        None => a.model.resolve(None).map_err(to_validation)?.0,
    };
    check_theta(&a.theta, model.param_dim())?;
    let report = validate_model(&model, &a.theta, &QuadratureSettings::default()).map_err(AppError::Validation)?;
    writeln!(out, "model {} at theta {:?}", report.model, report.theta).ok();
    for item in &report.items {
        let status = match item.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Warn => "WARN",
        };
        writeln!(out, "  {status:<4} {:<24} {:>12.3e}  {}", item.name, item.residual, item.detail).ok();
    }
    Ok(())
}

fn to_validation(e: AppError) -> AppError {
    match e {
        AppError::Numerical(inner) => AppError::Validation(inner),
        other => other,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, out),
        Command::Estimate(a) => estimate_cmd(a, out),
        Command::Variance(a) => variance_cmd(a, out),
        Command::Experiment(a) => experiment_cmd(a, out),
        Command::Validate(a) => validate_cmd(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("mce").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("250"), Ok(250));
        assert!(parse_count("1.5").is_err());
    }

    #[test]
    fn variance_prints_published_value() {
        let (code, text) = run_str(&["variance", "--preset", "example2", "--theta", "1", "--eps", "1e-2"]);
        assert_eq!(code, 0);
        assert!(text.contains("theoretical SD (MCE):   0.1079"), "{text}");
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert_eq!(run_str(&["experiment", "--preset", "table9"]).0, 1);
        assert_eq!(run_str(&["variance", "--preset", "example3", "--eps", "1e-2"]).0, 1);
        assert_eq!(run_str(&["frobnicate"]).0, 1);
    }
}
