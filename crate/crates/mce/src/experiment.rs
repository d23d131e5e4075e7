//! Monte Carlo runner: simulate R replicates, estimate, aggregate.

use rayon::prelude::*;
use serde::Serialize;

use mce_core::contrast::{estimate, Contrast, EstimationResult};
use mce_core::optimize::OptimizerSettings;
use mce_core::sim::{replicate_seed, simulate_observations, step_warnings};
use mce_core::variance::{limit_variance, mce_variance, smce_variance, theoretical_sd, LimitKind, DEFAULT_LIMIT_NODES};

use crate::config::{Estimator, ExperimentConfig, Resolved, TheoryKind};
use crate::error::{AppError, AppResult};

/// Allowed share of failed replicates per estimator.
pub const MAX_FAILURE_RATE: f64 = 0.05;

pub const Z68: f64 = 1.0;
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub contrast: f64,
    pub converged: bool,
    pub boundary_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub replicate: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
    pub density: f64,
    pub overlay_density: f64,
}

/// Histogram of the first component; values outside the range land in the
/// edge bins so counts always sum to the number of successes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub overlay_center: f64,
    pub overlay_scale: f64,
    pub bins: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub mean: Vec<f64>,
    pub empirical_sd: Vec<f64>,
    pub ci68: Vec<Interval>,
    pub ci95: Vec<Interval>,
    pub theoretical_sd: Option<Vec<f64>>,
    pub theory_error: Option<String>,
    pub boundary_hits: usize,
    pub histogram: Option<Histogram>,
    pub replicates: Vec<ReplicateRecord>,
    pub failed: Vec<FailureRecord>,
}

impl EstimatorSummary {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / (self.successes + self.failures) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub model: String,
    pub delta: f64,
    pub ell: f64,
    pub warnings: Vec<String>,
    /// How the histogram overlay is drawn.
    pub overlay_note: String,
    pub estimators: Vec<EstimatorSummary>,
    pub valid: bool,
}

impl ExperimentReport {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }

    /// `TooManyFailures` for the first estimator above the cap.
    pub fn check(&self) -> AppResult<()> {
        for s in &self.estimators {
            if s.failure_rate() > MAX_FAILURE_RATE {
                return Err(AppError::TooManyFailures {
                    estimator: s.estimator.label().into(),
                    failures: s.failures,
                    replicates: s.successes + s.failures,
                });
            }
        }
        Ok(())
    }
}

/// Sample mean and SD (n − 1 denominator; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn normal_pdf(x: f64, center: f64, scale: f64) -> f64 {
    let z = (x - center) / scale;
    (-0.5 * z * z).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn histogram(values: &[f64], bins: usize, mean: f64, scale: f64, overlay_center: f64) -> Histogram {
    let lo = mean - 4.0 * scale;
    let width = 8.0 * scale / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = ((v - lo) / width).floor();
        let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
        counts[i] += 1;
    }
    let total = values.len().max(1) as f64;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let left = lo + i as f64 * width;
            let right = left + width;
            HistogramBin {
                bin_left: left,
                bin_right: right,
                count,
                density: count as f64 / (total * width),
                overlay_density: normal_pdf(0.5 * (left + right), overlay_center, scale),
            }
        })
        .collect();
    Histogram { overlay_center, overlay_scale: scale, bins }
}

type Outcome = Result<Vec<Result<EstimationResult, String>>, String>;

fn run_replicate(cfg: &ExperimentConfig, r: &Resolved, seed: u64) -> Outcome {
    let obs = simulate_observations(&r.model, &cfg.theta0, r.scales, seed, cfg.euler_steps, cfg.n_obs)
        .map_err(|e| e.to_string())?;
    let settings = OptimizerSettings::default();
    Ok(cfg
        .estimators
        .iter()
        .map(|e| {
            let c = match e {
                Estimator::Mce => Contrast::mce(&obs, &r.averaged, cfg.eps),
                Estimator::Smce => Contrast::smce(&obs, &r.averaged),
            }
            .with_refinement(cfg.refinement);
            estimate(&c, &r.space, &settings).map_err(|e| e.to_string())
        })
        .collect())
}

fn theory_for(cfg: &ExperimentConfig, r: &Resolved, e: Estimator) -> Result<Vec<f64>, String> {
    let x0 = r.model.x0();
    let t = r.model.horizon();
    let var = match (cfg.theory, e) {
        (TheoryKind::Limit, Estimator::Mce) => limit_variance(&r.averaged, &cfg.theta0, x0, t, LimitKind::Mce, DEFAULT_LIMIT_NODES),
        (TheoryKind::Limit, Estimator::Smce) => limit_variance(&r.averaged, &cfg.theta0, x0, t, LimitKind::Smce, DEFAULT_LIMIT_NODES),
        (TheoryKind::FiniteN, Estimator::Mce) => mce_variance(&r.averaged, &cfg.theta0, x0, cfg.n_obs, t, cfg.refinement),
        (TheoryKind::FiniteN, Estimator::Smce) => smce_variance(&r.averaged, &cfg.theta0, x0, cfg.n_obs, t, cfg.refinement),
    };
    var.and_then(|v| theoretical_sd(&v, cfg.eps)).map_err(|e| e.to_string())
}

/// Resolves the config and runs it. The returned report may be invalid
/// (see [`ExperimentReport::check`]); errors are reserved for bad configs.
pub fn run_experiment(cfg: &ExperimentConfig) -> AppResult<ExperimentReport> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    run_resolved(cfg, &resolved)
}

pub fn run_resolved(cfg: &ExperimentConfig, r: &Resolved) -> AppResult<ExperimentReport> {
    let mut warnings = cfg.warnings(r.model.horizon());
    warnings.extend(r.scales.advisories(&r.model.regime()));
    warnings.extend(step_warnings(&r.model, r.scales, cfg.euler_steps));

    let seeds: Vec<u64> = (0..cfg.replicates).map(|i| replicate_seed(cfg.master_seed, i as u64)).collect();
    let work = || -> Vec<Outcome> { seeds.par_iter().map(|&s| run_replicate(cfg, r, s)).collect() };
    let outcomes = if cfg.threads == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| AppError::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?
            .install(work)
    };

    let k = cfg.theta0.len();
    let mut estimators = Vec::with_capacity(cfg.estimators.len());
    for (j, &est) in cfg.estimators.iter().enumerate() {
        let mut records = Vec::new();
        let mut failed = Vec::new();
        for (i, out) in outcomes.iter().enumerate() {
            let seed = seeds[i];
            match out.as_ref().map(|v| &v[j]) {
                Ok(Ok(res)) => records.push(ReplicateRecord {
                    replicate: i,
                    seed,
                    theta_hat: res.theta_hat.clone(),
                    contrast: res.contrast_at_min,
                    converged: res.converged,
                    boundary_hit: res.boundary_hit,
                }),
                Ok(Err(e)) | Err(e) => failed.push(FailureRecord { replicate: i, seed, error: e.clone() }),
            }
        }
        let (mut mean, mut sd) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for c in 0..k {
            let vals: Vec<f64> = records.iter().map(|rec| rec.theta_hat[c]).collect();
            let (m, s) = mean_sd(&vals);
            mean.push(m);
            sd.push(s);
        }
        let ci = |z: f64| -> Vec<Interval> {
            mean.iter().zip(&sd).map(|(m, s)| Interval { lower: m - z * s, upper: m + z * s }).collect()
        };
        let (ci68, ci95) = (ci(Z68), ci(Z95));
        let (theoretical, theory_error) = match theory_for(cfg, r, est) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e)),
        };
        let histogram = (!records.is_empty()).then(|| {
            let vals: Vec<f64> = records.iter().map(|rec| rec.theta_hat[0]).collect();
            let scale = theoretical
                .as_ref()
                .map(|t| t[0])
                .filter(|s| *s > 0.0)
                .or(Some(sd[0]).filter(|s| *s > 0.0))
                .unwrap_or(1.0);
            histogram(&vals, cfg.histogram_bins, mean[0], scale, cfg.theta0[0])
        });
        estimators.push(EstimatorSummary {
            estimator: est,
            successes: records.len(),
            failures: failed.len(),
            mean,
            empirical_sd: sd,
            ci68,
            ci95,
            theoretical_sd: theoretical,
            theory_error,
            boundary_hits: records.iter().filter(|rec| rec.boundary_hit).count(),
            histogram,
            replicates: records,
            failed,
        });
    }
    let valid = estimators.iter().all(|s| s.failure_rate() <= MAX_FAILURE_RATE);
    Ok(ExperimentReport {
        config: cfg.clone(),
        model: r.model.name().to_string(),
        delta: r.scales.delta,
        ell: cfg.ell(),
        warnings,
        overlay_note: "normal density centred at theta0 with scale = theoretical SD".into(),
        estimators,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn single_value_has_zero_sd() {
        assert_eq!(mean_sd(&[1.5]), (1.5, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_counts_and_overlay_mass() {
        let vals: Vec<f64> = (0..500).map(|i| 1.0 + 0.1 * ((i as f64 * 0.37).sin())).collect();
        let mut with_outlier = vals.clone();
        with_outlier.push(50.0);
        let h = histogram(&with_outlier, 30, 1.0, 0.1, 1.0);
        assert_eq!(h.bins.len(), 30);
        assert_eq!(h.bins.iter().map(|b| b.count).sum::<usize>(), with_outlier.len());
        // trapezoid over bin centres
        let c: Vec<(f64, f64)> = h.bins.iter().map(|b| (0.5 * (b.bin_left + b.bin_right), b.overlay_density)).collect();
        let mass: f64 = c.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
        assert!((mass - 1.0).abs() < 0.01, "{mass}");
    }

    #[test]
    fn tiny_run_is_deterministic_and_thread_independent() {
        let mut cfg = preset("table3").unwrap();
        cfg.eps = 1e-2;
        cfg.euler_steps = 20_000;
        cfg.replicates = 6;
        cfg.refinement = 16;
        cfg.estimators = vec![Estimator::Mce, Estimator::Smce];
        cfg.threads = 1;
        let a = run_experiment(&cfg).unwrap();
        cfg.threads = 3;
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.estimators, b.estimators);
        let s = a.summary(Estimator::Smce).unwrap();
        assert_eq!(s.successes + s.failures, 6);
        for (ci, (m, sd)) in s.ci95.iter().zip(s.mean.iter().zip(&s.empirical_sd)) {
            assert!(((ci.upper - m) / sd - 1.96).abs() < 1e-12);
        }
        let t = |e| a.summary(e).unwrap().theoretical_sd.clone().unwrap()[0];
        assert!(t(Estimator::Smce) >= t(Estimator::Mce) - 1e-12);
    }

    #[test]
    fn single_replicate_degenerates() {
        let mut cfg = preset("table4").unwrap();
        cfg.eps = 1e-2;
        cfg.euler_steps = 20_000;
        cfg.replicates = 1;
        cfg.refinement = 16;
        let rep = run_experiment(&cfg).unwrap();
        let s = &rep.estimators[0];
        assert_eq!(s.successes, 1);
        assert_eq!(s.empirical_sd, vec![0.0]);
        assert_eq!(s.ci68[0].lower, s.ci68[0].upper);
    }
}
