//! Box-constrained derivative-free minimisation: scan + golden section in
//! one dimension, multi-start Nelder–Mead with projection otherwise.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::model::ParameterSpace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    /// Absolute θ tolerance (scalar) or simplex size tolerance (vector).
    pub tolerance: f64,
    pub max_evaluations: usize,
    /// Equispaced points of the coarse scan in one dimension.
    pub scan_points: usize,
    /// Lattice points per axis for the multi-start in several dimensions.
    pub lattice_per_axis: usize,
    pub max_starts: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_evaluations: 2000, scan_points: 33, lattice_per_axis: 3, max_starts: 27 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub theta: Vec<f64>,
    pub value: f64,
    /// Every evaluation in order, failed ones recorded as +∞.
    pub trace: Vec<(Vec<f64>, f64)>,
    pub converged: bool,
    pub boundary_hit: bool,
}

struct Memo<'a> {
    f: &'a dyn Fn(&[f64]) -> Result<f64>,
    seen: BTreeMap<Vec<u64>, f64>,
    trace: Vec<(Vec<f64>, f64)>,
    first_error: Option<Error>,
}

impl<'a> Memo<'a> {
    fn call(&mut self, theta: &[f64]) -> f64 {
        let key: Vec<u64> = theta.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = self.seen.get(&key) {
            return *v;
        }
        let v = match (self.f)(theta) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                if self.first_error.is_none() {
                    self.first_error = Some(e);
                }
                f64::INFINITY
            }
        };
        self.seen.insert(key, v);
        self.trace.push((theta.to_vec(), v));
        v
    }

    fn evaluations(&self) -> usize {
        self.trace.len()
    }
}

/// Minimise `f` over the box. Evaluation errors count as +∞; the function
/// must be finite at the box centre.
pub fn minimize(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    space: &ParameterSpace,
    settings: &OptimizerSettings,
) -> Result<Minimum> {
    if !(settings.tolerance > 0.0) || settings.max_evaluations < 4 {
        return Err(Error::InvalidInput("optimizer needs a positive tolerance and at least 4 evaluations".into()));
    }
    let center = space.center();
    f(&center)?;
    let mut memo = Memo { f, seen: BTreeMap::new(), trace: Vec::new(), first_error: None };
    let converged = if space.dim() == 1 {
        golden(&mut memo, space, settings)?
    } else {
        nelder_mead_multistart(&mut memo, space, settings)?
    };
    // lowest value wins; ties go to the point nearest the box centre
    let dist = |t: &[f64]| -> f64 { t.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum() };
    let (theta, value) = memo
        .trace
        .iter()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(dist(&a.0).total_cmp(&dist(&b.0))))
        .map(|(t, v)| (t.clone(), *v))
        .ok_or(Error::NoDescent)?;
    let boundary_hit = (0..space.dim()).any(|i| {
        let tol = 1e-6 * space.width(i);
        theta[i] - space.lower()[i] <= tol || space.upper()[i] - theta[i] <= tol
    });
    Ok(Minimum { theta, value, trace: memo.trace, converged, boundary_hit })
}

fn flat(values: &[f64]) -> bool {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return true;
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 1e-12 * (1.0 + lo.abs())
}

fn golden(memo: &mut Memo<'_>, space: &ParameterSpace, settings: &OptimizerSettings) -> Result<bool> {
    let (lo, hi) = (space.lower()[0], space.upper()[0]);
    let pts = settings.scan_points.max(3);
    let step = (hi - lo) / (pts - 1) as f64;
    let grid: Vec<f64> = (0..pts).map(|i| if i == pts - 1 { hi } else { lo + i as f64 * step }).collect();
    let vals: Vec<f64> = grid.iter().map(|t| memo.call(&[*t])).collect();
    if flat(&vals) {
        return Err(memo.first_error.take().filter(|_| vals.iter().all(|v| v.is_infinite())).unwrap_or(Error::NoDescent));
    }
    let best = (0..pts).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(pts - 1)];
    let inv_phi = (sqrt(5.0) - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = memo.call(&[c]);
    let mut fd = memo.call(&[d]);
    while b - a > settings.tolerance {
        if memo.evaluations() >= settings.max_evaluations {
            return Ok(false);
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = memo.call(&[c]);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = memo.call(&[d]);
        }
    }
    memo.call(&[0.5 * (a + b)]);
    Ok(true)
}

fn lattice_starts(space: &ParameterSpace, settings: &OptimizerSettings) -> Vec<Vec<f64>> {
    let k = space.dim();
    let per = settings.lattice_per_axis.max(1);
    let total = per.checked_pow(k as u32).unwrap_or(usize::MAX).min(100_000);
    let center = space.center();
    let mut starts: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            (0..k)
                .map(|i| {
                    let j = idx % per;
                    idx /= per;
                    let frac = (2 * j + 1) as f64 / (2 * per) as f64;
                    space.lower()[i] + frac * space.width(i)
                })
                .collect()
        })
        .collect();
    let dist = |p: &Vec<f64>| -> f64 {
        p.iter()
            .zip(&center)
            .enumerate()
            .map(|(i, (a, c))| ((a - c) / space.width(i)) * ((a - c) / space.width(i)))
            .sum()
    };
    // centre first, then by distance, index order breaking ties
    starts.sort_by(|a, b| dist(a).total_cmp(&dist(b)));
    starts.truncate(settings.max_starts.max(1));
    starts
}

fn nelder_mead_multistart(memo: &mut Memo<'_>, space: &ParameterSpace, settings: &OptimizerSettings) -> Result<bool> {
    let starts = lattice_starts(space, settings);
    let budget = (settings.max_evaluations / starts.len()).max(2 * space.dim() + 4);
    let mut any_improved = false;
    let mut all_converged = true;
    for start in &starts {
        let (improved, converged) = nelder_mead(memo, space, start, budget, settings.tolerance);
        any_improved |= improved;
        all_converged &= converged;
    }
    if !any_improved {
        return Err(Error::NoDescent);
    }
    Ok(all_converged)
}

/// Returns (improved on the start value, converged).
fn nelder_mead(memo: &mut Memo<'_>, space: &ParameterSpace, start: &[f64], budget: usize, tol: f64) -> (bool, bool) {
    let k = space.dim();
    let used_before = memo.evaluations();
    let project = |p: &mut Vec<f64>| space.clamp(p);
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..k {
        let mut p = start.to_vec();
        let step = 0.1 * space.width(i);
        p[i] = if p[i] + step <= space.upper()[i] { p[i] + step } else { p[i] - step };
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| memo.call(p)).collect();
    let initial = values[0];
    let spent = |memo: &Memo<'_>| memo.evaluations() - used_before;
    let mut converged = false;
    loop {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let size = simplex[1..]
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&simplex[0])
                    .enumerate()
                    .map(|(i, (a, b))| (a - b).abs() / space.width(i))
                    .fold(0.0_f64, f64::max)
            })
            .fold(0.0_f64, f64::max);
        let spread = values[k] - values[0];
        if size <= tol || (spread.abs() <= 1e-15 * (1.0 + values[0].abs()) && size <= 1e3 * tol) {
            converged = true;
            break;
        }
        if spent(memo) >= budget {
            break;
        }

        let mut centroid = vec![0.0; k];
        for p in &simplex[..k] {
            for i in 0..k {
                centroid[i] += p[i] / k as f64;
            }
        }
        let along = |c: f64, worst: &[f64]| -> Vec<f64> {
            let mut p: Vec<f64> = (0..k).map(|i| centroid[i] + c * (centroid[i] - worst[i])).collect();
            project(&mut p);
            p
        };
        let worst = simplex[k].clone();
        let xr = along(1.0, &worst);
        let fr = memo.call(&xr);
        if fr < values[0] {
            let xe = along(2.0, &worst);
            let fe = memo.call(&xe);
            if fe < fr {
                simplex[k] = xe;
                values[k] = fe;
            } else {
                simplex[k] = xr;
                values[k] = fr;
            }
        } else if fr < values[k - 1] {
            simplex[k] = xr;
            values[k] = fr;
        } else {
            let (xc, fc) = if fr < values[k] {
                let p = along(0.5, &worst);
                let v = memo.call(&p);
                (p, v)
            } else {
                let p = along(-0.5, &worst);
                let v = memo.call(&p);
                (p, v)
            };
            if fc < values[k].min(fr) {
                simplex[k] = xc;
                values[k] = fc;
            } else {
                for j in 1..=k {
                    let mut p: Vec<f64> = (0..k).map(|i| simplex[0][i] + 0.5 * (simplex[j][i] - simplex[0][i])).collect();
                    project(&mut p);
                    values[j] = memo.call(&p);
                    simplex[j] = p;
                }
            }
        }
    }
    let improved = values.iter().any(|v| *v < initial);
    (improved, converged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic() {
        let space = ParameterSpace::new(vec![0.0], vec![2.0]).unwrap();
        let f = |t: &[f64]| -> Result<f64> { Ok((t[0] - 0.7) * (t[0] - 0.7)) };
        let m = minimize(&f, &space, &OptimizerSettings::default()).unwrap();
        assert!((m.theta[0] - 0.7).abs() < 1e-6);
        assert!(m.converged && !m.boundary_hit);
        assert!(m.trace.iter().all(|(_, v)| *v >= m.value));
    }

    #[test]
    fn boundary_minimum_is_flagged() {
        let space = ParameterSpace::new(vec![0.0], vec![2.0]).unwrap();
        let f = |t: &[f64]| -> Result<f64> { Ok(t[0]) };
        let m = minimize(&f, &space, &OptimizerSettings::default()).unwrap();
        assert_eq!(m.theta[0], 0.0);
        assert!(m.boundary_hit);
    }

    #[test]
    fn constant_contrast_is_no_descent() {
        let space = ParameterSpace::new(vec![0.0], vec![2.0]).unwrap();
        let f = |_: &[f64]| -> Result<f64> { Ok(3.0) };
        assert_eq!(minimize(&f, &space, &OptimizerSettings::default()), Err(Error::NoDescent));
        let space2 = ParameterSpace::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(minimize(&f, &space2, &OptimizerSettings::default()), Err(Error::NoDescent));
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let space = ParameterSpace::new(vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
        let f = |t: &[f64]| -> Result<f64> {
            Ok((1.0 - t[0]) * (1.0 - t[0]) + 100.0 * (t[1] - t[0] * t[0]) * (t[1] - t[0] * t[0]))
        };
        let settings = OptimizerSettings { max_evaluations: 20_000, tolerance: 1e-9, ..Default::default() };
        let m = minimize(&f, &space, &settings).unwrap();
        assert!((m.theta[0] - 1.0).abs() < 1e-4 && (m.theta[1] - 1.0).abs() < 1e-4, "{:?}", m.theta);
    }

    #[test]
    fn failing_region_counts_as_infinite() {
        let space = ParameterSpace::new(vec![0.0], vec![2.0]).unwrap();
        let f = |t: &[f64]| -> Result<f64> {
            if t[0] < 0.5 {
                Err(Error::NonFinite { time: 0.0 })
            } else {
                Ok((t[0] - 1.3) * (t[0] - 1.3))
            }
        };
        let m = minimize(&f, &space, &OptimizerSettings::default()).unwrap();
        assert!((m.theta[0] - 1.3).abs() < 1e-6);
        assert!(m.trace.iter().any(|(_, v)| v.is_infinite()));
    }

    #[test]
    fn repeated_runs_agree() {
        let space = ParameterSpace::new(vec![-1.0, -1.0, -1.0], vec![1.0, 1.0, 1.0]).unwrap();
        let f = |t: &[f64]| -> Result<f64> { Ok(t.iter().enumerate().map(|(i, v)| (v - 0.1 * i as f64).powi(2)).sum()) };
        let a = minimize(&f, &space, &OptimizerSettings::default()).unwrap();
        let b = minimize(&f, &space, &OptimizerSettings::default()).unwrap();
        assert_eq!(a, b);
        assert!((a.theta[2] - 0.2).abs() < 1e-4);
    }
}
