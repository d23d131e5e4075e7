//! Euler–Maruyama simulation of the slow–fast system and subsampling to
//! discrete observations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::model::{FastMode, MultiscaleModel, ScalePair};

const BLOW_UP: f64 = 1e12;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replicate `i` (0-based): SplitMix64 of `master + (i+1)·golden`.
pub fn replicate_seed(master: u64, i: u64) -> u64 {
    splitmix64(master.wrapping_add((i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Full fine-grid path. `slow` is row-major (N+1) × m.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
    pub m: usize,
    pub seed: u64,
    pub scales: ScalePair,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn slow_at(&self, i: usize) -> &[f64] {
        &self.slow[i * self.m..(i + 1) * self.m]
    }
}

/// x₀ plus n samples at t_k = kΔ. `samples` is row-major n × m.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub x0: Vec<f64>,
    pub samples: Vec<f64>,
    pub n: usize,
    pub horizon: f64,
}

impl ObservationSet {
    pub fn new(x0: Vec<f64>, samples: Vec<f64>, horizon: f64) -> Result<Self> {
        let m = x0.len();
        if m == 0 || samples.is_empty() || !samples.len().is_multiple_of(m) {
            return Err(Error::InvalidInput("observations must hold a whole number of m-vectors".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if x0.iter().chain(&samples).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        let n = samples.len() / m;
        Ok(Self { x0, samples, n, horizon })
    }

    pub fn m(&self) -> usize {
        self.x0.len()
    }

    pub fn delta_t(&self) -> f64 {
        self.horizon / self.n as f64
    }

    /// x_{t_k}, with k = 0 giving x₀.
    pub fn at(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.x0
        } else {
            let m = self.m();
            &self.samples[(k - 1) * m..k * m]
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n {
            self.horizon
        } else {
            k as f64 * self.delta_t()
        }
    }
}

/// Advisory emitted when the step does not resolve the fast time scale δ²/ε.
pub fn step_warnings(model: &MultiscaleModel, scales: ScalePair, steps: usize) -> Vec<String> {
    let dt = model.horizon() / steps as f64;
    let fast = scales.delta * scales.delta / scales.epsilon;
    if dt > 0.1 * fast {
        vec![format!(
            "Euler step {dt:.3e} exceeds 0.1·δ²/ε = {:.3e}; the fast dynamics are under-resolved",
            0.1 * fast
        )]
    } else {
        Vec::new()
    }
}

struct Stepper<'a> {
    model: &'a MultiscaleModel,
    theta: &'a [f64],
    rng: Xoshiro256PlusPlus,
    x: Vec<f64>,
    y: f64,
    dt: f64,
    sqrt_dt: f64,
    eps_over_delta: f64,
    sqrt_eps: f64,
    inv_delta: f64,
    fast_drift_scale: f64,
    b: Vec<f64>,
    c: Vec<f64>,
    sigma: Vec<f64>,
    tau1: Vec<f64>,
    dw: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a MultiscaleModel, theta: &'a [f64], scales: ScalePair, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("at least one Euler step is required".into()));
        }
        if theta.len() != model.param_dim() {
            return Err(Error::InvalidInput(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                model.param_dim()
            )));
        }
        let m = model.slow_dim();
        let w = model.noise_dim();
        let dt = model.horizon() / steps as f64;
        let x = model.x0().to_vec();
        let y = match model.fast_mode() {
            FastMode::Sde => model.y0(),
            FastMode::SlowScaled => x[0] / scales.delta,
        };
        Ok(Self {
            model,
            theta,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            x,
            y,
            dt,
            sqrt_dt: sqrt(dt),
            eps_over_delta: scales.epsilon / scales.delta,
            sqrt_eps: sqrt(scales.epsilon),
            inv_delta: 1.0 / scales.delta,
            fast_drift_scale: scales.epsilon / (scales.delta * scales.delta),
            b: vec![0.0; m],
            c: vec![0.0; m],
            sigma: vec![0.0; m * w],
            tau1: vec![0.0; w],
            dw: vec![0.0; w],
        })
    }

    /// One Euler step; draws w normals for W, then one for B (Sde mode only).
    #[inline]
    fn step(&mut self, time_after: f64) -> Result<()> {
        let coeffs = self.model.coefficients();
        let (theta, x, y) = (self.theta, &self.x[..], self.y);
        let m = self.x.len();
        let w = self.dw.len();
        coeffs.b(theta, x, y, &mut self.b);
        coeffs.c(theta, x, y, &mut self.c);
        coeffs.sigma(x, y, &mut self.sigma);
        for dw in self.dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *dw = self.sqrt_dt * z;
        }
        let mode = self.model.fast_mode();
        let mut new_y = y;
        if mode == FastMode::Sde {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let db = self.sqrt_dt * z;
            coeffs.tau1(x, y, &mut self.tau1);
            let f = coeffs.f(theta, x, y);
            let g = coeffs.g(theta, x, y);
            let t2 = coeffs.tau2(x, y);
            let noise: f64 = self.tau1.iter().zip(&self.dw).map(|(t, d)| t * d).sum::<f64>() + t2 * db;
            new_y = y + (self.fast_drift_scale * f + self.inv_delta * g) * self.dt + self.sqrt_eps * self.inv_delta * noise;
        }
        for i in 0..m {
            let mut noise = 0.0;
            for l in 0..w {
                noise += self.sigma[i * w + l] * self.dw[l];
            }
            self.x[i] += (self.eps_over_delta * self.b[i] + self.c[i]) * self.dt + self.sqrt_eps * noise;
        }
        if mode == FastMode::SlowScaled {
            new_y = self.x[0] * self.inv_delta;
        }
        self.y = new_y;
        let bad_x = self.x.iter().any(|v| !(v.abs() <= BLOW_UP));
        let bad_y = mode == FastMode::Sde && !(new_y.abs() <= BLOW_UP);
        if bad_x || bad_y {
            return Err(Error::BlowUp { time: time_after });
        }
        Ok(())
    }
}

/// Simulate the full fine-grid path with N = `steps` Euler steps.
pub fn simulate_path(
    model: &MultiscaleModel,
    theta: &[f64],
    scales: ScalePair,
    seed: u64,
    steps: usize,
) -> Result<Trajectory> {
    let mut st = Stepper::new(model, theta, scales, steps, seed)?;
    let m = model.slow_dim();
    let mut times = Vec::with_capacity(steps + 1);
    let mut slow = Vec::with_capacity((steps + 1) * m);
    let mut fast = Vec::with_capacity(steps + 1);
    times.push(0.0);
    slow.extend_from_slice(&st.x);
    fast.push(st.y);
    for i in 1..=steps {
        let t = if i == steps { model.horizon() } else { i as f64 * st.dt };
        st.step(t)?;
        times.push(t);
        slow.extend_from_slice(&st.x);
        fast.push(st.y);
    }
    Ok(Trajectory { times, slow, fast, m, seed, scales })
}

pub fn subsample(traj: &Trajectory, n: usize) -> Result<ObservationSet> {
    let steps = traj.steps();
    if n == 0 || !steps.is_multiple_of(n) {
        return Err(Error::DivisibilityError { steps, n });
    }
    let stride = steps / n;
    let m = traj.m;
    let mut samples = Vec::with_capacity(n * m);
    for k in 1..=n {
        samples.extend_from_slice(traj.slow_at(k * stride));
    }
    ObservationSet::new(traj.slow_at(0).to_vec(), samples, traj.times[steps])
}

/// Same stream as [`simulate_path`] followed by [`subsample`], without
/// storing the fine path.
pub fn simulate_observations(
    model: &MultiscaleModel,
    theta: &[f64],
    scales: ScalePair,
    seed: u64,
    steps: usize,
    n: usize,
) -> Result<ObservationSet> {
    if n == 0 || !steps.is_multiple_of(n) {
        return Err(Error::DivisibilityError { steps, n });
    }
    let mut st = Stepper::new(model, theta, scales, steps, seed)?;
    let stride = steps / n;
    let mut samples = Vec::with_capacity(n * model.slow_dim());
    for i in 1..=steps {
        let t = if i == steps { model.horizon() } else { i as f64 * st.dt };
        st.step(t)?;
        if i % stride == 0 {
            samples.extend_from_slice(&st.x);
        }
    }
    ObservationSet::new(model.x0().to_vec(), samples, model.horizon())
}
