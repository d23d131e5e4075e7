use std::f64::consts::PI;

use mce_core::fast_avg::{invariant_density, solve_cell_problem, QuadratureSettings};
use mce_core::model::ScalePair;
use mce_core::registry::{example1_constants, example1_model, example2_model, lookup, EXAMPLE1, EXAMPLE2};
use mce_core::sim::{replicate_seed, simulate_observations};
use mce_core::variance::{limit_variance, mce_variance, theoretical_sd, LimitKind, DEFAULT_LIMIT_NODES};

/// Tridiagonal solve; `a` sub-, `b` main, `c` super-diagonal.
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

/// Periodic finite differences for (sin − cos)χ' + ½χ'' = −(sin − cos),
/// pinned at χ(0) = 0. Returns χ' on the uniform grid.
fn periodic_fd_corrector(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 * PI / n as f64;
    let y: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let drift = |y: f64| y.sin() - y.cos();
    let m = n - 1;
    let (mut lo, mut di, mut up, mut rhs) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for j in 0..m {
        let yi = y[j + 1];
        lo[j] = 0.5 / (h * h) - drift(yi) / (2.0 * h);
        di[j] = -1.0 / (h * h);
        up[j] = 0.5 / (h * h) + drift(yi) / (2.0 * h);
        rhs[j] = -drift(yi);
    }
    let inner = thomas(&lo, &di, &up, &rhs);
    let mut chi = vec![0.0; n];
    chi[1..].copy_from_slice(&inner);
    let d = (0..n).map(|i| (chi[(i + 1) % n] - chi[(i + n - 1) % n]) / (2.0 * h)).collect();
    (y, d)
}

#[test]
fn example1_corrector_matches_finite_differences() {
    let model = example1_model(1.0).unwrap();
    let quad = QuadratureSettings::default();
    let gen = model.fast_generator(&[1.0], &[1.0]);
    let mu = invariant_density(&gen, &quad).unwrap();
    let rhs: Vec<f64> = mu.nodes().iter().map(|y| y.sin() - y.cos()).collect();
    let sol = solve_cell_problem(&mu, &rhs).unwrap();
    assert!(sol.residual <= 1e-6);

    let n = 8192;
    let (ys, dfd) = periodic_fd_corrector(n);
    let h = ys[1];
    // μ-weighted q̄ = ∫ (1 + χ')² dμ by the periodic trapezoid rule
    let w: Vec<f64> = ys.iter().map(|y| (-2.0 * (y.sin() + y.cos())).exp()).collect();
    let z: f64 = w.iter().sum::<f64>() * h;
    let q_fd: f64 = w.iter().zip(&dfd).map(|(w, d)| w * (1.0 + d) * (1.0 + d)).sum::<f64>() * h / z;
    let consts = example1_constants(&quad).unwrap();
    assert!((q_fd - consts.q).abs() < 1e-5, "{q_fd} vs {}", consts.q);

    for (yv, d) in mu.nodes().iter().zip(&sol.derivative) {
        let pos = yv.rem_euclid(2.0 * PI) / h;
        let i = pos.floor() as usize % n;
        let t = pos - pos.floor();
        let interp = (1.0 - t) * dfd[i] + t * dfd[(i + 1) % n];
        assert!((d - interp).abs() < 1e-4, "y = {yv}: {d} vs {interp}");
    }
}

#[test]
fn ou_corrector_is_recovered() {
    let model = example2_model(1.0).unwrap();
    let quad = QuadratureSettings::default();
    for theta in [0.5, 1.0, 1.7] {
        let th = [theta];
        let gen = model.fast_generator(&th, &[1.0]);
        let mu = invariant_density(&gen, &quad).unwrap();
        let rhs: Vec<f64> = mu.nodes().iter().map(|y| theta * y).collect();
        let sol = solve_cell_problem(&mu, &rhs).unwrap();
        assert!(sol.residual <= 1e-6);
        for d in &sol.derivative {
            assert!((d - theta * theta).abs() < 1e-6);
        }
    }
}

#[test]
fn example2_quadrature_pipeline_matches_closed_limit() {
    let quad = QuadratureSettings::default();
    let reg = lookup(EXAMPLE2, 1.0, false, &quad).unwrap();
    let v = limit_variance(&reg.averaged, &[1.0], &[1.0], 1.0, LimitKind::Mce, DEFAULT_LIMIT_NODES).unwrap();
    let exact = 2.0 / (1f64.exp() - 1.0);
    assert!((v.matrix.get(0, 0) - exact).abs() < 1e-6 * exact);
    let finite = mce_variance(&reg.averaged, &[1.0], &[1.0], 1000, 1.0, 4).unwrap();
    assert!((finite.matrix.get(0, 0) - exact).abs() < 0.02 * exact);
}

#[test]
fn example1_theoretical_sd() {
    let reg = lookup(EXAMPLE1, 1.0, true, &QuadratureSettings::default()).unwrap();
    let v = limit_variance(&reg.averaged, &[1.0], &[1.0], 1.0, LimitKind::Mce, DEFAULT_LIMIT_NODES).unwrap();
    let sd = theoretical_sd(&v, 1e-2).unwrap()[0];
    assert!((sd - 0.4370).abs() < 0.01 * 0.4370, "{sd}");
    let sd = theoretical_sd(&v, 1e-3).unwrap()[0];
    assert!((sd - 0.1382).abs() < 0.01 * 0.1382, "{sd}");
}

#[test]
fn limit_variance_is_stable_under_node_doubling() {
    let reg = lookup(EXAMPLE1, 1.0, true, &QuadratureSettings::default()).unwrap();
    let a = limit_variance(&reg.averaged, &[1.0], &[1.0], 1.0, LimitKind::Smce, 1024).unwrap();
    let b = limit_variance(&reg.averaged, &[1.0], &[1.0], 1.0, LimitKind::Smce, 2048).unwrap();
    assert!((a.matrix.get(0, 0) - b.matrix.get(0, 0)).abs() < 1e-6 * b.matrix.get(0, 0));
}

#[test]
fn replicate_terminal_values_are_uncorrelated() {
    let model = example2_model(1.0).unwrap();
    let scales = ScalePair::new(1e-2, 0.1).unwrap();
    let xs: Vec<f64> = (0..200)
        .map(|i| simulate_observations(&model, &[1.0], scales, replicate_seed(11, i), 2000, 1).unwrap().samples[0])
        .collect();
    // lag-one correlation between consecutive replicates
    let (a, b) = (&xs[..199], &xs[1..]);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    let rho = cov / (va * vb).sqrt();
    assert!(rho.abs() < 0.1, "rho = {rho}");
}

#[test]
fn default_boxes_contain_the_true_value() {
    for name in [EXAMPLE1, EXAMPLE2] {
        let reg = lookup(name, 1.0, true, &QuadratureSettings::default()).unwrap();
        assert!(reg.space.contains(&reg.theta0));
    }
}
