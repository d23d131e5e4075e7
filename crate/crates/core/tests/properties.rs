use mce_core::contrast::{contrast_mce, contrast_smce};
use mce_core::fast_avg::{AveragedModel, QuadratureSettings};
use mce_core::flow::{build_flow, propagator, FlowRequest};
use mce_core::linalg::{min_eigenvalue, Mat};
use mce_core::registry::{lookup, NAMES};
use mce_core::sim::ObservationSet;
use mce_core::variance::{mce_variance, psd_gap, sandwich, smce_variance, theoretical_sd, AsymptoticVariance, VarianceKind};
use proptest::prelude::*;
use std::sync::OnceLock;

fn registry() -> &'static Vec<AveragedModel> {
    static R: OnceLock<Vec<AveragedModel>> = OnceLock::new();
    R.get_or_init(|| {
        NAMES
            .iter()
            .map(|n| lookup(n, 1.0, true, &QuadratureSettings::default()).unwrap().averaged)
            .collect()
    })
}

const N: usize = 20;
const R: usize = 8;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn propagator_semigroup(which in 0usize..2, a in 0usize..=N * R, b in 0usize..=N * R, c in 0usize..=N * R) {
        let avg = &registry()[which];
        let flow = build_flow(avg, &[1.0], &[1.0], 1.0, N, FlowRequest::path_only(R)).unwrap();
        let mut idx = [a, b, c];
        idx.sort();
        let t = |i: usize| flow.times()[i];
        let z_ts = propagator(avg, &flow, t(idx[0]), t(idx[2])).unwrap();
        let z_tr = propagator(avg, &flow, t(idx[1]), t(idx[2])).unwrap();
        let z_rs = propagator(avg, &flow, t(idx[0]), t(idx[1])).unwrap();
        let prod = z_tr.matmul(&z_rs);
        let scale = 1.0 + z_ts.max_abs();
        prop_assert!(z_ts.sub(&prod).max_abs() < 1e-8 * scale);
    }

    #[test]
    fn contrasts_are_nonnegative(
        which in 0usize..2,
        theta in 0.2f64..2.5,
        noise in proptest::collection::vec(-0.5f64..0.5, 10),
        eps in 0.0f64..0.1,
    ) {
        let avg = &registry()[which];
        let flow = build_flow(avg, &[1.0], &[1.0], 1.0, 10, FlowRequest::path_only(8)).unwrap();
        let samples: Vec<f64> = (1..=10).map(|k| flow.xbar_obs(k)[0] + noise[k - 1]).collect();
        let obs = ObservationSet::new(vec![1.0], samples, 1.0).unwrap();
        prop_assert!(contrast_smce(&obs, &[theta], avg, 8).unwrap().value >= 0.0);
        prop_assert!(contrast_mce(&obs, eps, &[theta], avg, 8).unwrap().value >= 0.0);
    }

    #[test]
    fn sandwich_dominates_weighted(
        pairs in proptest::collection::vec((-2.0f64..2.0, 1e-3f64..5.0), 1..40),
    ) {
        prop_assume!(pairs.iter().any(|(d, _)| d.abs() > 1e-3));
        let d: Vec<Mat> = pairs.iter().map(|(v, _)| Mat::scalar(*v)).collect();
        let q: Vec<Mat> = pairs.iter().map(|(_, v)| Mat::scalar(*v)).collect();
        let info: f64 = pairs.iter().map(|(d, q)| d * d / q).sum();
        let m = Mat::scalar(1.0 / info);
        let mt = sandwich(&d, &q).unwrap();
        prop_assert!(psd_gap(&mt, &m).pass);
    }

    #[test]
    fn sd_scales_with_root_epsilon(m in 1e-3f64..1e3, eps in 1e-6f64..1.0) {
        let v = AsymptoticVariance { kind: VarianceKind::MceLimit, matrix: Mat::scalar(m), n: None, theta: vec![1.0] };
        let a = theoretical_sd(&v, eps).unwrap()[0];
        let b = theoretical_sd(&v, eps / 10.0).unwrap()[0];
        prop_assert!((a / b - 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sensitivity_matches_finite_differences(which in 0usize..2, theta in 0.3f64..2.0) {
        let avg = &registry()[which];
        let flow = build_flow(avg, &[theta], &[1.0], 1.0, 10, FlowRequest::full(32)).unwrap();
        let h = 1e-5 * (1.0 + theta);
        let up = build_flow(avg, &[theta + h], &[1.0], 1.0, 10, FlowRequest::path_only(32)).unwrap();
        let dn = build_flow(avg, &[theta - h], &[1.0], 1.0, 10, FlowRequest::path_only(32)).unwrap();
        for k in 1..=10 {
            let fd = (up.xbar_obs(k)[0] - dn.xbar_obs(k)[0]) / (2.0 * h);
            let s = flow.sensitivity_obs(k).unwrap()[0];
            prop_assert!((s - fd).abs() <= 1e-5 * s.abs().max(1e-3), "k = {} s = {} fd = {}", k, s, fd);
        }
    }
}

#[test]
fn weights_are_uniformly_positive() {
    for avg in registry() {
        for n in [1, 10, 100] {
            let flow = build_flow(avg, &[1.0], &[1.0], 1.0, n, FlowRequest::full(16)).unwrap();
            let dt = 1.0 / n as f64;
            // q̄ is constant on both models, Z ≥ e^{−|∇ₓλ̄|Δ}
            let q = avg.q_bar(&[1.0], &[1.0]).unwrap().get(0, 0);
            let gx = avg.grad_x_lambda_bar(&[1.0], &[1.0]).unwrap().get(0, 0).abs();
            let c = 0.99 * q * (-2.0 * gx * dt).exp();
            for k in 1..=n {
                let qk = Mat::from_row_major(1, 1, flow.weight(k).unwrap().to_vec());
                assert!(min_eigenvalue(&qk) >= c * dt, "n = {n}, k = {k}");
            }
        }
    }
}

#[test]
fn weights_converge_under_refinement() {
    for avg in registry() {
        let coarse = build_flow(avg, &[1.0], &[1.0], 1.0, 10, FlowRequest::full(32)).unwrap();
        let fine = build_flow(avg, &[1.0], &[1.0], 1.0, 10, FlowRequest::full(64)).unwrap();
        for k in 1..=10 {
            let (a, b) = (coarse.weight(k).unwrap()[0], fine.weight(k).unwrap()[0]);
            assert!((a - b).abs() < 1e-8, "k = {k}: {a} vs {b}");
        }
    }
}

#[test]
fn smce_variance_dominates_on_registry_models() {
    for avg in registry() {
        for n in [1, 10, 100] {
            let m = mce_variance(avg, &[1.0], &[1.0], n, 1.0, 16).unwrap();
            let mt = smce_variance(avg, &[1.0], &[1.0], n, 1.0, 16).unwrap();
            let gap = psd_gap(&mt.matrix, &m.matrix);
            assert!(gap.pass, "n = {n}: {}", gap.min_eigenvalue);
            assert_eq!(m.matrix, m.matrix.transpose());
        }
    }
}
