use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mce_core::fast_avg::QuadratureSettings;
use mce_core::flow::{build_flow, FlowRequest};
use mce_core::registry::{lookup, EXAMPLE1, EXAMPLE2};
use mce_core::sim::ObservationSet;
use serde_json::Value;

fn mce(args: &[&str], env_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mce"));
    cmd.args(args);
    match env_dir {
        Some(d) => cmd.env("MCE_OUTPUT_DIR", d),
        None => cmd.env_remove("MCE_OUTPUT_DIR"),
    };
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn noiseless_file(dir: &Path, name: &str) -> std::path::PathBuf {
    let reg = lookup(name, 1.0, true, &QuadratureSettings::default()).unwrap();
    let flow = build_flow(&reg.averaged, &[1.0], &[1.0], 1.0, 10, FlowRequest::path_only(64)).unwrap();
    let obs = ObservationSet::new(vec![1.0], (1..=10).map(|k| flow.xbar_obs(k)[0]).collect(), 1.0).unwrap();
    let p = dir.join(format!("{name}.csv"));
    mce::report::write_observations(&p, &obs).unwrap();
    p
}

#[test]
fn estimate_recovers_theta_from_noiseless_data() {
    let dir = tempfile::tempdir().unwrap();
    for (name, short) in [(EXAMPLE1, "example1"), (EXAMPLE2, "example2")] {
        let p = noiseless_file(dir.path(), name);
        let o = mce(&["estimate", "--model", short, "--obs", p.to_str().unwrap(), "--eps", "0"], None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        for r in v["results"].as_array().unwrap() {
            let t = r["theta_hat"][0].as_f64().unwrap();
            assert!((t - 1.0).abs() < 1e-5, "{name} {}: {t}", r["estimator"]);
        }
    }
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    let dump = dir.path().join("path.csv");
    let o = mce(
        &[
            "simulate", "--model", "example2", "--eps", "1e-2", "--seed", "3", "--steps", "1e5", "--n-obs", "10",
            "--out", obs.to_str().unwrap(), "--dump", dump.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&obs).unwrap().lines().count(), 12);
    assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 100_002);
    let o = mce(&["estimate", "--model", "example2", "--obs", obs.to_str().unwrap(), "--estimators", "SMCE"], None);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let t = v["results"][0]["theta_hat"][0].as_f64().unwrap();
    assert!((0.5..1.5).contains(&t), "{t}");
}

#[test]
fn simulate_defaults_to_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = mce(&["simulate", "--eps", "1e-2", "--steps", "1e4"], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("observations.csv").exists());
}

const SMALL: &str = r#"
model = "example2-ou"
theta0 = [1.0]
eps = 1e-2
n_obs = 10
euler_steps = 20000
replicates = 8
master_seed = 99
estimators = ["MCE", "SMCE"]
refinement = 16
"#;

#[test]
fn experiment_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, SMALL).unwrap();
    let mut reports = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run);
        let o = mce(
            &["experiment", "--config", cfg.to_str().unwrap(), "--threads", threads, "--output-dir", out.to_str().unwrap()],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(out.join("replicates.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "replicate,seed,estimator,theta_hat,contrast,converged");
        assert_eq!(csv.lines().count(), 1 + 16);
        let hist = fs::read_to_string(out.join("histogram_smce.csv")).unwrap();
        assert_eq!(hist.lines().count(), 31);
        reports.push(fs::read_to_string(out.join("report.json")).unwrap());
    }
    // only the echoed thread count differs
    let strip = |s: &str| s.lines().filter(|l| !l.contains("\"threads\"") && !l.contains("\"output_dir\"")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&reports[0]), strip(&reports[1]));
    let v: Value = serde_json::from_str(&reports[0]).unwrap();
    let s = &v["estimators"][1];
    let total: u64 = s["histogram"]["bins"].as_array().unwrap().iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(total, s["successes"].as_u64().unwrap());
    let (m, sd) = (s["mean"][0].as_f64().unwrap(), s["empirical_sd"][0].as_f64().unwrap());
    assert!((s["ci68"][0]["upper"].as_f64().unwrap() - m - sd).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mce(&["experiment", "--preset", "table7"], None).status.code(), Some(1));
    let missing = dir.path().join("nope.csv");
    assert_eq!(mce(&["estimate", "--obs", missing.to_str().unwrap()], None).status.code(), Some(3));
    let custom = dir.path().join("flat.toml");
    fs::write(&custom, "x0 = 1.0\nb = \"0\"\nc = \"x\"\nf = \"-y\"\n").unwrap();
    let o = mce(&["variance", "--model-file", custom.to_str().unwrap(), "--lower", "0.1", "--upper", "2", "--eps", "1e-2"], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("identifiability"));
}

#[test]
fn validate_reports_items() {
    let o = mce(&["validate", "--model", "example1"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("centering"));
    assert!(text.contains("WARN"));
}

#[test]
fn dry_run_echoes_preset() {
    let o = mce(&["experiment", "--preset", "table6", "--dry-run"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("n_obs = 10000"), "{text}");
}
