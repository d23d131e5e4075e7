//! File outputs: JSON report, replicate CSV, histogram CSV, observation and
//! trajectory files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use mce_core::sim::{ObservationSet, Trajectory};

use crate::error::{AppError, AppResult};
use crate::experiment::ExperimentReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Hist,
}

pub const ALL_FORMATS: [Format; 3] = [Format::Json, Format::Csv, Format::Hist];

/// 17 significant digits; non-finite values become `null`.
fn json_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

/// 10 significant digits.
pub fn csv_float(v: f64) -> String {
    format!("{v:.9e}")
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat_n(' ', n));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => write!(out, "{u}").unwrap(),
            (_, Some(i), _) => write!(out, "{i}").unwrap(),
            (_, _, Some(f)) => out.push_str(&json_float(f)),
            _ => out.push_str("null"),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 2);
                write_value(out, item, indent + 2);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(out, indent + 2);
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push_str(": ");
                write_value(out, item, indent + 2);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

/// Pretty JSON with every float printed to 17 significant digits.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize to JSON");
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    out
}

fn write_file(path: &Path, text: &str) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn replicates_csv(report: &ExperimentReport) -> String {
    let k = report.config.theta0.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replicate".to_string(), "seed".into(), "estimator".into()];
    if k == 1 {
        header.push("theta_hat".into());
    } else {
        header.extend((1..=k).map(|i| format!("theta_hat_{i}")));
    }
    header.extend(["contrast".into(), "converged".into()]);
    w.write_record(&header).unwrap();
    for s in &report.estimators {
        for r in &s.replicates {
            let mut row = vec![r.replicate.to_string(), r.seed.to_string(), s.estimator.label().to_string()];
            row.extend(r.theta_hat.iter().map(|v| csv_float(*v)));
            row.push(csv_float(r.contrast));
            row.push(r.converged.to_string());
            w.write_record(&row).unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn histogram_csv(report: &ExperimentReport, index: usize) -> Option<String> {
    let h = report.estimators.get(index)?.histogram.as_ref()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_left", "bin_right", "count", "density", "overlay_density"]).unwrap();
    for b in &h.bins {
        w.write_record([
            csv_float(b.bin_left),
            csv_float(b.bin_right),
            b.count.to_string(),
            csv_float(b.density),
            csv_float(b.overlay_density),
        ])
        .unwrap();
    }
    Some(String::from_utf8(w.into_inner().unwrap()).unwrap())
}

/// Writes `report.json`, `replicates.csv` and `histogram_<est>.csv` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[Format]) -> AppResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for f in formats {
        match f {
            Format::Json => {
                let p = dir.join("report.json");
                write_file(&p, &to_json(report))?;
                written.push(p);
            }
            Format::Csv => {
                let p = dir.join("replicates.csv");
                write_file(&p, &replicates_csv(report))?;
                written.push(p);
            }
            Format::Hist => {
                for (i, s) in report.estimators.iter().enumerate() {
                    if let Some(text) = histogram_csv(report, i) {
                        let p = dir.join(format!("histogram_{}.csv", s.estimator.label().to_lowercase()));
                        write_file(&p, &text)?;
                        written.push(p);
                    }
                }
            }
        }
    }
    Ok(written)
}

/// `t,x` (or `t,x1,…,xm`) with the first row at t = 0 holding x₀.
pub fn write_observations(path: &Path, obs: &ObservationSet) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let m = obs.m();
    let mut header = vec!["t".to_string()];
    if m == 1 {
        header.push("x".into());
    } else {
        header.extend((1..=m).map(|i| format!("x{i}")));
    }
    w.write_record(&header).unwrap();
    for k in 0..=obs.n {
        let mut row = vec![format!("{:.16e}", obs.time(k))];
        row.extend(obs.at(k).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).unwrap();
    }
    write_file(path, &String::from_utf8(w.into_inner().unwrap()).unwrap())
}

pub fn read_observations(path: &Path) -> AppResult<ObservationSet> {
    let bad = |message: String| AppError::Format { path: path.to_path_buf(), message };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let m = r.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
    if m == 0 {
        return Err(bad("need a time column and at least one state column".into()));
    }
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let nums: Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let nums = nums.map_err(|e| bad(format!("row {}: {e}", line + 2)))?;
        if nums.len() != m + 1 {
            return Err(bad(format!("row {} has {} columns, expected {}", line + 2, nums.len(), m + 1)));
        }
        rows.push((nums[0], nums[1..].to_vec()));
    }
    if rows.len() < 2 {
        return Err(bad("need the t = 0 row and at least one observation".into()));
    }
    if rows[0].0 != 0.0 {
        return Err(bad("first row must be at t = 0".into()));
    }
    let n = rows.len() - 1;
    let horizon = rows[n].0;
    let dt = horizon / n as f64;
    for (k, (t, _)) in rows.iter().enumerate() {
        if (t - k as f64 * dt).abs() > 1e-9 * horizon.max(1.0) {
            return Err(bad(format!("observation times must be equally spaced; row {} has t = {t}", k + 2)));
        }
    }
    let x0 = rows[0].1.clone();
    let samples = rows[1..].iter().flat_map(|(_, x)| x.iter().copied()).collect();
    ObservationSet::new(x0, samples, horizon).map_err(|e| bad(e.to_string()))
}

/// `t,x…,y` for every fine node.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.m).map(|i| if traj.m == 1 { "x".to_string() } else { format!("x{i}") }));
    header.push("y".into());
    w.write_record(&header).unwrap();
    for i in 0..traj.times.len() {
        let mut row = vec![csv_float(traj.times[i])];
        row.extend(traj.slow_at(i).iter().map(|v| csv_float(*v)));
        row.push(csv_float(traj.fast[i]));
        w.write_record(&row).unwrap();
    }
    write_file(path, &String::from_utf8(w.into_inner().unwrap()).unwrap())
}
