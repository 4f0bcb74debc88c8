use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phenoctl::output::RunManifest;

fn phenoctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenoctl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn phenoctl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Column `name` of a CSV with a header row.
fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn numbers(path: &Path, name: &str) -> Vec<f64> {
    column(path, name).iter().map(|v| v.parse().unwrap()).collect()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_totals_snapshots_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = phenoctl(tmp.path(), &["simulate", "--u1", "1", "--u2", "1", "--T", "2", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    let t = numbers(&run.join("totals.csv"), "t [time]");
    assert_eq!(t[0], 0.0);
    assert!((t.last().unwrap() - 2.0).abs() < 1e-12);
    let m = manifest(&run);
    assert_eq!(m.preset, "lorz2013-modified");
    assert_eq!(m.nx, 101);
    for a in ["totals.csv", "snapshot_0.csv", "plot_data.csv"] {
        assert!(m.artifacts.iter().any(|x| x == a), "missing {a}");
        assert!(run.join(a).exists());
    }
    assert_eq!(m.snapshot_times.len(), 21);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = phenoctl(tmp.path(), &["strategy", "qp1", "--T", "5", "--seed", "7", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    for f in ["totals.csv", "snapshot_3.csv", "arcs.json", "constraints.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn flags_take_precedence_over_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.json"),
        r#"{"preset": "lorz2013-legacy", "numerics": {"nx": 51, "dt": 0.002}}"#,
    )
    .unwrap();
    let o = phenoctl(
        tmp.path(),
        &["simulate", "--T", "0.5", "--config", "run.json", "--nx", "41", "--out", "r"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&tmp.path().join("r"));
    assert_eq!(m.nx, 41);
    assert_eq!(m.dt, 0.002);
    assert_eq!(m.preset, "lorz2013-legacy");
}

#[test]
fn bad_config_names_the_offending_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"numerics": {"nx": 51, "dtt": 0.1}}"#).unwrap();
    let o = phenoctl(tmp.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("numerics") && err.contains("dtt"), "{err}");
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&phenoctl(tmp.path(), &["figure", "9"])), 2);
    assert_eq!(code(&phenoctl(tmp.path(), &["simulate", "--u1", "9"])), 2);
    assert_eq!(code(&phenoctl(tmp.path(), &["validate", "--theta-hc", "1.5"])), 2);
    assert_eq!(code(&phenoctl(tmp.path(), &["ocp", "solve", "--T", "2", "--theta-hc", "0.9"])), 3);
    assert_eq!(code(&phenoctl(tmp.path(), &["simulate", "--dt", "1000", "--T", "1000"])), 4);
    assert_eq!(code(&phenoctl(tmp.path(), &["validate"])), 0);
}

#[test]
fn figure1_cancer_mass_declines_under_the_legacy_sensitivity() {
    let tmp = tempfile::tempdir().unwrap();
    let o = phenoctl(tmp.path(), &["figure", "1", "--out", "f1"]);
    assert_eq!(code(&o), 0);
    let dir = tmp.path().join("f1");
    assert_eq!(manifest(&dir).preset, "lorz2013-legacy");
    let t = numbers(&dir.join("totals.csv"), "t [time]");
    let rho_c = numbers(&dir.join("totals.csv"), "rho_C [mass]");
    let after: Vec<f64> = t.iter().zip(&rho_c).filter(|(t, _)| **t >= 2.0).map(|(_, r)| *r).collect();
    assert!(after.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    assert!(rho_c.last().unwrap() < &(0.01 * rho_c[0]));
}

#[test]
fn figure3_cancer_mass_regrows_under_the_modified_sensitivity() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&phenoctl(tmp.path(), &["figure", "3", "--out", "f3"])), 0);
    let rho_c = numbers(&tmp.path().join("f3").join("totals.csv"), "rho_C [mass]");
    let (k_min, min) = rho_c
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    assert!(k_min > 0 && k_min < rho_c.len() - 1);
    assert!(rho_c.last().unwrap() > &(2.0 * min));
}

#[test]
fn figure2_lists_both_sensitivity_curves() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&phenoctl(tmp.path(), &["figure", "2", "--nx", "51", "--out", "f2"])), 0);
    let path = tmp.path().join("f2").join("mu_curves.csv");
    let legacy = numbers(&path, "mu_C_legacy [1/dose/time]");
    let modified = numbers(&path, "mu_C_modified [1/dose/time]");
    assert_eq!(legacy.len(), 51);
    assert!(legacy.iter().zip(&modified).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn figure6_rides_the_healthy_floor_in_a_sawtooth() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&phenoctl(tmp.path(), &["figure", "6", "--out", "f6"])), 0);
    let totals = tmp.path().join("f6").join("totals.csv");
    let t = numbers(&totals, "t [time]");
    let g2 = numbers(&totals, "g2 [ratio]");
    let modes = column(&totals, "mode");
    let theta_h = 0.6;
    let late: Vec<f64> = t.iter().zip(&g2).filter(|(t, _)| **t > 5.0).map(|(_, g)| *g).collect();
    let low = late.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((low - theta_h).abs() < 0.02, "floor min {low}");
    let switches = modes.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(switches >= 4, "{switches} mode switches");
}
