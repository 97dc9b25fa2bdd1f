use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[grid]
v_points = 16
[solver]
dt = 1e-3
t_end = 0.01
[output]
snapshot_stride = 5
"#;

fn lfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfd"))
        .args(args)
        .env("LFD_THREADS", "1")
        .output()
        .expect("spawn lfd")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_with_one() {
    let o = lfd(&["run", "--config", "/nonexistent/run.toml", "--output", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_with_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nepsilonn = 0.1\n");
    let o = lfd(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epsilonn"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_with_one() {
    assert_eq!(lfd(&["run"]).status.code(), Some(1));
    assert_eq!(lfd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lfd(&["--help"]).status.code(), Some(0));
}

#[test]
fn resume_without_snapshots_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = lfd(&["resume", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = lfd(&["resume", "--output", "/nonexistent/run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_kernel_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = lfd(&["check-kernel", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in [
        "psd_min_eigenvalue",
        "max_az_residual",
        "symmetry_residual",
        "divergence_fd_error",
        "ellipticity_floor_margin",
    ] {
        assert!(v[key].is_number(), "missing {key}");
    }
    assert_eq!(v["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn run_resume_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = lfd(&["run", "--config", &cfg, "--output", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 10);
    let series = fs::read(out.join("diagnostics.csv")).unwrap();

    fs::remove_file(out.join("snapshots/step_00000010.lfd")).unwrap();
    let o = lfd(&["resume", "--output", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("diagnostics.csv")).unwrap(), series);

    let o = lfd(&["diagnose", "--output", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let criteria = report["criteria"].as_array().unwrap();
    assert_eq!(criteria.len(), 12);
    assert!(stderr(&o).contains("[PASS]  1 mass conservation"));

    // The literal energy law is off by the dimension factor, so --assert trips.
    let o = lfd(&["diagnose", "--output", out_s, "--assert"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[FAIL]  3 energy drift law"));

    let snap = out.join("snapshots/step_00000005.lfd");
    let o = lfd(&["diagnose", "--output", out_s, "--snapshot", snap.to_str().unwrap(), "--assert"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn corrupt_snapshot_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(lfd(&["run", "--config", &cfg, "--output", out_s]).status.code(), Some(0));
    let snap = out.join("snapshots/step_00000010.lfd");
    let mut bytes = fs::read(&snap).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&snap, bytes).unwrap();
    let o = lfd(&["resume", "--output", out_s]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).to_lowercase().contains("checksum"), "{}", stderr(&o));
}
