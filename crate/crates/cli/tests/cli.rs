use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmt-lab"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn mmt-lab")
}

fn gen_two_point(dir: &Path) -> PathBuf {
    let out = run(&["gen", "--family", "two-point", "--size", "2", "--dim", "1", "--out", "tp.json"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("tp.json")
}

fn only_subdir(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_is_deterministic_and_sorted() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&["gen", "--family", "cloud", "--size", "5", "--dim", "3", "--seed", "9"], tmp.path());
    let b = run(&["gen", "--family", "cloud", "--size", "5", "--dim", "3", "--seed", "9"], tmp.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let c = run(&["gen", "--family", "cloud", "--size", "5", "--dim", "3", "--seed", "10"], tmp.path());
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn gen_accepts_prior_list_and_rejects_bad_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = run(&["gen", "--family", "simplex", "--size", "3", "--prior", "1,1,2"], tmp.path());
    assert!(ok.status.success());
    let v: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(v["prior"], serde_json::json!([0.25, 0.25, 0.5]));
    let bad = run(&["gen", "--family", "simplex", "--size", "3", "--prior", "1,x,2"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["audit"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["gen", "--family", "cloud", "--size", "4", "--format", "xml"], tmp.path()).status.code(), Some(1));
    let inst = gen_two_point(tmp.path());
    let out = run(&["audit", inst.to_str().unwrap(), "--checks", "A99"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["audit", "missing.json"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn two_point_audit_passes_and_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = gen_two_point(tmp.path());
    let args = ["audit", inst.to_str().unwrap(), "--samples", "4000", "--out", "runs"];
    let a = run(&args, tmp.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    let stdout = String::from_utf8_lossy(&a.stdout);
    for id in 1..=14 {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("A{id} "))), "A{id} missing");
    }
    let b = run(&args, tmp.path());
    assert_eq!(b.status.code(), Some(0));
    let dirs = only_subdir(&tmp.path().join("runs"));
    assert_eq!(dirs.len(), 2);
    assert!(dirs[1].to_string_lossy().ends_with("-2"));
    let ra = fs::read(dirs[0].join("report.json")).unwrap();
    let rb = fs::read(dirs[1].join("report.json")).unwrap();
    assert_eq!(ra, rb);
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["schema"], "mmt-lab/1");
    assert_eq!(report["checks"].as_array().unwrap().len(), 14);
    assert!(dirs[0].join("timings.json").exists());
    assert!(dirs[0].join("instance.json").exists());
}

#[test]
fn check_selection_limits_report() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = gen_two_point(tmp.path());
    let out = run(&["audit", inst.to_str().unwrap(), "--checks", "A7,A10", "--out", "runs"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let dir = &only_subdir(&tmp.path().join("runs"))[0];
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    let ids: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["check_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["A7", "A10"]);
}

#[test]
fn curves_csv_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = gen_two_point(tmp.path());
    let out = run(&["curves", inst.to_str().unwrap(), "--samples", "2000", "--format", "csv", "--out", "runs"], tmp.path());
    assert!(out.status.success());
    let dir = &only_subdir(&tmp.path().join("runs"))[0];
    let mut r = csv::Reader::from_path(dir.join("curves.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), 7);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        for f in rec.iter() {
            let x: f64 = f.parse().unwrap();
            assert_eq!(x.to_string(), f);
        }
        rows += 1;
    }
    assert_eq!(rows, 65);
    assert!(dir.join("rd_trace.csv").exists());

    let again = run(&["curves", inst.to_str().unwrap(), "--samples", "2000", "--format", "csv", "--out", "runs"], tmp.path());
    assert!(again.status.success());
    let dirs = only_subdir(&tmp.path().join("runs"));
    assert_eq!(fs::read(dirs[0].join("curves.csv")).unwrap(), fs::read(dirs[1].join("curves.csv")).unwrap());
}

#[test]
fn rd_and_functionals_emit_json() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = gen_two_point(tmp.path());
    let rd = run(&["rd", inst.to_str().unwrap(), "--points", "3"], tmp.path());
    assert!(rd.status.success());
    let v: serde_json::Value = serde_json::from_slice(&rd.stdout).unwrap();
    let h = v["entropy"].as_f64().unwrap();
    assert!((h - 2f64.ln()).abs() < 1e-15);
    let two = v["layer_cake_integral"].as_f64().unwrap() / v["sqrt_rate_integral"].as_f64().unwrap();
    assert!((two - 2.0).abs() < 1e-3);

    let f = run(&["functionals", inst.to_str().unwrap(), "--iterations", "100"], tmp.path());
    assert!(f.status.success());
    let v: serde_json::Value = serde_json::from_slice(&f.stdout).unwrap();
    // two points at distance 1: int_0^1 sqrt(ln 2) dr
    assert!((v["ft_uniform"].as_f64().unwrap() - 2f64.ln().sqrt()).abs() < 1e-12);
    assert_eq!(v["gamma2_part"]["cap1"].as_f64().unwrap(), 1.0);
}
