use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use corsa_cli::{export, parse_config, validate_run_dir, RunManifest, MANIFEST, STEP_COLUMNS};

const TINY: &str = r#"{
  "name": "tiny",
  "world": { "n_facts": 40 },
  "pretrain": { "max_epochs": 40, "min_fidelity": 0.0 },
  "optimizer": { "steps": 8 },
  "schedule": { "kind": "cross-inject", "fraction": 0.5 },
  "metrics": { "curvature": true, "curvature_pairs": 2, "power": { "iters": 5 } }
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corsa"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn run_cli(root: &Path, args: &[&str]) -> (bool, String, String) {
    let out = bin().env("CORSA_OUTPUT_ROOT", root).args(args).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).trim().to_string(), String::from_utf8_lossy(&out.stderr).to_string())
}

#[test]
fn run_writes_valid_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (ok, first, err) = run_cli(&tmp.path().join("a"), &["run", cfg.to_str().unwrap()]);
    assert!(ok, "{err}");
    let (ok, second, _) = run_cli(&tmp.path().join("b"), &["run", cfg.to_str().unwrap()]);
    assert!(ok);
    let (a, b) = (PathBuf::from(first), PathBuf::from(second));
    assert_eq!(a.file_name(), b.file_name());

    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(a.join(MANIFEST)).unwrap()).unwrap();
    for f in &manifest.files {
        assert!(a.join(f).is_file(), "{f}");
        if f != MANIFEST {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        }
    }
    for f in ["metrics.jsonl", "metrics.csv", "trace.jsonl", "curvature.jsonl", "checkpoints/adapter_phase1.json"] {
        assert!(manifest.files.iter().any(|m| m == f), "{f} missing from manifest");
    }
    assert_eq!(manifest.runs[0].status, "ok");

    let (ok, out, _) = run_cli(tmp.path(), &["export", a.to_str().unwrap()]);
    assert!(ok);
    assert!(out.contains("steps.csv"));
    let steps = fs::read_to_string(a.join("export/steps.csv")).unwrap();
    assert_eq!(steps.lines().next().unwrap(), STEP_COLUMNS.join(","));
    assert_eq!(steps.lines().count(), 1 + 2 * 8);
    assert_eq!(validate_run_dir(&a).unwrap(), Vec::<String>::new());
}

#[test]
fn margin_column_is_difference_of_log_probs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (ok, dir, _) = run_cli(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "metrics.curvature=false"]);
    assert!(ok);
    export(Path::new(&dir)).unwrap();
    let mut r = csv::Reader::from_path(Path::new(&dir).join("export/steps.csv")).unwrap();
    for row in r.records() {
        let v: Vec<f64> = row.unwrap().iter().map(|c| c.parse().unwrap()).collect();
        assert!((v[3] - (v[1] - v[2])).abs() <= 1e-10);
    }
}

#[test]
fn overrides_change_hash_and_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let base = parse_config(TINY, &[]).unwrap();
    let varied = parse_config(TINY, &["optimizer.use_sam=false".into()]).unwrap();
    assert_ne!(base.hash().unwrap(), varied.hash().unwrap());
    let cfg = write_config(tmp.path(), TINY);
    let (ok, a, _) = run_cli(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "metrics.curvature=false"]);
    assert!(ok);
    let (ok, b, _) = run_cli(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "metrics.curvature=false", "--set", "optimizer.use_sam=false"]);
    assert!(ok);
    assert_ne!(a, b);
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&b).join("config.json")).unwrap()).unwrap();
    assert_eq!(stored["config"]["optimizer"]["use_sam"], false);
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (ok, _, err) = run_cli(tmp.path(), &["run", cfg.to_str().unwrap(), "--set", "optimizer.nope=1"]);
    assert!(!ok);
    let rec: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(rec["kind"], "config");

    let (ok, _, err) = run_cli(tmp.path(), &["export", tmp.path().to_str().unwrap()]);
    assert!(!ok);
    assert!(err.contains("missing-manifest"));

    let bad = write_config(tmp.path(), &TINY.replace("\"min_fidelity\": 0.0", "\"min_fidelity\": 1.0").replace("\"max_epochs\": 40", "\"max_epochs\": 1"));
    let out = bin().env("CORSA_OUTPUT_ROOT", tmp.path().join("fail")).args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let run_dir = fs::read_dir(tmp.path().join("fail")).unwrap().next().unwrap().unwrap().path();
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(rec["kind"], "pretraining-failed");
    assert!(run_dir.join(MANIFEST).is_file());
}

#[test]
fn grid_and_sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (ok, dir, err) = run_cli(tmp.path(), &["grid", cfg.to_str().unwrap(), "--set", "metrics.curvature=false"]);
    assert!(ok, "{err}");
    let dir = PathBuf::from(dir);
    let table = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    for m in ["corsa", "no-sam", "no-dpo", "no-pcgrad"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{m},"))), "{m}");
    }
    assert_eq!(validate_run_dir(&dir).unwrap(), Vec::<String>::new());

    let (ok, dir, err) = run_cli(tmp.path(), &["sweep", cfg.to_str().unwrap(), "--axis", "lambda", "--values", "0.5,1", "--set", "metrics.curvature=false"]);
    assert!(ok, "{err}");
    let dir = PathBuf::from(dir);
    let table = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(table.starts_with("lambda,phase,metric,value,config_hash"));
    assert!(table.lines().any(|l| l.starts_with("0.5,")) && table.lines().any(|l| l.starts_with("1,")));
    assert_eq!(validate_run_dir(&dir).unwrap(), Vec::<String>::new());
}
