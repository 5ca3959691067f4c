use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use iqt_core::volume::{load_volume, save_volume, Geometry, Volume3D};

fn iqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqt")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = iqt(&["phantom", "--n", "4", "--seed", "7", "--dims", "24,24,24", "--out", p(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let names = files(&a);
    // 4 volumes, 3 masks each, each with a geometry sidecar, plus the manifest
    assert_eq!(names.iter().filter(|n| n.ends_with(".nii")).count(), 16);
    assert!(names.contains(&"manifest.json".to_string()));
    for n in names.iter().filter(|n| n.ends_with(".nii")) {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn simulate_follows_slice_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(iqt(&["phantom", "--n", "1", "--dims", "24,24,24", "--voxel", "0.7", "--out", p(dir)]).status.success());
    let hf = dir.join("phantom_000.nii");
    let lf = dir.join("lf.nii");
    let out = iqt(&["simulate", "--in", p(&hf), "--r", "4", "--contrast", "t1w", "--seed", "3", "--out", p(&lf)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = load_volume(&lf, None).unwrap();
    let (nz, dz, r) = (24.0f64, 0.7f64, 4.0f64);
    let expected = ((nz - 1.0) * dz / (r * dz)).floor() as usize + 1;
    assert_eq!(v.dims(), [24, 24, expected]);
    let sample: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("lf.contrast.json")).unwrap()).unwrap();
    assert!(sample["sample"]["snr_wm"].as_f64().unwrap() > 1.0);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("lf.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["parameters"]["seed"], 3);
    let again = dir.join("again.nii");
    iqt(&["simulate", "--in", p(&hf), "--r", "4", "--seed", "3", "--out", p(&again)]);
    assert_eq!(fs::read(&lf).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn unknown_flag_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = iqt(&["phantom", "--n", "1", "--bogus", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_values_exit_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let hf = tmp.path().join("missing.nii");
    let lf = tmp.path().join("lf.nii");
    let out = iqt(&["simulate", "--in", p(&hf), "--r", "3", "--out", p(&lf)]);
    assert_eq!(out.status.code(), Some(2));
    let out = iqt(&["simulate", "--in", p(&hf), "--contrast", "pd", "--out", p(&lf)]);
    assert_eq!(out.status.code(), Some(2));
    let out = iqt(&["selftest", "--criteria", "12"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(files(tmp.path()).is_empty());
}

#[test]
fn runtime_error_exits_1_naming_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iqt(&["simulate", "--in", p(&tmp.path().join("missing.nii")), "--out", p(&tmp.path().join("lf.nii"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error in stage load input"));
}

#[test]
fn train_enhance_evaluate_round() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let model = dir.join("model.ckpt");
    let norm = dir.join("norm.json");
    let out = iqt(&[
        "train", "--phantoms", "2", "--r", "4", "--epochs", "1", "--batch", "4", "--seed", "1",
        "--config", p(&write_config(dir)), "--save-norm", p(&norm), "--out", p(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(dir.join("model.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_mse,val_mse,lr\n1,"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("model.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["parameters"]["train"]["epochs"], 1);
    assert_eq!(manifest["parameters"]["dataset"]["phantom"]["dims"], serde_json::json!([32, 32, 32]));

    assert!(iqt(&["phantom", "--n", "1", "--seed", "40", "--dims", "32,32,32", "--out", p(dir)]).status.success());
    let lf = dir.join("lf.nii");
    assert!(iqt(&["simulate", "--in", p(&dir.join("phantom_000.nii")), "--r", "4", "--out", p(&lf)]).status.success());
    let est = dir.join("est.nii");
    let out = iqt(&["enhance", "--model", p(&model), "--in", p(&lf), "--load-norm", p(&norm), "--patch", "16,16,4", "--out", p(&est)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_volume(&est, None).unwrap().dims(), [32, 32, 32]);

    let unc = dir.join("unc.nii");
    let out = iqt(&["enhance", "--model", p(&model), "--in", p(&lf), "--uncertainty", p(&unc), "--out", p(&dir.join("e2.nii"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage enhance"));

    let report = dir.join("report.json");
    let out = iqt(&["evaluate", "--est", p(&est), "--ref", p(&dir.join("phantom_000.nii")), "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(r["psnr_db"].as_f64().unwrap().is_finite());
    assert!(r["ssim"].as_f64().unwrap() <= 1.0);
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("train.json");
    let cfg = serde_json::json!({
        "dataset": { "phantom": { "dims": [32, 32, 32] }, "r": 2 },
        "train": { "epochs": 5, "batch_size": 8 }
    });
    fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn evaluate_reports_rve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let g = Geometry::isotropic(1.0);
    let est = Volume3D::from_fn([16, 16, 16], g, |x, _, _| f64::from(u8::from(x < 6))).unwrap();
    let gold = Volume3D::from_fn([16, 16, 16], g, |x, _, _| f64::from(u8::from(x < 4))).unwrap();
    let (le, lg) = (dir.join("le.nii"), dir.join("lg.nii"));
    save_volume(&est, &le).unwrap();
    save_volume(&gold, &lg).unwrap();
    let out = iqt(&["evaluate", "--est", p(&le), "--ref", p(&le), "--labels-est", p(&le), "--labels-gold", p(&lg), "--structures", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["ssim"], 1.0);
    // 6 vs 4 slabs of 256 voxels
    assert!((r["rve"]["1"].as_f64().unwrap() - 0.4).abs() < 1e-12);

    assert!(iqt(&["phantom", "--n", "1", "--dims", "16,16,16", "--out", p(dir)]).status.success());
    let ph = dir.join("phantom_000.nii");
    let out = iqt(&["evaluate", "--est", p(&ph), "--ref", p(&ph), "--labels-est", p(&ph), "--labels-gold", p(&lg), "--structures", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage load labels"));
}

#[test]
fn selftest_subset_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for out in [&a, &b] {
        let o = iqt(&["selftest", "--criteria", "2,4,10", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
        assert_eq!(String::from_utf8_lossy(&o.stdout).matches("PASS").count(), 3);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("a.manifest.json")).unwrap()).unwrap();
    let digest = m["outputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
}
