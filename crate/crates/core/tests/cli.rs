use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codeq::cli::{sha256_hex, theta_for_deadzone, Manifest};
use codeq::metrics::CompressionReport;
use codeq::models::{build_mlp, load_checkpoint, save_checkpoint, ConvSpec, LayerSpec, Model, ModelSpec};
use codeq::quantizers::{absmax_recovery_fixed_point, quantile_abs, LayerQuantState};

fn codeq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codeq")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> CompressionReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const TINY: &str = "
[experiment]
name = tiny
seed = 1

[data]
source = synthetic
n = 240
dims = 6
classes = 3
spread = 0.2
val_size = 40

[model]
kind = mlp
hidden = 8

[train]
mode = fixed
bits = 4
epochs = 2
batch_size = 16
lr_theta = 0.05
";

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&codeq(&[])), 2);
    assert_eq!(code(&codeq(&["frobnicate"])), 2);
    assert_eq!(code(&codeq(&["verify", "--trials", "many"])), 2);
    assert_eq!(code(&codeq(&["train"])), 2);
    assert_eq!(code(&codeq(&["--help"])), 0);
}

#[test]
fn verify_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeq(&["verify", "--trials", "300", "--seed", "4", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out.stdout));
    let stdout = text(&out.stdout);
    for suite in ["deadzone-equivalence", "uniform-reduction", "theta-gradients"] {
        assert!(stdout.contains(suite), "{stdout}");
    }
    let verify = fs::read(dir.path().join("verify.json")).unwrap();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "verify");
    assert_eq!(manifest.artifacts["verify.json"], sha256_hex(&verify));
}

#[test]
fn verify_with_zero_trials_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = codeq(&["verify", "--trials", "0", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(text(&out.stdout).contains("vacuously"));
}

#[test]
fn train_writes_hashed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = codeq(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let manifest: Manifest = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    for name in ["checkpoint.cdq", "history.csv", "layers.csv", "report.json", "report.csv"] {
        assert_eq!(manifest.artifacts[name], sha256_hex(&fs::read(run.join(name)).unwrap()), "{name}");
    }
    assert_eq!(manifest.config.unwrap().train.epochs, 2);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,lr_weights,loss"));

    let other = dir.path().join("other");
    let out = codeq(&["train", "--config", path(&cfg), "--out", path(&other), "--seed", "2"]);
    assert_eq!(code(&out), 0);
    assert_ne!(fs::read(run.join("checkpoint.cdq")).unwrap(), fs::read(other.join("checkpoint.cdq")).unwrap());

    let replay = dir.path().join("replay");
    let out = codeq(&["train", "--manifest", path(&run.join("manifest.json")), "--out", path(&replay)]);
    assert_eq!(code(&out), 0);
    assert!(text(&out.stdout).contains("reproduced previous artifact hashes: yes"));
}

#[test]
fn tampered_manifest_is_a_property_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.ini");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&codeq(&["train", "--config", path(&cfg), "--out", path(&run)])), 0);
    let mpath = run.join("manifest.json");
    let mut manifest: Manifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
    manifest.artifacts.insert("checkpoint.cdq".into(), "0".repeat(64));
    fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let out = codeq(&["train", "--manifest", path(&mpath), "--out", path(&dir.path().join("again"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 2\nepochz = 3")).unwrap();
    let out = codeq(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    let line = TINY.replace("epochs = 2", "epochs = 2\nepochz = 3").lines().position(|l| l.starts_with("epochz")).unwrap() + 1;
    assert!(text(&out.stderr).contains(&format!("line {line}")), "{}", text(&out.stderr));

    let out = codeq(&["train", "--config", path(&dir.path().join("missing.ini"))]);
    assert_eq!(code(&out), 2);
    let out = codeq(&["train", "--config", path(&cfg), "--override", "train.epochs"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.ini");
    fs::write(&cfg, TINY).unwrap();
    let out = codeq(&[
        "train",
        "--config",
        path(&cfg),
        "--override",
        "train.lr_weights=1e300",
        "--override",
        "train.momentum=0",
        "--out",
        path(&dir.path().join("hot")),
    ]);
    assert_eq!(code(&out), 3, "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("diverged"));
}

/// Single 16→16 3×3 convolution on an 8×8 map, padding 1: 147,456 MACs.
fn conv_checkpoint(dir: &Path) -> PathBuf {
    let spec = ModelSpec {
        input_shape: vec![16, 8, 8],
        layers: vec![LayerSpec::Conv2d(ConvSpec {
            in_channels: 16,
            out_channels: 16,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            in_h: 8,
            in_w: 8,
            out_h: 8,
            out_w: 8,
            pool: 1,
            has_bias: false,
        })],
    };
    let mut model = Model::init(spec, 0).unwrap();
    // A quarter of the weights at magnitude 1, the rest far inside the dead-zone.
    let w: Vec<f64> = (0..2304)
        .map(|i| match i % 8 {
            0 => 1.0,
            4 => -1.0,
            k => 1e-4 * k as f64,
        })
        .collect();
    let range = quantile_abs(&w, 0.99).unwrap();
    model.layers[0].weight = w;
    model.layers[0].quant = Some(LayerQuantState::fixed(4, theta_for_deadzone(range, range).unwrap()));
    let p = dir.join("conv.cdq");
    save_checkpoint(&model, &p).unwrap();
    p
}

#[test]
fn bops_of_hand_built_conv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = conv_checkpoint(dir.path());
    let out_dir = dir.path().join("bops");
    let out = codeq(&["bops", "--checkpoint", path(&ckpt), "--out", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let r = report(&out_dir);
    assert_eq!(r.layers[0].macs_dense, 147_456);
    assert_eq!(r.layers[0].density, 0.25);
    assert_eq!(r.layers[0].w_bits, 4);
    assert_eq!(r.total_bops, 4_718_592.0);
    assert_eq!(r.relative_bops_percent(), 3.125);
    assert!(text(&out.stdout).contains("3.1250%"));
}

#[test]
fn bops_rejects_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.cdq");
    fs::write(&empty, b"").unwrap();
    assert_eq!(code(&codeq(&["bops", "--checkpoint", path(&empty), "--out", path(dir.path())])), 2);
    let junk = dir.path().join("junk.cdq");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let out = codeq(&["bops", "--checkpoint", path(&junk), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(!text(&out.stderr).is_empty());
    assert_eq!(code(&codeq(&["bops", "--checkpoint", path(&dir.path().join("nope.cdq"))])), 2);
}

fn mlp_checkpoint(dir: &Path) -> PathBuf {
    let model = build_mlp(30, &[20], 5, 3).unwrap();
    let p = dir.join("mlp.cdq");
    save_checkpoint(&model, &p).unwrap();
    p
}

#[test]
fn quantize_theta_zero_prunes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = mlp_checkpoint(dir.path());
    let out_dir = dir.path().join("q");
    let out = codeq(&[
        "quantize", "--checkpoint", path(&ckpt), "--theta-dz", "0", "--bits", "4", "--quantile", "1", "--out", path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert_eq!(report(&out_dir).overall_sparsity, 1.0);
    let q = load_checkpoint(out_dir.join("quantized.cdq")).unwrap();
    assert!(q.layers.iter().all(|l| l.quant.is_none() && l.weight.iter().all(|&w| w == 0.0)));
}

#[test]
fn quantize_wide_and_fine_is_near_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = mlp_checkpoint(dir.path());
    let original = load_checkpoint(&ckpt).unwrap();
    let out_dir = dir.path().join("q");
    let out = codeq(&["quantize", "--checkpoint", path(&ckpt), "--theta-dz", "3", "--bits", "8", "--out", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let r = report(&out_dir);
    assert!(r.overall_sparsity < 0.01, "{}", r.overall_sparsity);
    assert!((r.relative_bops - 0.25 * (1.0 - r.overall_sparsity)).abs() < 1e-12);
    let q = load_checkpoint(out_dir.join("quantized.cdq")).unwrap();
    for (a, b) in original.layers.iter().zip(&q.layers) {
        let range = quantile_abs(&a.weight, 0.99).unwrap();
        let err: f64 = a.weight.iter().zip(&b.weight).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.weight.len() as f64;
        assert!(err < 0.01 * range, "mean error {err} vs range {range}");
        assert_eq!(a.bias, b.bias);
    }
}

#[test]
fn quantize_fixed_point_deadzone_is_absmax_step() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = mlp_checkpoint(dir.path());
    let model = load_checkpoint(&ckpt).unwrap();
    let out_dir = dir.path().join("q");
    let out = codeq(&["quantize", "--checkpoint", path(&ckpt), "--deadzone", "fixed-point", "--bits", "3", "--out", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    for (layer, rep) in model.layers.iter().zip(report(&out_dir).layers) {
        let range = quantile_abs(&layer.weight, 0.99).unwrap();
        let d = rep.deadzone.unwrap();
        assert!((d - absmax_recovery_fixed_point(range, 3).unwrap()).abs() <= 1e-12 * range);
        assert!((d - range / 3.0).abs() <= 1e-9 * range);
        assert!((rep.scale.unwrap() - d).abs() <= 1e-7 * range);
    }
}

#[test]
fn quantize_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = mlp_checkpoint(dir.path());
    let o = path(dir.path());
    assert_eq!(code(&codeq(&["quantize", "--checkpoint", path(&ckpt), "--theta-dz", "1", "--out", o])), 2);
    assert_eq!(code(&codeq(&["quantize", "--checkpoint", path(&ckpt), "--theta-dz", "1", "--deadzone", "0.1", "--bits", "4"])), 2);
    assert_eq!(code(&codeq(&["quantize", "--checkpoint", path(&ckpt), "--deadzone", "wide", "--bits", "4", "--out", o])), 2);
    assert_eq!(code(&codeq(&["quantize", "--checkpoint", path(&ckpt), "--bits", "1", "--out", o])), 2);
    assert_eq!(code(&codeq(&["quantize", "--checkpoint", path(&ckpt), "--theta-dz", "-1.5", "--bits", "4", "--out", o])), 0);
}
