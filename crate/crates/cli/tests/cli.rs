use std::fs::File;
use std::path::Path;
use std::process::{Command, Output};

use mvdd::dataset::read_container;
use mvdd::denoiser::{read_checkpoint, CheckpointConfig, Denoiser, ParamStore};
use mvdd::geometry::{read_pfm, read_ply};
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvdd")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

const TINY: &[&str] = &[
    "--steps", "10", "--levels", "2", "--base-channels", "8", "--channel-multipliers", "1,2", "--groups", "4", "--k", "4",
];

fn gen(dir: &Path, name: &str, seed: &str) {
    ok(dir, &["gen-data", "--count", "4", "--views", "4", "--res", "8", "--seed", seed, "--out", name]);
}

fn train(dir: &Path, data: &str, out: &str, epochs: &str, seed: &str) {
    let mut args = vec!["train", "--data", data, "--out", out, "--epochs", epochs, "--seed", seed];
    args.extend_from_slice(TINY);
    ok(dir, &args);
}

fn checkpoint(path: &Path) -> (CheckpointConfig, ParamStore) {
    read_checkpoint(File::open(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-data", "--count", "2"]), 2);
    assert_eq!(code(d, &["fuse", "--input", "missing.mvdd", "--out", "x.ply"]), 2);
    assert_eq!(code(d, &["gen-data", "--out", "x.mvdd", "--rig", "hexagon"]), 2);
    assert_eq!(code(d, &["--config", "missing.json", "gen-data", "--out", "x.mvdd"]), 2);
    std::fs::write(d.join("bad.json"), "[1, 2]").unwrap();
    assert_eq!(code(d, &["--config", "bad.json", "gen-data", "--out", "x.mvdd"]), 2);
}

#[test]
fn shape_mismatches_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "0");
    let mut args = vec!["train", "--data", "d.mvdd", "--out", "m.ckpt", "--epochs", "0", "--views", "8"];
    args.extend_from_slice(TINY);
    assert_eq!(code(d, &args), 3);
    let mut args = vec!["train", "--data", "d.mvdd", "--out", "m.ckpt", "--epochs", "0", "--res", "16"];
    args.extend_from_slice(TINY);
    assert_eq!(code(d, &args), 3);

    ok(d, &["export-ply", "--input", "d.mvdd", "--out", "a.ply"]);
    ok(d, &["export-ply", "--input", "d.mvdd", "--sample", "1", "--out", "b.ply"]);
    std::fs::create_dir(d.join("g")).unwrap();
    std::fs::create_dir(d.join("r")).unwrap();
    std::fs::copy(d.join("a.ply"), d.join("g/a.ply")).unwrap();
    std::fs::copy(d.join("b.ply"), d.join("r/b.ply")).unwrap();
    let points = |p: &str| read_ply(File::open(d.join(p)).unwrap()).unwrap().len();
    assert_ne!(points("a.ply"), points("b.ply"));
    assert_eq!(code(d, &["eval", "--generated", "g", "--reference", "r", "--metric", "emd"]), 3);
    assert_eq!(code(d, &["eval", "--generated", "g", "--reference", "r", "--metric", "emd", "--subsample", "8"]), 0);
}

#[test]
fn complete_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "0");
    train(d, "d.mvdd", "m.ckpt", "0", "0");
    ok(d, &["extract-view", "--input", "d.mvdd", "--view", "0", "--out", "v.pfm"]);
    assert_eq!(code(d, &["complete", "--ckpt", "m.ckpt", "--input", "nope.pfm", "--view", "0", "--out", "c.mvdd"]), 2);
    assert_eq!(code(d, &["complete", "--ckpt", "m.ckpt", "--input", "v.pfm", "--view", "4", "--out", "c.mvdd"]), 2);
    ok(d, &["gen-data", "--count", "1", "--views", "4", "--res", "16", "--out", "big.mvdd"]);
    ok(d, &["extract-view", "--input", "big.mvdd", "--view", "0", "--out", "big.pfm"]);
    assert_eq!(code(d, &["complete", "--ckpt", "m.ckpt", "--input", "big.pfm", "--view", "0", "--out", "c.mvdd"]), 3);
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "0");
    train(d, "d.mvdd", "m.ckpt", "0", "9");
    let (cfg, params) = checkpoint(&d.join("m.ckpt"));
    let mut init = Denoiser::new(cfg.model, 9).unwrap();
    init.params.quantize();
    assert_eq!(params, init.params);
    assert_eq!(std::fs::read_to_string(d.join("m.ckpt.loss.csv")).unwrap(), "epoch,loss\n");
    assert!(d.join("m.ckpt.config.json").exists());
}

#[test]
fn seeds_change_training_and_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "0");
    train(d, "d.mvdd", "a.ckpt", "1", "1");
    train(d, "d.mvdd", "b.ckpt", "1", "2");
    assert_ne!(checkpoint(&d.join("a.ckpt")).1, checkpoint(&d.join("b.ckpt")).1);
    ok(d, &["sample", "--ckpt", "a.ckpt", "--seed", "1", "--fusion-window", "3", "--out", "s1.mvdd"]);
    ok(d, &["sample", "--ckpt", "a.ckpt", "--seed", "2", "--fusion-window", "3", "--out", "s2.mvdd"]);
    let load = |p: &str| read_container(File::open(d.join(p)).unwrap()).unwrap().samples[0].values.clone();
    assert_ne!(load("s1.mvdd"), load("s2.mvdd"));
}

#[test]
fn completion_keeps_the_input_view() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "3");
    train(d, "d.mvdd", "m.ckpt", "1", "0");
    ok(d, &["extract-view", "--input", "d.mvdd", "--sample", "1", "--view", "2", "--out", "v.pfm"]);
    ok(d, &["complete", "--ckpt", "m.ckpt", "--input", "v.pfm", "--view", "2", "--fusion-window", "3", "--out", "c.mvdd"]);
    let input = read_pfm(File::open(d.join("v.pfm")).unwrap()).unwrap();
    let out = read_container(File::open(d.join("c.mvdd")).unwrap()).unwrap();
    let view = out.samples[0].view(2);
    assert_eq!(view.len(), input.values.len());
    for (a, b) in view.iter().zip(&input.values) {
        assert_eq!(a.to_bits(), (*b).to_bits());
    }
}

#[test]
fn eval_of_identical_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "d.mvdd", "4");
    let out = ok(d, &["eval", "--generated", "d.mvdd", "--reference", "d.mvdd", "--subsample", "6", "--oracle", "--out", "r.json"]);
    assert!(!out.stdout.is_empty());
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    for name in ["cd", "emd"] {
        let m = &report[name];
        assert_eq!(m["cov"].as_f64(), Some(1.0), "{name}");
        assert_eq!(m["mmd"].as_f64(), Some(0.0), "{name}");
        assert!(m["one_nna"].is_number(), "{name}");
    }
    assert!(report["oracle_max_abs_diff"].as_f64().unwrap() <= 1e-9);
}
