use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pccnn_core::data::{encode_idx_images, encode_pgm, Image, Signature};
use pccnn_core::model::{ArchitectureConfig, ModelParams};
use pccnn_core::training::{file_sha256, save_checkpoint};
use serde_json::Value;
use tempfile::TempDir;

const SIDE: usize = 8;

fn pccnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pccnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pccnn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn tiny_checkpoint(dir: &Path, name: &str, channels: usize, levels: usize) -> PathBuf {
    let config = ArchitectureConfig {
        signature: Signature::new(SIDE, SIDE, channels, levels).unwrap(),
        prior_blocks: 1,
        prior_filters: 4,
        prior_kernel: 3,
        cond_blocks: 1,
        cond_filters: 4,
        cond_kernel: 3,
        head_hidden: None,
    };
    let path = dir.join(name);
    save_checkpoint(&ModelParams::init(&config, 5).unwrap(), None, &path).unwrap();
    path
}

/// 8-bit grayscale digits-like images in IDX format.
fn idx_dataset(dir: &Path, count: usize) -> PathBuf {
    let sig = Signature::new(SIDE, SIDE, 1, 256).unwrap();
    let images: Vec<Image> = (0..count)
        .map(|n| {
            let px = (0..SIDE * SIDE)
                .map(|p| if (p % SIDE + p / SIDE + n) % 3 == 0 { 255 } else { 0 })
                .collect();
            Image::new(sig, px).unwrap()
        })
        .collect();
    let path = dir.join("train-images-idx3-ubyte");
    fs::write(&path, encode_idx_images(&images).unwrap()).unwrap();
    path
}

fn pgm(dir: &Path, name: &str, values: &[u8]) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, encode_pgm(SIDE, SIDE, values)).unwrap();
    path
}

fn checker(dir: &Path) -> PathBuf {
    let values: Vec<u8> = (0..SIDE * SIDE).map(|p| if (p + p / SIDE) % 2 == 0 { 255 } else { 0 }).collect();
    pgm(dir, "image.pgm", &values)
}

fn gen_masks(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let side = SIDE.to_string();
    let seed = seed.to_string();
    ok(&["gen-masks", "--count", "6", "--height", &side, "--width", &side, "--seed", &seed, "--out", s(&out)]);
    out
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn help_succeeds_and_bad_flags_are_usage_errors() {
    assert_eq!(code(&pccnn(&["--help"])), 0);
    assert_eq!(code(&pccnn(&["sample", "--bogus"])), 1);
    assert_eq!(code(&pccnn(&[])), 1);
}

#[test]
fn gen_masks_is_reproducible_and_writes_manifest() {
    let dir = TempDir::new().unwrap();
    let a = gen_masks(dir.path(), "a.pcmk", 3);
    let b = gen_masks(dir.path(), "b.pcmk", 3);
    let c = gen_masks(dir.path(), "c.pcmk", 4);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let manifest = read_json(&dir.path().join("a.pcmk.manifest.json"));
    assert_eq!(manifest["command"], "gen-masks");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["extra"]["sha256"], file_sha256(&a).unwrap());
}

#[test]
fn gen_masks_rejects_zero_count() {
    let dir = TempDir::new().unwrap();
    let out = pccnn(&["gen-masks", "--count", "0", "--height", "8", "--width", "8", "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("count"));
}

#[test]
fn train_rejects_zero_epochs() {
    let dir = TempDir::new().unwrap();
    let masks = gen_masks(dir.path(), "m.pcmk", 0);
    let data = idx_dataset(dir.path(), 4);
    let out = pccnn(&["train", "--data", s(&data), "--masks", s(&masks), "--epochs", "0", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("epochs"));
}

fn train(dir: &Path, init: &Path, data: &Path, masks: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    ok(&[
        "train", "--init", s(init), "--data", s(data), "--masks", s(masks), "--epochs", "2", "--batch", "2",
        "--micro-batch", "1", "--lr", "0.01", "--seed", "9", "--out", s(&out),
    ]);
    out
}

#[test]
fn training_is_reproducible_and_logged() {
    let dir = TempDir::new().unwrap();
    let init = tiny_checkpoint(dir.path(), "init.pccn", 1, 2);
    let masks = gen_masks(dir.path(), "m.pcmk", 1);
    let data = idx_dataset(dir.path(), 4);
    let a = train(dir.path(), &init, &data, &masks, "a.pccn");
    let b = train(dir.path(), &init, &data, &masks, "b.pccn");
    assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap());
    assert_ne!(file_sha256(&a).unwrap(), file_sha256(&init).unwrap());
    let log = fs::read_to_string(dir.path().join("a.pccn.log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r["mean_joint"].as_f64().unwrap().is_finite()));
    let manifest = read_json(&dir.path().join("a.pccn.manifest.json"));
    assert_eq!(manifest["checkpoint_sha256"], file_sha256(&a).unwrap());
    assert_eq!(manifest["extra"]["images"], 4);
}

#[test]
fn train_rejects_data_of_another_shape() {
    let dir = TempDir::new().unwrap();
    let init = tiny_checkpoint(dir.path(), "init.pccn", 1, 2);
    let masks = gen_masks(dir.path(), "m.pcmk", 1);
    let sig = Signature::new(6, 6, 1, 256).unwrap();
    let data = dir.path().join("small-images-idx3-ubyte");
    fs::write(&data, encode_idx_images(&[Image::zeros(sig)]).unwrap()).unwrap();
    let out = pccnn(&["train", "--init", s(&init), "--data", s(&data), "--masks", s(&masks), "--epochs", "1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("signature"));
}

#[test]
fn sample_with_all_visible_mask_returns_input() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let image = checker(dir.path());
    let mask = pgm(dir.path(), "mask.pgm", &[255; SIDE * SIDE]);
    let out_dir = dir.path().join("out");
    ok(&["sample", "--ckpt", s(&ckpt), "--image", s(&image), "--mask", s(&mask), "--num", "3", "--out-dir", s(&out_dir)]);
    let ranking = read_json(&out_dir.join("ranking.json"));
    assert_eq!(ranking["hidden_pixels"], 0);
    for entry in ranking["samples"].as_array().unwrap() {
        assert_eq!(entry["total_log_likelihood"].as_f64().unwrap(), 0.0);
        let file = out_dir.join(entry["file"].as_str().unwrap());
        assert_eq!(fs::read(file).unwrap(), fs::read(&image).unwrap());
    }
}

#[test]
fn sample_is_seeded_and_sorted() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let image = checker(dir.path());
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        ok(&[
            "sample", "--ckpt", s(&ckpt), "--image", s(&image), "--mask-spec", "top", "--num", "5", "--seed", seed,
            "--out-dir", s(&out_dir),
        ]);
        out_dir
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    assert_eq!(dir_files(&a), dir_files(&b));
    assert_ne!(dir_files(&a), dir_files(&c));
    let ranking = read_json(&a.join("ranking.json"));
    let lls: Vec<f64> = ranking["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["total_log_likelihood"].as_f64().unwrap())
        .collect();
    assert_eq!(lls.len(), 5);
    assert!(lls.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(ranking["hidden_pixels"], SIDE * SIDE / 2);
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "sample");
    assert_eq!(manifest["checkpoint_sha256"], file_sha256(&ckpt).unwrap());
}

#[test]
fn sample_can_pick_from_a_mask_file() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let image = checker(dir.path());
    let masks = gen_masks(dir.path(), "m.pcmk", 2);
    let out_dir = dir.path().join("out");
    ok(&["sample", "--ckpt", s(&ckpt), "--image", s(&image), "--mask", s(&masks), "--mask-index", "5", "--num", "1", "--out-dir", s(&out_dir)]);
    let out = pccnn(&["sample", "--ckpt", s(&ckpt), "--image", s(&image), "--mask", s(&masks), "--mask-index", "6", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 1);
    let out = pccnn(&["sample", "--ckpt", s(&ckpt), "--image", s(&image), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 1, "a mask is required");
}

#[test]
fn missing_and_corrupt_inputs_name_the_path() {
    let dir = TempDir::new().unwrap();
    let image = checker(dir.path());
    let missing = dir.path().join("nowhere.pccn");
    let out = pccnn(&["sample", "--ckpt", s(&missing), "--image", s(&image), "--mask-spec", "top", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere.pccn"), "{}", stderr(&out));

    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.pccn");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let out = pccnn(&["sample", "--ckpt", s(&cut), "--image", s(&image), "--mask-spec", "top", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));

    let absent_image = dir.path().join("absent.pgm");
    let out = pccnn(&["sample", "--ckpt", s(&ckpt), "--image", s(&absent_image), "--mask-spec", "top", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.pgm"));
}

#[test]
fn probmap_writes_frames_per_stride() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let image = checker(dir.path());
    let out_dir = dir.path().join("pm");
    ok(&["probmap", "--ckpt", s(&ckpt), "--image", s(&image), "--mask-spec", "left", "--stride", "5", "--out-dir", s(&out_dir)]);
    let index = read_json(&out_dir.join("probmap.json"));
    let hidden = SIDE * SIDE / 2;
    assert_eq!(index["hidden_pixels"], hidden);
    let frames = index["frames"].as_array().unwrap();
    assert_eq!(frames.len(), hidden.div_ceil(5));
    assert_eq!(frames.last().unwrap()["sampled_pixels"], hidden);
    for f in frames {
        assert!(out_dir.join(f["file"].as_str().unwrap()).exists());
    }
    assert!(out_dir.join("initial.pgm").exists());
    assert!(out_dir.join("sample.pgm").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn probmap_rejects_zero_stride_and_non_binary_models() {
    let dir = TempDir::new().unwrap();
    let image = checker(dir.path());
    let binary = tiny_checkpoint(dir.path(), "b.pccn", 1, 2);
    let out = pccnn(&["probmap", "--ckpt", s(&binary), "--image", s(&image), "--mask-spec", "top", "--stride", "0", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("stride"));
    let gray = tiny_checkpoint(dir.path(), "g.pccn", 1, 8);
    let out = pccnn(&["probmap", "--ckpt", s(&gray), "--image", s(&image), "--mask-spec", "top", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn eval_and_rank_write_reports() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(dir.path(), "m.pccn", 1, 2);
    let data = idx_dataset(dir.path(), 3);
    let masks = gen_masks(dir.path(), "m.pcmk", 4);
    let report = dir.path().join("eval.json");
    let csv = dir.path().join("eval.csv");
    ok(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--count", "3", "--samples", "2", "--masks", s(&masks), "--out",
        s(&report), "--csv", s(&csv),
    ]);
    let json = read_json(&report);
    assert_eq!(json["images"].as_array().unwrap().len(), 3);
    assert!(json["mean"]["l1"].as_f64().unwrap() >= json["best"]["l1"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(dir.path().join("eval.json.manifest.json").exists());

    let rank = dir.path().join("rank.json");
    ok(&["rank", "--ckpt", s(&ckpt), "--data", s(&data), "--count", "3", "--samples", "4", "--seed", "2", "--out", s(&rank)]);
    let json = read_json(&rank);
    let ranks = json["ranks"].as_array().unwrap();
    assert_eq!(ranks.len(), 3);
    assert!(ranks.iter().all(|r| (1..=5).contains(&r.as_u64().unwrap())));
    let out = pccnn(&["rank", "--ckpt", s(&ckpt), "--data", s(&data), "--count", "0", "--out", s(&rank)]);
    assert_eq!(code(&out), 1);
}
