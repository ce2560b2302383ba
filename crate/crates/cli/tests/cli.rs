//! End-to-end tests driving the compiled `voxsynth` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxsynth::checkpoint::load_checkpoint;
use voxsynth::dataset::read_dataset;
use voxsynth::rvol::load_rvol;
use voxsynth::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxsynth"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("voxsynth_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn gen_phantom(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    run_ok(&[
        "phantom",
        "--n",
        &n.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    dir.join("manifest.csv")
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn phantom_writes_dataset_and_reruns_identically() {
    let dir = tmp("phantom_repro");
    let manifest = gen_phantom(&dir, 4, 16, 7);
    let ds = read_dataset(&manifest).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.labels(), vec![0, 1, 0, 1]);
    let first = dir_bytes(&dir);
    assert_eq!(first.len(), 9, "manifest plus four rvol pairs");

    gen_phantom(&dir, 4, 16, 7);
    assert_eq!(first, dir_bytes(&dir), "rerun with identical flags changed bytes");
}

#[test]
fn phantom_rejects_odd_strict_n() {
    let dir = tmp("phantom_odd");
    let err = run_err(&["phantom", "--n", "3", "--out", dir.to_str().unwrap()]);
    assert!(err.starts_with("ERROR:config:"), "stderr was: {err}");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tmp("train_missing");
    let err = run_err(&[
        "train",
        "--method",
        "unet",
        "--data",
        "/nonexistent/manifest.csv",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(err.starts_with("ERROR:io:"), "stderr was: {err}");
}

#[test]
fn strict_mode_rejects_extra_threads() {
    let dir = tmp("strict_threads");
    let err = run_err(&[
        "phantom",
        "--n",
        "2",
        "--size",
        "16",
        "--strict",
        "--threads",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(err.starts_with("ERROR:config:"), "stderr was: {err}");
}

#[test]
fn unknown_flags_are_config_errors() {
    let err = run_err(&["phantom", "--frobnicate"]);
    assert!(err.starts_with("ERROR:config:"), "stderr was: {err}");
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tmp("config_merge");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "n=4\nsize=16\nseed=9\n# comment\n").unwrap();
    let out_dir = dir.join("out");
    run_ok(&[
        "phantom",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let manifest = fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert!(manifest.contains("# n=6"), "flag should override config file");
    assert!(manifest.contains("# seed=9"), "config file should fill unset flags");
    assert_eq!(read_dataset(&out_dir.join("manifest.csv")).unwrap().len(), 6);
}

#[test]
fn train_unet_smoke_log_is_smoothly_decreasing() {
    let dir = tmp("train_unet");
    let manifest = gen_phantom(&dir.join("data"), 8, 16, 7);
    let out = dir.join("run");
    run_ok(&[
        "train",
        "--method",
        "unet",
        "--data",
        manifest.to_str().unwrap(),
        "--epochs",
        "3",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let lines = data_lines(&out.join("train.log"));
    assert_eq!(lines.len(), 3);
    let losses: Vec<f64> = lines
        .iter()
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            assert_eq!(fields.len(), 4, "log line {l:?}");
            fields[2].parse().unwrap()
        })
        .collect();
    assert!(
        losses.windows(2).all(|w| w[1] < w[0]),
        "epoch losses should decrease: {losses:?}"
    );
    assert!(out.join("model.unck").exists());
}

#[test]
fn train_is_reproducible_per_seed() {
    let dir = tmp("train_seeded");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 3);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "train",
            "--method",
            "unet",
            "--data",
            manifest.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
            "--strict",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(a.join("model.unck")).unwrap(),
        fs::read(b.join("model.unck")).unwrap(),
        "same seed and flags must give identical checkpoints"
    );
}

#[test]
fn train_resume_continues_from_stored_step() {
    let dir = tmp("train_resume");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 3);
    let out = dir.join("run");
    let base = [
        "train",
        "--method",
        "unet",
        "--data",
        manifest.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    let mut first = base.to_vec();
    first.extend(["--epochs", "2"]);
    run_ok(&first);
    let ckpt = out.join("model.unck");
    assert_eq!(load_checkpoint(&ckpt).unwrap().step, 6, "3 train subjects x 2 epochs");

    let ckpt_arg = ckpt.to_str().unwrap().to_string();
    let mut second = base.to_vec();
    second.extend(["--epochs", "3", "--resume", &ckpt_arg]);
    run_ok(&second);
    assert_eq!(load_checkpoint(&ckpt).unwrap().step, 9);
    let lines = data_lines(&out.join("train.log"));
    assert_eq!(lines.len(), 3, "resume should append the third epoch line");
    assert!(lines[2].starts_with("3,9,"), "got {:?}", lines[2]);
}

#[test]
fn synthesize_matches_library_forward_and_reruns_identically() {
    let dir = tmp("synth_unet");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 11);
    let run = dir.join("run");
    run_ok(&[
        "train",
        "--method",
        "unet",
        "--data",
        manifest.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]);
    let pred = dir.join("pred");
    let ckpt = run.join("model.unck");
    let args = [
        "synthesize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ];
    run_ok(&args);
    let first: Vec<u8> = fs::read(pred.join("s000_synth.rvol")).unwrap();
    run_ok(&args);
    assert_eq!(first, fs::read(pred.join("s000_synth.rvol")).unwrap());

    let model = load_checkpoint(run.join("model.unck")).unwrap();
    let ds = read_dataset(&manifest).unwrap();
    let want = model
        .predict(Tensor::from_volume(&ds.subjects[0].input))
        .unwrap()
        .to_volume(ds.subjects[0].input.spacing)
        .unwrap();
    let got = load_rvol(&pred.join("s000_synth.rvol")).unwrap();
    assert_eq!(got.data, want.data, "CLI output must equal the library forward pass");
    // After training, f32 sigmoid saturates to exactly 0.0/1.0 for large
    // logits, so the closed interval is the honest bound here.
    assert!(got.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(got.data.iter().any(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn synthesize_patch_writes_covered_interior() {
    let dir = tmp("synth_patch");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 13);
    let run = dir.join("run");
    run_ok(&[
        "train",
        "--method",
        "patch",
        "--data",
        manifest.to_str().unwrap(),
        "--epochs",
        "1",
        "--centers",
        "8",
        "--batch",
        "4",
        "--val-patches",
        "8",
        "--seed",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]);
    let pred = dir.join("pred");
    run_ok(&[
        "synthesize",
        "--checkpoint",
        run.join("model.unck").to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--slices",
    ]);
    let vol = load_rvol(&pred.join("s001_synth.rvol")).unwrap();
    let center = vol.at(8, 8, 8);
    assert!(center > 0.0 && center < 1.0, "covered center voxel, got {center}");
    assert_eq!(vol.at(0, 0, 0), 0.0, "outside the reconstructable interior");
    for view in ["axial", "sagittal"] {
        for role in ["input", "synth", "target"] {
            assert!(pred.join("slices").join(format!("s001_{view}_{role}.pgm")).exists());
        }
    }
}

#[test]
fn evaluate_perfect_predictions_flag_infinite_psnr() {
    let dir = tmp("eval_perfect");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 17);
    let ds = read_dataset(&manifest).unwrap();
    let pred = dir.join("pred");
    fs::create_dir_all(&pred).unwrap();
    for s in &ds.subjects {
        fs::copy(
            dir.join("data").join(format!("{}_target.rvol", s.id)),
            pred.join(format!("{}_synth.rvol", s.id)),
        )
        .unwrap();
    }
    let out = dir.join("eval");
    let stdout = String::from_utf8(
        run_ok(&[
            "evaluate",
            "--predictions",
            pred.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .stdout,
    )
    .unwrap();
    assert!(stdout.contains("mae:  0.000000"), "stdout: {stdout}");
    assert!(stdout.to_lowercase().contains("infinite"), "stdout: {stdout}");
    let rows = data_lines(&out.join("metrics.csv"));
    assert_eq!(rows[0], "subject,mae,psnr,ssim");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(f[3].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn evaluate_reports_missing_predictions() {
    let dir = tmp("eval_missing");
    let manifest = gen_phantom(&dir.join("data"), 4, 16, 19);
    let pred = dir.join("pred");
    fs::create_dir_all(&pred).unwrap();
    let err = run_err(&[
        "evaluate",
        "--predictions",
        pred.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert!(err.starts_with("ERROR:data:"), "stderr was: {err}");
    assert!(err.contains("s000"), "stderr was: {err}");
}

#[test]
fn classify_emits_the_four_column_table() {
    let dir = tmp("classify_table");
    let manifest = gen_phantom(&dir.join("data"), 24, 16, 23);
    let ds = read_dataset(&manifest).unwrap();
    let synth = dir.join("synth");
    fs::create_dir_all(&synth).unwrap();
    for s in &ds.subjects {
        fs::copy(
            dir.join("data").join(format!("{}_target.rvol", s.id)),
            synth.join(format!("{}_synth.rvol", s.id)),
        )
        .unwrap();
    }
    let out = dir.join("cls");
    run_ok(&[
        "classify",
        "--data",
        manifest.to_str().unwrap(),
        "--synth",
        synth.to_str().unwrap(),
        "--k",
        "4",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = data_lines(&out.join("classification.csv"));
    assert_eq!(rows[0], "metric,input_only,target_only,synth_only,joint,t,p");
    let mean: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(mean[0], "mean");
    for col in &mean[1..5] {
        let acc: f64 = col.parse().unwrap();
        assert!((0.0..=1.0).contains(&acc), "accuracy column {col}");
    }
    let p: f64 = mean[6].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let folds = data_lines(&out.join("folds.csv"));
    assert_eq!(folds.len(), 5, "header plus one row per round");
}
