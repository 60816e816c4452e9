//! Binary-level behavior: flags, exit codes, and the file formats each
//! subcommand reads and writes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fmd_model::depth_gt;
use fmd_tensor::{io, Rng, Tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmd"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fmd_cli_surface").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn no_args_prints_usage_and_succeeds() {
    let out = bin().output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn unknown_command_is_a_validation_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let out = bin()
        .args(["gen-data", "--out", "/tmp/x", "--bogus", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn train_with_missing_config_exits_1() {
    let out = bin()
        .args([
            "train",
            "--config",
            "/nonexistent/x.cfg",
            "--out",
            "/tmp/fmd_nope",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_with_missing_data_dir_exits_1() {
    let dir = temp_dir("missing_data");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "data_dir = /definitely/not/here\n").unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_twice_is_bitwise_identical() {
    let dir = temp_dir("gen_twice");
    for sub in ["a", "b"] {
        let status = bin()
            .args([
                "gen-data",
                "--out",
                dir.join(sub).to_str().unwrap(),
                "--count",
                "12",
                "--seed",
                "5",
                "--frames",
                "3",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let manifest_a = fs::read(dir.join("a").join("manifest.txt")).unwrap();
    let manifest_b = fs::read(dir.join("b").join("manifest.txt")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    // item files bitwise identical too
    for entry in fs::read_dir(dir.join("a").join("items")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        let other = dir.join("b").join("items").join(name);
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(&other).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn depth_gt_subcommand_writes_expected_tensors() {
    let dir = temp_dir("depth_gt");
    let mut rng = Rng::new(8);
    let original = Tensor::<f32>::from_vec(
        vec![3, 8, 8],
        (0..192).map(|_| rng.below(256) as f32).collect(),
    )
    .unwrap();
    let mut frame = original.clone();
    // manipulate a 2x2 block heavily
    for y in 2..4 {
        for x in 2..4 {
            frame.set(&[0, y, x], (frame.at(&[0, y, x]) + 120.0).min(255.0));
        }
    }
    let depth =
        Tensor::<f32>::from_vec(vec![8, 8], (0..64).map(|_| rng.below(200) as f32).collect())
            .unwrap();

    io::save_tensor(&dir.join("frame.fdtn"), &frame).unwrap();
    io::save_tensor(&dir.join("original.fdtn"), &original).unwrap();
    io::save_tensor(&dir.join("depth.fdtn"), &depth).unwrap();

    let out_dir = dir.join("out");
    let status = bin()
        .args([
            "depth-gt",
            "--frame",
            dir.join("frame.fdtn").to_str().unwrap(),
            "--original",
            dir.join("original.fdtn").to_str().unwrap(),
            "--depth",
            dir.join("depth.fdtn").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--grid",
            "4x4",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let mask: Tensor<f32> = io::load_tensor(&out_dir.join("mask.fdtn")).unwrap();
    let gt: Tensor<f32> = io::load_tensor(&out_dir.join("gt_depth.fdtn")).unwrap();
    let patches: Tensor<f32> = io::load_tensor(&out_dir.join("patch_depth.fdtn")).unwrap();
    assert_eq!(mask.shape(), &[8, 8]);
    assert_eq!(gt.shape(), &[8, 8]);
    assert_eq!(patches.shape(), &[16]);

    // agree with the library path
    let lib_mask = depth_gt::compute_fake_mask(&frame, &original, 15.0).unwrap();
    assert_eq!(mask.data(), lib_mask.to_tensor().data());
    assert_eq!(mask.at(&[2, 2]), 1.0);
    assert_eq!(mask.at(&[0, 0]), 0.0);
}

#[test]
fn gradcheck_subcommand_exits_zero_and_reports_every_component() {
    let dir = temp_dir("gradcheck");
    let out = bin()
        .args(["gradcheck", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    for component in fmd_model::gradchecks::COMPONENTS {
        assert!(
            report.contains(component),
            "report missing {component}:\n{report}"
        );
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ok"));
}

#[test]
fn eval_rejects_mismatched_config_hash() {
    // a checkpoint trained under one config must refuse an eval that pins a
    // different config
    let dir = temp_dir("hash_mismatch");
    let data = dir.join("data");
    let manifest = fmd_model::synth::make_dataset(10, 0.5, 3, 56, 2).unwrap();
    fmd_cli::dataset::write_dataset(&data, &manifest).unwrap();

    let mut cfg = fmd_cli::config::RunConfig::default();
    cfg.data_dir = data;
    cfg.frames = 2;
    cfg.epochs = 1;
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, cfg.canonical_text()).unwrap();
    let out_dir = dir.join("out");
    fmd_cli::commands::train(&fmd_cli::commands::TrainArgs {
        config: cfg_path.clone(),
        out: out_dir.clone(),
        seed: None,
        deterministic: true,
    })
    .unwrap();

    let mut other = cfg.clone();
    other.seed = 777;
    let other_path = dir.join("other.cfg");
    fs::write(&other_path, other.canonical_text()).unwrap();

    let status = bin()
        .args([
            "eval",
            "--checkpoint",
            out_dir
                .join("checkpoints")
                .join("epoch_001")
                .to_str()
                .unwrap(),
            "--split",
            "test",
            "--out",
            dir.join("eval").to_str().unwrap(),
            "--config",
            other_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
}

#[test]
fn fdtn_reader_rejects_corrupt_magic_via_cli() {
    let dir = temp_dir("bad_magic");
    fs::write(dir.join("bad.fdtn"), b"NOPE\x01\x00garbage").unwrap();
    let out = bin()
        .args([
            "depth-gt",
            "--frame",
            dir.join("bad.fdtn").to_str().unwrap(),
            "--original",
            dir.join("bad.fdtn").to_str().unwrap(),
            "--depth",
            dir.join("bad.fdtn").to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exists(p: &Path) -> bool {
    p.exists()
}

#[test]
fn run_artifacts_include_manifest_and_config() {
    let dir = temp_dir("artifacts");
    let data = dir.join("data");
    let manifest = fmd_model::synth::make_dataset(10, 0.5, 4, 56, 2).unwrap();
    fmd_cli::dataset::write_dataset(&data, &manifest).unwrap();
    let mut cfg = fmd_cli::config::RunConfig::default();
    cfg.data_dir = data;
    cfg.frames = 2;
    cfg.epochs = 1;
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, cfg.canonical_text()).unwrap();
    let out_dir = dir.join("out");
    fmd_cli::commands::train(&fmd_cli::commands::TrainArgs {
        config: cfg_path,
        out: out_dir.clone(),
        seed: None,
        deterministic: true,
    })
    .unwrap();
    assert!(exists(&out_dir.join("run.txt")));
    assert!(exists(&out_dir.join("config.txt")));
    assert!(exists(&out_dir.join("metrics.csv")));
    assert!(exists(
        &out_dir
            .join("checkpoints")
            .join("epoch_001")
            .join("params")
            .join("manifest.txt")
    ));
    let run = fs::read_to_string(out_dir.join("run.txt")).unwrap();
    assert!(run.contains("config_hash="));
}
