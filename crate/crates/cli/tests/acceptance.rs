//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible under `--nocapture`). Heavy tests serialize on a shared lock so
//! wall-clock budgets hold on a single core.

use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use fmd_cli::commands::{self, EvalArgs, TrainArgs};
use fmd_cli::config::{Mode, RunConfig};
use fmd_cli::{checkpoint, csvio, dataset, pipeline};
use fmd_model::depth_gt::{self, DepthMap, FakeMask};
use fmd_model::gradchecks;
use fmd_model::losses::{self, PmseReduction};
use fmd_model::metrics;
use fmd_model::params::ParamSet;
use fmd_model::synth::{self, Split};
use fmd_model::{mda, rdia};
use fmd_tensor::{Graph, Rng, Tensor};

static HEAVY: Mutex<()> = Mutex::new(());

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fmd_acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_gradient_correctness() {
    let _lock = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let reports = gradchecks::run_all().unwrap();
    let elapsed = t0.elapsed();
    assert_eq!(reports.len(), gradchecks::COMPONENTS.len());
    for r in &reports {
        assert!(
            r.max_rel_err < 1e-4,
            "{} gradient error {} breaches 1e-4",
            r.name,
            r.max_rel_err
        );
    }
    let hit_target = reports.iter().filter(|r| r.max_rel_err < 1e-5).count();
    assert!(
        elapsed.as_secs() < 120,
        "gradcheck took {elapsed:?}, budget is 2 minutes"
    );
    println!(
        "PASS: gradient correctness ({}/{} under the 1e-5 target, max {:.2e}, {elapsed:?})",
        hit_target,
        reports.len(),
        reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_eq1_oracle_equivalence() {
    let mut rng = Rng::new(2024);
    for trial in 0..1000 {
        let h = 2 + rng.below(9);
        let w = 2 + rng.below(9);
        let lambda = (1 + rng.below(200)) as f32;
        let d_vals: Vec<f32> = (0..h * w).map(|_| rng.below(256) as f32).collect();
        let m_vals: Vec<f32> = (0..h * w).map(|_| rng.below(2) as f32).collect();
        let d = DepthMap::raw(h, w, d_vals.clone()).unwrap();
        let m = FakeMask::new(h, w, m_vals.clone()).unwrap();
        let g = depth_gt::ground_truth_depth(&d, &m, lambda).unwrap();

        for i in 0..h * w {
            // per-pixel scalar loop, bitwise
            let expect = if m_vals[i] == 1.0 {
                0.0
            } else {
                (d_vals[i] + lambda).min(255.0)
            };
            assert_eq!(
                g.values()[i].to_bits(),
                expect.to_bits(),
                "trial {trial} pixel {i} mismatch"
            );
            // three-band separation
            let v = g.values()[i];
            assert!(
                v == 0.0 || v == lambda || (v > lambda && v <= 255.0),
                "trial {trial}: value {v} outside the 0 / {lambda} / ({lambda},255] bands"
            );
        }
    }
    println!("PASS: ground-truth depth matches the per-pixel oracle bitwise on 1000 triples");
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_patch_supervision_oracle() {
    let mut rng = Rng::new(3030);
    let mut checked_196 = false;
    for trial in 0..100 {
        let (h, w, rows, cols) = if trial % 4 == 0 {
            (224, 224, 14, 14)
        } else {
            let rows = 1 + rng.below(7);
            let cols = 1 + rng.below(7);
            (
                (1 + rng.below(4)) * rows,
                (1 + rng.below(4)) * cols,
                rows,
                cols,
            )
        };
        let vals: Vec<f32> = (0..h * w).map(|_| rng.below(256) as f32).collect();
        let map = DepthMap::raw(h, w, vals).unwrap();
        let got = depth_gt::patch_average(&map, rows, cols).unwrap();
        if got.len() == 196 {
            checked_196 = true;
        }
        let (ph, pw) = (h / rows, w / cols);
        for py in 0..rows {
            for px in 0..cols {
                let mut s = 0.0f64;
                for dy in 0..ph {
                    for dx in 0..pw {
                        s += map.at(py * ph + dy, px * pw + dx) as f64;
                    }
                }
                let expect = s / (ph * pw) as f64 / 255.0;
                let v = got.values()[py * cols + px] as f64;
                assert!(
                    (v - expect).abs() <= 1e-6,
                    "trial {trial} patch ({py},{px}): {v} vs oracle {expect}"
                );
            }
        }
    }
    assert!(
        checked_196,
        "the 14x14 grid over 224x224 must be among the cases"
    );
    println!("PASS: patch averages match the double-loop oracle within 1e-6 on 100 maps");
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_attention_normalization() {
    let mut rng = Rng::new(4040);

    // MDA attention rows
    for _ in 0..100 {
        let g: Graph<f64> = Graph::new();
        let n = 2 + rng.below(8);
        let q = g.constant(Tensor::rand_uniform(&[n, 3], -3.0, 3.0, &mut rng));
        let k = g.constant(Tensor::rand_uniform(&[n, 3], -3.0, 3.0, &mut rng));
        let att = q
            .matmul(k.transpose(0, 1).unwrap())
            .unwrap()
            .scale(1.0 / 2.0)
            .unwrap()
            .softmax(1)
            .unwrap()
            .value();
        for r in 0..n {
            let s: f64 = (0..n).map(|c| att.at(&[r, c])).sum();
            assert!((s - 1.0).abs() <= 1e-6, "mda row sum {s}");
        }
    }

    // RDIA: temporal softmax, spatial softmax, and the token softmax
    let cfg = rdia::RdiaConfig {
        channels: 3,
        chi_mid: 2,
        cls_c1: 2,
        cls_c2: 2,
    };
    let params: ParamSet<f64> = rdia::init_params(&cfg, 44);
    for _ in 0..100 {
        let g: Graph<f64> = Graph::new();
        let vars = params.vars(&g, false);
        let (m, h, w) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
        let r_f = g.constant(Tensor::rand_uniform(&[3, m, h, w], -2.0, 2.0, &mut rng));
        let parts = rdia::residual_attention_parts(&vars.root().scope("ra_d"), r_f).unwrap();
        let t_soft = parts.temporal_soft.value();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..m).map(|t| t_soft.at(&[c, t, y, x])).sum();
                    assert!((s - 1.0).abs() <= 1e-6, "temporal sum {s}");
                }
            }
        }
        let s_soft = parts.spatial_soft.value();
        for c in 0..3 {
            for t in 0..m {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += s_soft.at(&[c, t, y, x]);
                    }
                }
                assert!((s - 1.0).abs() <= 1e-6, "spatial sum {s}");
            }
        }

        let att_rgb = g.constant(Tensor::rand_uniform(&[3, m, h, w], -1.0, 1.0, &mut rng));
        let att_d = g.constant(Tensor::rand_uniform(&[3, m, h, w], -1.0, 1.0, &mut rng));
        let f_en = g.constant(Tensor::rand_uniform(&[3, m + 1, h, w], -1.0, 1.0, &mut rng));
        let att_rd = rdia::rgb_depth_inconsistency(&vars.root(), att_rgb, att_d, f_en)
            .unwrap()
            .value();
        let total: f64 = att_rd.data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-6, "token softmax sum {total}");
    }
    println!(
        "PASS: every attention softmax normalizes to 1 +/- 1e-6 across 100 random inputs per site"
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_residual_identities() {
    let mut rng = Rng::new(5050);

    // zero-MLP MDA returns F_en = F_rgb exactly
    let mcfg = mda::MdaConfig {
        heads: 2,
        head_width: 3,
        scale: mda::AttentionScale::RgbChannels,
        mlp_ratio: 2,
    };
    let mut mparams: ParamSet<f64> = mda::init_params(&mcfg, 3, 4, 55);
    for (name, t) in mparams.entries_mut() {
        if name.starts_with("mlp.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let g: Graph<f64> = Graph::new();
    let mvars = mparams.vars(&g, false);
    let f_d = g.constant(Tensor::rand_uniform(&[3, 3, 3], -1.0, 1.0, &mut rng));
    let f_rgb = g.constant(Tensor::rand_uniform(&[4, 3, 3], -1.0, 1.0, &mut rng));
    let f_en = mda::forward(&g, &mvars.root(), &mcfg, f_d, f_rgb).unwrap();
    assert_eq!(
        f_en.value().data(),
        f_rgb.value().data(),
        "zero-MLP enhancement must be exact identity"
    );

    // zero-upsilon RDIA returns F' = F_en exactly
    let rcfg = rdia::RdiaConfig {
        channels: 3,
        chi_mid: 2,
        cls_c1: 2,
        cls_c2: 2,
    };
    let mut rparams: ParamSet<f64> = rdia::init_params(&rcfg, 56);
    for (name, t) in rparams.entries_mut() {
        if name.starts_with("upsilon.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let rvars = rparams.vars(&g, false);
    let f_en_stack = g.constant(Tensor::rand_uniform(&[3, 4, 3, 3], -1.0, 1.0, &mut rng));
    let att = g.constant(Tensor::rand_uniform(&[4, 3, 3], 0.0, 1.0, &mut rng));
    let out = rdia::enhance(&rvars.root(), att, f_en_stack).unwrap();
    assert_eq!(
        out.value().data(),
        f_en_stack.value().data(),
        "zero-upsilon update must be exact identity"
    );

    // constant sequences produce exactly zero residual stacks
    let seq = g.constant(Tensor::full(&[2, 6, 4, 4], 0.83));
    let r = rdia::frame_residuals(seq).unwrap().value();
    assert!(
        r.data().iter().all(|&v| v == 0.0),
        "constant sequence residuals must be exactly zero"
    );

    println!("PASS: residual identities hold exactly (zero-MLP fusion, zero-upsilon update, constant sequences)");
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_loss_algebra() {
    let mut rng = Rng::new(6060);
    let g: Graph<f64> = Graph::new();

    // SSIM(a,a) = 1, ssim_loss = 0, bitwise symmetric
    let a = g.constant(Tensor::rand_uniform(&[3, 9], 0.0, 1.0, &mut rng));
    let b = g.constant(Tensor::rand_uniform(&[3, 9], 0.0, 1.0, &mut rng));
    assert_eq!(
        losses::ssim(a, a, 1e-4, 1e-4)
            .unwrap()
            .value()
            .item()
            .unwrap(),
        1.0
    );
    assert_eq!(
        losses::ssim_loss(a, a).unwrap().value().item().unwrap(),
        0.0
    );
    let ab = losses::ssim_loss(a, b).unwrap().value().item().unwrap();
    let ba = losses::ssim_loss(b, a).unwrap().value().item().unwrap();
    assert_eq!(
        ab.to_bits(),
        ba.to_bits(),
        "ssim_loss must be bitwise symmetric"
    );

    // total_loss(1, 2, 3, alpha=beta=0.7) = 4.5
    let total = losses::total_loss(
        g.scalar(1.0),
        g.scalar(2.0),
        g.scalar(3.0),
        &losses::LossWeights {
            alpha: 0.7,
            beta: 0.7,
        },
    )
    .unwrap()
    .value()
    .item()
    .unwrap();
    assert!(
        (total - 4.5).abs() < 1e-12,
        "total_loss(1,2,3) = {total}, expected 4.5"
    );

    // patch MSE sum matches the brute-force double loop
    for _ in 0..20 {
        let batch = 1 + rng.below(5);
        let p = 1 + rng.below(30);
        let x = Tensor::<f64>::rand_uniform(&[batch, p], 0.0, 1.0, &mut rng);
        let y = Tensor::<f64>::rand_uniform(&[batch, p], 0.0, 1.0, &mut rng);
        let mut oracle = 0.0;
        for i in 0..batch {
            for j in 0..p {
                let d = x.at(&[i, j]) - y.at(&[i, j]);
                oracle += d * d;
            }
        }
        let got = losses::patch_mse(g.constant(x), g.constant(y), PmseReduction::Sum)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert!(
            (got - oracle).abs() < 1e-12,
            "patch mse {got} vs oracle {oracle}"
        );
    }
    println!("PASS: loss algebra (ssim identity/symmetry, weighted total 4.5, patch-mse oracle)");
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_auc_oracle() {
    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    let mut rng = Rng::new(7070);
    let mut done = 0;
    while done < 50 {
        let scores: Vec<f64> = (0..20).map(|_| rng.below(10) as f64 / 10.0).collect();
        let labels: Vec<u8> = (0..20).map(|_| rng.below(2) as u8).collect();
        if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
            continue;
        }
        let fast = metrics::auc(&scores, &labels).unwrap();
        let slow = pairwise(&scores, &labels);
        assert_eq!(fast, slow, "rank AUC {fast} != pairwise {slow}");
        done += 1;
    }
    assert_eq!(
        metrics::auc(&[0.8, 0.9, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(),
        1.0
    );
    assert_eq!(metrics::auc(&[0.4; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
    println!("PASS: rank-statistic AUC equals the pairwise oracle exactly on 50 random sets");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_synthetic_separation_experiment() {
    let _lock = HEAVY.lock().unwrap();
    let t0 = Instant::now();
    let dir = temp_dir("experiment");
    let data_dir = dir.join("data");

    // 400 train / 100 test at 56x56, n = 8
    let manifest = synth::make_dataset(500, 0.5, 42, 56, 8).unwrap();
    assert_eq!(manifest.split_items(Split::Train).len(), 400);
    assert_eq!(manifest.split_items(Split::Test).len(), 100);
    dataset::write_dataset(&data_dir, &manifest).unwrap();

    let mut config = RunConfig::default();
    config.data_dir = data_dir.clone();
    config.deterministic = true;
    assert!(config.epochs <= 15, "toy config must stay within 15 epochs");

    let mut auc = std::collections::BTreeMap::new();
    for mode in [Mode::Video, Mode::Image] {
        let mut cfg = config.clone();
        cfg.mode = mode;
        let cfg_path = dir.join(format!("{mode}.cfg"));
        fs::write(&cfg_path, cfg.canonical_text()).unwrap();
        let out = dir.join(format!("run_{mode}"));
        commands::train(&TrainArgs {
            config: cfg_path,
            out: out.clone(),
            seed: None,
            deterministic: true,
        })
        .unwrap();
        let ckpt = out
            .join("checkpoints")
            .join(format!("epoch_{:03}", cfg.epochs));
        let (acc, test_auc) = commands::evaluate(&EvalArgs {
            checkpoint: ckpt,
            split: Split::Test,
            out: out.join("eval"),
            data: None,
            config: None,
        })
        .unwrap();
        println!("  {mode}: held-out acc {acc:.4} auc {test_auc:.4}");
        auc.insert(mode.to_string(), test_auc);

        let scores = csvio::read_scores(&out.join("eval").join("scores.csv")).unwrap();
        assert_eq!(
            scores.len(),
            100,
            "scores row count must equal the test split size"
        );

        if mode == Mode::Video {
            // a converged run separates its own training data at least as
            // well as held-out data
            let (_, train_auc) = commands::evaluate(&EvalArgs {
                checkpoint: out
                    .join("checkpoints")
                    .join(format!("epoch_{:03}", cfg.epochs)),
                split: Split::Train,
                out: out.join("eval_train"),
                data: None,
                config: None,
            })
            .unwrap();
            assert!(
                train_auc >= test_auc,
                "train-split AUC {train_auc} below held-out {test_auc}"
            );
            // training total loss falls by at least 30% over the run
            let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
            let totals: Vec<f64> = metrics
                .lines()
                .skip(1)
                .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
                .collect();
            let (first, last) = (totals[0], *totals.last().unwrap());
            assert!(
                last <= 0.7 * first,
                "total loss only moved {first} -> {last} across the run"
            );
        }
    }

    let video = auc["video"];
    let image = auc["image"];
    let elapsed = t0.elapsed();
    assert!(video >= 0.90, "video-mode held-out AUC {video} below 0.90");
    assert!(
        video >= image - 0.02,
        "video AUC {video} fell more than 0.02 below image AUC {image}"
    );
    assert!(
        elapsed.as_secs() < 1800,
        "experiment took {elapsed:?}, budget is 30 minutes"
    );
    println!(
        "PASS: synthetic separation (video auc {video:.4} >= 0.90, video >= image {image:.4} - 0.02, {elapsed:?})"
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_ablation_harness() {
    let _lock = HEAVY.lock().unwrap();
    let dir = temp_dir("ablations");
    let data_dir = dir.join("data");
    let manifest = synth::make_dataset(20, 0.5, 77, 56, 4).unwrap();
    dataset::write_dataset(&data_dir, &manifest).unwrap();

    let mut base = RunConfig::default();
    base.data_dir = data_dir;
    base.frames = 4;
    base.epochs = 2;
    base.deterministic = true;

    for mode in [Mode::ConcatFusion, Mode::MsaOnly, Mode::Cnn3dOnly] {
        let mut cfg = base.clone();
        cfg.mode = mode;
        // ablation differs from the full config only in the swapped component
        let diffs: Vec<String> = {
            let mut full = base.clone();
            full.mode = Mode::Video;
            full.canonical_text()
                .lines()
                .zip(cfg.canonical_text().lines().map(String::from))
                .filter(|(a, b)| *a != b.as_str())
                .map(|(_, b)| b)
                .collect()
        };
        assert_eq!(
            diffs.len(),
            1,
            "{mode} config must differ from video in one key"
        );
        assert!(diffs[0].starts_with("mode ="));

        let cfg_path = dir.join(format!("{mode}.cfg"));
        fs::write(&cfg_path, cfg.canonical_text()).unwrap();
        let out = dir.join(format!("run_{mode}"));
        commands::train(&TrainArgs {
            config: cfg_path,
            out: out.clone(),
            seed: None,
            deterministic: true,
        })
        .unwrap();

        let metrics_text = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let mut lines = metrics_text.lines();
        assert_eq!(
            lines.next(),
            Some(csvio::METRICS_HEADER),
            "{mode} metrics header"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(
            rows.len(),
            base.epochs,
            "{mode} should log one row per epoch"
        );
    }
    println!(
        "PASS: concat-fusion, msa-only, and 3dcnn-only all train and emit comparable metrics CSVs"
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_determinism_and_checkpoint_roundtrip() {
    let _lock = HEAVY.lock().unwrap();
    let dir = temp_dir("determinism");
    let data_dir = dir.join("data");
    let manifest = synth::make_dataset(16, 0.5, 99, 56, 4).unwrap();
    dataset::write_dataset(&data_dir, &manifest).unwrap();

    let mut cfg = RunConfig::default();
    cfg.data_dir = data_dir;
    cfg.frames = 4;
    cfg.epochs = 2;
    cfg.deterministic = true;
    let cfg_path = dir.join("det.cfg");
    fs::write(&cfg_path, cfg.canonical_text()).unwrap();

    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("run_{run}"));
        commands::train(&TrainArgs {
            config: cfg_path.clone(),
            out: out.clone(),
            seed: None,
            deterministic: true,
        })
        .unwrap();
        commands::evaluate(&EvalArgs {
            checkpoint: out.join("checkpoints").join("epoch_002"),
            split: Split::Test,
            out: out.join("eval"),
            data: None,
            config: None,
        })
        .unwrap();
        artifacts.push((
            fs::read(out.join("metrics.csv")).unwrap(),
            fs::read(out.join("eval").join("scores.csv")).unwrap(),
        ));
    }
    assert_eq!(
        artifacts[0].0, artifacts[1].0,
        "metrics CSVs differ between identical runs"
    );
    assert_eq!(
        artifacts[0].1, artifacts[1].1,
        "scores CSVs differ between identical runs"
    );

    // checkpoint save -> load -> save round-trips evaluation bitwise
    let src = dir.join("run_a").join("checkpoints").join("epoch_002");
    let loaded = checkpoint::load(&src).unwrap();
    let copy = dir.join("ckpt_copy");
    let opt = loaded.optimizer.as_ref().unwrap();
    checkpoint::save(
        &copy,
        &loaded.config,
        &loaded.params,
        loaded.epoch,
        Some((&opt.active, opt.step, &opt.moments)),
    )
    .unwrap();
    commands::evaluate(&EvalArgs {
        checkpoint: copy,
        split: Split::Test,
        out: dir.join("eval_copy"),
        data: None,
        config: None,
    })
    .unwrap();
    let original = fs::read(dir.join("run_a").join("eval").join("scores.csv")).unwrap();
    let roundtrip = fs::read(dir.join("eval_copy").join("scores.csv")).unwrap();
    assert_eq!(
        original, roundtrip,
        "checkpoint round-trip changed evaluation scores"
    );

    // the loaded detector itself scores identically in memory
    let det = pipeline::Detector::from_params(&loaded.config, loaded.params.clone()).unwrap();
    assert_eq!(det.params.entries().len(), loaded.params.entries().len());

    println!(
        "PASS: seeded runs are bitwise identical and checkpoints round-trip evaluation bitwise"
    );
}
