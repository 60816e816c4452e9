//! Subcommand implementations and argument dispatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fmd_model::depth_gt::{self, DEFAULT_LAMBDA, DEFAULT_MASK_THRESHOLD};
use fmd_model::gradchecks;
use fmd_model::synth::{self, Split};
use fmd_tensor::{io, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::csvio::{self, MetricsRow};
use crate::dataset;
use crate::error::{validation, CliError, Result};
use crate::pipeline::{self, Detector, Trainer};

pub const USAGE: &str = "\
fmd <command> [flags]

commands:
  gen-data   --out <dir> [--count N] [--real-fraction F] [--seed N]
             [--resolution N] [--frames N]
  depth-gt   --frame <fdtn> --original <fdtn> --depth <fdtn> --out <dir>
             [--lambda N] [--threshold N] [--grid RxC]
  train      --config <path> --out <dir> [--seed N] [--deterministic]
  eval       --checkpoint <dir> --split <train|val|test> --out <dir>
             [--data <dir>] [--config <path>] [--deterministic]
  gradcheck  [--out <dir>]

exit codes: 0 ok, 1 validation error, 2 runtime error, 3 gradcheck failure";

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String], booleans: &[&str]) -> Result<Flags> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| validation(format!("expected a --flag, got '{arg}'")))?;
            if booleans.contains(&name) {
                values.insert(name.to_string(), "true".to_string());
                i += 1;
            } else {
                let value = args
                    .get(i + 1)
                    .ok_or_else(|| validation(format!("flag --{name} needs a value")))?;
                values.insert(name.to_string(), value.clone());
                i += 2;
            }
        }
        Ok(Flags { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| validation(format!("missing required flag --{name}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| validation(format!("bad value '{v}' for --{name}"))),
        }
    }

    fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                return Err(validation(format!("unknown flag --{key}")));
            }
        }
        Ok(())
    }
}

pub fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Ok(());
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "depth-gt" => cmd_depth_gt(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "--help" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(validation(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn cmd_gen_data(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &[])?;
    flags.check_known(&[
        "out",
        "count",
        "real-fraction",
        "seed",
        "resolution",
        "frames",
    ])?;
    let out = PathBuf::from(flags.require("out")?);
    let count: usize = flags.parse_num("count", 500)?;
    let real_fraction: f64 = flags.parse_num("real-fraction", 0.5)?;
    let seed: u64 = flags.parse_num("seed", 42u64)?;
    let resolution: usize = flags.parse_num("resolution", 56)?;
    let frames: usize = flags.parse_num("frames", 8)?;

    let manifest = synth::make_dataset(count, real_fraction, seed, resolution, frames)?;
    dataset::write_dataset(&out, &manifest)?;
    println!(
        "wrote {} items ({} train / {} val / {} test) to {}",
        manifest.items.len(),
        manifest.split_items(Split::Train).len(),
        manifest.split_items(Split::Val).len(),
        manifest.split_items(Split::Test).len(),
        out.display()
    );
    Ok(())
}

fn cmd_depth_gt(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &[])?;
    flags.check_known(&[
        "frame",
        "original",
        "depth",
        "out",
        "lambda",
        "threshold",
        "grid",
    ])?;
    let frame: Tensor<f32> = io::load_tensor(Path::new(flags.require("frame")?))?;
    let original: Tensor<f32> = io::load_tensor(Path::new(flags.require("original")?))?;
    let depth_t: Tensor<f32> = io::load_tensor(Path::new(flags.require("depth")?))?;
    let out = PathBuf::from(flags.require("out")?);
    let lambda: f32 = flags.parse_num("lambda", DEFAULT_LAMBDA)?;
    let threshold: f32 = flags.parse_num("threshold", DEFAULT_MASK_THRESHOLD)?;
    let grid = match flags.get("grid") {
        None => (14, 14),
        Some(v) => {
            let (r, c) = v
                .split_once('x')
                .ok_or_else(|| validation(format!("--grid wants RxC, got '{v}'")))?;
            (
                r.parse()
                    .map_err(|_| validation("bad grid rows".to_string()))?,
                c.parse()
                    .map_err(|_| validation("bad grid cols".to_string()))?,
            )
        }
    };

    let mask = depth_gt::compute_fake_mask(&frame, &original, threshold)?;
    let depth = depth_gt::DepthMap::raw_from_tensor(&depth_t)?;
    let gt = depth_gt::ground_truth_depth(&depth, &mask, lambda)?;
    let patches = depth_gt::patch_average(&gt, grid.0, grid.1)?;

    fs::create_dir_all(&out)?;
    io::save_tensor(&out.join("mask.fdtn"), &mask.to_tensor())?;
    io::save_tensor(&out.join("gt_depth.fdtn"), &gt.to_tensor())?;
    io::save_tensor(&out.join("patch_depth.fdtn"), &patches.to_tensor())?;
    println!(
        "wrote mask.fdtn, gt_depth.fdtn, patch_depth.fdtn ({}x{} grid) to {}",
        grid.0,
        grid.1,
        out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["deterministic"])?;
    flags.check_known(&["config", "out", "seed", "deterministic"])?;
    let train_args = TrainArgs {
        config: PathBuf::from(flags.require("config")?),
        out: PathBuf::from(flags.require("out")?),
        seed: match flags.get("seed") {
            None => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| validation(format!("bad value '{v}' for --seed")))?,
            ),
        },
        deterministic: flags.get("deterministic").is_some(),
    };
    let summary = train(&train_args)?;
    println!("{summary}");
    Ok(())
}

/// Library entry for training; returns a human-readable summary.
pub fn train(args: &TrainArgs) -> Result<String> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| validation(format!("cannot read config {:?}: {e}", args.config)))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.deterministic {
        config.deterministic = true;
    }
    config.validate()?;
    if !config.data_dir.exists() {
        return Err(validation(format!(
            "data_dir {:?} does not exist",
            config.data_dir
        )));
    }
    fs::create_dir_all(&args.out)?;

    let manifest = dataset::read_manifest(&config.data_dir)?;
    let has_val = manifest.items.iter().any(|m| m.split == Split::Val);
    let train_items = pipeline::load_prepared_split(&config, &config.data_dir, Split::Train)?;
    let val_items = if has_val {
        Some(pipeline::load_prepared_split(
            &config,
            &config.data_dir,
            Split::Val,
        )?)
    } else {
        None
    };

    let det = Detector::init(&config)?;
    let mut trainer = Trainer::new(det);
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut last_ckpt = PathBuf::new();
    for epoch in 1..=config.epochs {
        let (stats, batches) = pipeline::run_epoch(&mut trainer, &train_items, epoch, config.seed)?;
        rows.push(stats.row(epoch, "train", batches)?);
        if let Some(val) = &val_items {
            let outcome = pipeline::evaluate_split(&trainer.det, val)?;
            rows.push(outcome.stats.row(epoch, "val", outcome.batches)?);
        }
        csvio::write_metrics(&args.out.join("metrics.csv"), &rows)?;

        let ckpt_dir = args
            .out
            .join("checkpoints")
            .join(format!("epoch_{epoch:03}"));
        let active = trainer
            .active_params()
            .ok_or_else(|| validation("no training step ran".to_string()))?
            .to_vec();
        checkpoint::save(
            &ckpt_dir,
            &config,
            &trainer.det.params,
            epoch,
            Some((
                &active,
                trainer.adam().step_count(),
                trainer.adam().moments(),
            )),
        )?;
        last_ckpt = ckpt_dir;
    }

    fs::write(
        args.out.join("run.txt"),
        format!(
            "config_hash={}\nseed={}\nmode={}\ndeterministic={}\nepochs={}\n",
            config.hash(),
            config.seed,
            config.mode,
            config.deterministic,
            config.epochs
        ),
    )?;
    fs::write(args.out.join("config.txt"), config.canonical_text())?;

    let last = rows
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .expect("at least one epoch");
    Ok(format!(
        "trained {} epochs (mode {}); final train acc {:.4} auc {:.4}; checkpoint {}",
        config.epochs,
        config.mode,
        last.acc,
        last.auc,
        last_ckpt.display()
    ))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &["deterministic"])?;
    flags.check_known(&[
        "checkpoint",
        "split",
        "out",
        "data",
        "config",
        "deterministic",
    ])?;
    let eval_args = EvalArgs {
        checkpoint: PathBuf::from(flags.require("checkpoint")?),
        split: Split::parse(flags.require("split")?)?,
        out: PathBuf::from(flags.require("out")?),
        data: flags.get("data").map(PathBuf::from),
        config: flags.get("config").map(PathBuf::from),
    };
    let (acc, auc) = evaluate(&eval_args)?;
    println!("split {}: acc {acc:.4} auc {auc:.4}", eval_args.split);
    Ok(())
}

/// Library entry for evaluation; returns (acc, auc).
pub fn evaluate(args: &EvalArgs) -> Result<(f64, f64)> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    if let Some(config_path) = &args.config {
        let text = fs::read_to_string(config_path)
            .map_err(|e| validation(format!("cannot read config {config_path:?}: {e}")))?;
        let user = RunConfig::parse(&text)?;
        checkpoint::check_compatible(&user, &ckpt)?;
    }
    let mut config = ckpt.config.clone();
    if let Some(data) = &args.data {
        config.data_dir = data.clone();
    }
    let det = Detector::from_params(&config, ckpt.params)?;
    let items = pipeline::load_prepared_split(&config, &config.data_dir, args.split)?;
    let outcome = pipeline::evaluate_split(&det, &items)?;

    fs::create_dir_all(&args.out)?;
    csvio::write_scores(&args.out.join("scores.csv"), &outcome.rows)?;
    let row = outcome
        .stats
        .row(ckpt.epoch, &args.split.to_string(), outcome.batches)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut rows = Vec::new();
    if metrics_path.exists() {
        // keep prior rows; the file is tiny
        let text = fs::read_to_string(&metrics_path)?;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            rows.push(line.to_string());
        }
    }
    rows.push(row.to_line());
    let mut out = String::from(csvio::METRICS_HEADER);
    out.push('\n');
    for r in &rows {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(&metrics_path, out)?;
    Ok((row.acc, row.auc))
}

fn cmd_gradcheck(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &[])?;
    flags.check_known(&["out"])?;
    let reports = gradchecks::run_all()?;
    let text = gradcheck_report_text(&reports);
    print!("{text}");
    if let Some(out) = flags.get("out") {
        let dir = PathBuf::from(out);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}

pub fn gradcheck_report_text(reports: &[gradchecks::ComponentReport]) -> String {
    let mut text = format!("{:<16} {:>14}  status\n", "component", "max_rel_err");
    for r in reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{:<16} {:>14.3e}  {status}\n",
            r.name, r.max_rel_err
        ));
    }
    text
}
