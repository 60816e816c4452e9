//! Detector assembly, per-mode forward wiring, the training loop, and
//! evaluation.
//!
//! Per step: the depth transformer runs per frame (predictions + features),
//! the backbone stem extracts RGB features, the fusion stage enhances them
//! under depth guidance, and sequence-level modes push the enhanced stack
//! through the cross-frame attention and 3D classifier while image mode
//! classifies per frame and averages probabilities. One joint loss, one
//! Adam step.

use std::path::Path;

use fmd_model::backbone::BackboneConfig;
use fmd_model::depth_gt::{self, DEFAULT_LAMBDA};
use fmd_model::fdmt::FdmtConfig;
use fmd_model::losses::{self, PmseReduction};
use fmd_model::mda::MdaConfig;
use fmd_model::metrics;
use fmd_model::params::{ParamSet, VarSet};
use fmd_model::rdia::RdiaConfig;
use fmd_model::synth::{Label, LabeledSequence, Split};
use fmd_model::{backbone, fdmt, mda, rdia};
use fmd_tensor::{derive_seed, Adam, Graph, Rng, Tensor, Var};

use crate::config::{Mode, RunConfig};
use crate::csvio::MetricsRow;
use crate::dataset::{self, LoadedItem};
use crate::error::{validation, Result};

pub struct Detector {
    pub config: RunConfig,
    pub fdmt_cfg: FdmtConfig,
    pub backbone_cfg: BackboneConfig,
    pub mda_cfg: MdaConfig,
    pub rdia_cfg: RdiaConfig,
    pub params: ParamSet<f32>,
}

impl Detector {
    /// Seeded component initialization; component streams derive from the
    /// master seed by fixed labels, so runs in different modes share the
    /// initializations of the components they have in common.
    pub fn init(config: &RunConfig) -> Result<Detector> {
        config.validate()?;
        let fdmt_cfg = config.fdmt_config()?;
        let backbone_cfg = config.backbone_config()?;
        let mda_cfg = config.mda_config()?;
        let rdia_cfg = config.rdia_config();
        let hook_c = backbone_cfg.hook_channels();
        let seed = config.seed;

        let mut params = ParamSet::new();
        params.adopt(
            "fdmt",
            fdmt::init_params(&fdmt_cfg, derive_seed(seed, "fdmt")),
        );
        params.adopt(
            "backbone",
            backbone::init_params(&backbone_cfg, derive_seed(seed, "backbone")),
        );
        let fusion_seed = derive_seed(seed, "fusion");
        match config.mode {
            Mode::ConcatFusion => {
                params.adopt(
                    "fusion",
                    mda::init_concat_params(fdmt_cfg.embed, hook_c, fusion_seed),
                );
            }
            Mode::MsaOnly => {
                params.adopt(
                    "fusion",
                    mda::init_params(&mda_cfg, hook_c, hook_c, fusion_seed),
                );
            }
            _ => {
                params.adopt(
                    "fusion",
                    mda::init_params(&mda_cfg, fdmt_cfg.embed, hook_c, fusion_seed),
                );
            }
        }
        if config.mode.is_sequence_level() {
            params.adopt(
                "rdia",
                rdia::init_params(&rdia_cfg, derive_seed(seed, "rdia")),
            );
        }
        Ok(Detector {
            config: config.clone(),
            fdmt_cfg,
            backbone_cfg,
            mda_cfg,
            rdia_cfg,
            params,
        })
    }

    pub fn from_params(config: &RunConfig, params: ParamSet<f32>) -> Result<Detector> {
        let mut det = Detector::init(config)?;
        if det.params.len() != params.len() {
            return Err(validation(format!(
                "checkpoint holds {} parameters, config implies {}",
                params.len(),
                det.params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in det.params.entries().iter().zip(params.entries()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(validation(format!(
                    "checkpoint parameter '{n2}' does not match config expectation '{n1}'"
                )));
            }
        }
        det.params = params;
        Ok(det)
    }
}

/// Per-item tensors prepared once: supervision targets and the frame stack
/// pooled to the hook resolution.
pub struct PreparedItem {
    pub id: String,
    pub label: Label,
    pub seq: LabeledSequence,
    /// `[n, P]` patch supervision targets.
    pub targets: Tensor<f32>,
    /// `[3, n, h, w]` scaled frames at hook resolution.
    pub pooled_rgb: Tensor<f32>,
}

pub fn prepare_item(
    item: LoadedItem,
    grid: (usize, usize),
    hook_hw: (usize, usize),
) -> Result<PreparedItem> {
    let seq = item.seq;
    let n = seq.num_frames();
    let p = grid.0 * grid.1;
    let mut targets = Vec::with_capacity(n * p);
    for t in 0..n {
        let g = depth_gt::ground_truth_depth(&seq.depth_map(t), &seq.mask(t), DEFAULT_LAMBDA)?;
        targets.extend_from_slice(depth_gt::patch_average(&g, grid.0, grid.1)?.values());
    }
    let pooled_rgb = pool_frames(&seq, hook_hw)?;
    Ok(PreparedItem {
        id: item.meta.id,
        label: item.meta.label,
        seq,
        targets: Tensor::from_vec(vec![n, p], targets)?,
        pooled_rgb,
    })
}

/// Average-pools the scaled frame stack to the feature resolution.
fn pool_frames(seq: &LabeledSequence, out_hw: (usize, usize)) -> Result<Tensor<f32>> {
    let n = seq.num_frames();
    let (h, w) = seq.resolution();
    let (oh, ow) = out_hw;
    if h % oh != 0 || w % ow != 0 {
        return Err(validation(format!(
            "frame {h}x{w} not divisible by hook resolution {oh}x{ow}"
        )));
    }
    let (fy, fx) = (h / oh, w / ow);
    let fd = seq.frames.data();
    let mut out = vec![0.0f32; 3 * n * oh * ow];
    let inv = 1.0 / (255.0 * (fy * fx) as f32);
    for c in 0..3 {
        for t in 0..n {
            let src = (c * n + t) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0f32;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += fd[src + (y * fy + dy) * w + x * fx + dx];
                        }
                    }
                    out[((c * n + t) * oh + y) * ow + x] = s * inv;
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![3, n, oh, ow], out)?)
}

pub struct SequenceForward<'g> {
    /// `[1, 2]` sequence logits, or `[n, 2]` per-frame logits in image mode.
    pub logits: Var<'g, f32>,
    /// `[n, P]` stacked depth predictions.
    pub preds: Var<'g, f32>,
    /// Probability assigned to the fake class.
    pub score: f64,
}

pub fn forward_sequence<'g>(
    g: &'g Graph<f32>,
    vars: &VarSet<'g, f32>,
    det: &Detector,
    item: &PreparedItem,
) -> Result<SequenceForward<'g>> {
    let n = item.seq.num_frames();
    let hook_hw = det.backbone_cfg.hook_hw();
    let hook_c = det.backbone_cfg.hook_channels();
    let p = det.fdmt_cfg.patches();
    let fvars = vars.scope("fdmt");
    let bvars = vars.scope("backbone");
    let uvars = vars.scope("fusion");

    let mut preds = Vec::with_capacity(n);
    let mut f_en_slices = Vec::with_capacity(n);
    let mut depth_slices = Vec::with_capacity(n);
    let mut frame_logits = Vec::with_capacity(n);

    for t in 0..n {
        let frame = item.seq.frame(t).map(|v| v / 255.0);
        let out = fdmt::forward(g, &fvars, &det.fdmt_cfg, &frame)?;
        preds.push(out.depth_pred.reshape(&[1, p])?);

        let f_rgb = backbone::stem(g, &bvars, &det.backbone_cfg, &frame)?;
        let f_en = match det.config.mode {
            Mode::MsaOnly => mda::forward_msa(g, &uvars, &det.mda_cfg, f_rgb)?,
            Mode::ConcatFusion => {
                let f_d =
                    fdmt::depth_feature_to_grid(out.depth_feature, det.fdmt_cfg.grid, hook_hw)?;
                mda::concat_fusion_baseline(g, &uvars, f_d, f_rgb)?
            }
            _ => {
                let f_d =
                    fdmt::depth_feature_to_grid(out.depth_feature, det.fdmt_cfg.grid, hook_hw)?;
                mda::forward(g, &uvars, &det.mda_cfg, f_d, f_rgb)?
            }
        };

        if det.config.mode.is_sequence_level() {
            f_en_slices.push(f_en.reshape(&[hook_c, 1, hook_hw.0, hook_hw.1])?);
            let map = fdmt::depth_pred_to_map(out.depth_pred, det.fdmt_cfg.grid, hook_hw)?;
            depth_slices.push(map.reshape(&[1, 1, hook_hw.0, hook_hw.1])?);
        } else {
            frame_logits.push(backbone::head(&bvars, &det.backbone_cfg, f_en)?.reshape(&[1, 2])?);
        }
    }

    let preds = g.concat(&preds, 0)?;
    let (logits, score) = if det.config.mode.is_sequence_level() {
        let f_en_stack = g.concat(&f_en_slices, 1)?;
        let logits = if det.config.mode.uses_rdia_attention() {
            let depth_stack = g.concat(&depth_slices, 1)?;
            let rgb_stack = g.constant(item.pooled_rgb.clone());
            let rvars = vars.scope("rdia");
            rdia::forward(g, &rvars, &det.rdia_cfg, rgb_stack, depth_stack, f_en_stack)?.logits
        } else {
            // plain 3D CNN comparator: classifier on the raw enhanced stack
            rdia::classify_sequence(&vars.scope("rdia"), &det.rdia_cfg, f_en_stack)?
        };
        let batched = logits.reshape(&[1, 2])?;
        let prob = batched.softmax(1)?.value();
        (batched, prob.at(&[0, 1]) as f64)
    } else {
        let batched = g.concat(&frame_logits, 0)?;
        let prob = batched.softmax(1)?.value();
        let mean_fake: f32 = (0..n).map(|t| prob.at(&[t, 1])).sum::<f32>() / n as f32;
        (batched, mean_fake as f64)
    };

    Ok(SequenceForward {
        logits,
        preds,
        score,
    })
}

fn sequence_labels(mode: Mode, label: Label, frames: usize) -> Vec<usize> {
    let l = label.as_u8() as usize;
    if mode.is_sequence_level() {
        vec![l]
    } else {
        vec![l; frames]
    }
}

pub struct EpochStats {
    pub l_c: f64,
    pub l_ssim: f64,
    pub l_pmse: f64,
    pub total: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EpochStats {
    fn new() -> EpochStats {
        EpochStats {
            l_c: 0.0,
            l_ssim: 0.0,
            l_pmse: 0.0,
            total: 0.0,
            scores: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn row(&self, epoch: usize, split: &str, batches: usize) -> Result<MetricsRow> {
        let k = batches.max(1) as f64;
        Ok(MetricsRow {
            epoch,
            split: split.to_string(),
            acc: metrics::acc(&self.scores, &self.labels, 0.5)?,
            auc: metrics::auc(&self.scores, &self.labels)?,
            l_c: self.l_c / k,
            l_ssim: self.l_ssim / k,
            l_pmse: self.l_pmse / k,
            total: self.total / k,
        })
    }
}

pub struct Trainer {
    pub det: Detector,
    adam: Adam<f32>,
    active: Option<Vec<String>>,
}

impl Trainer {
    pub fn new(det: Detector) -> Trainer {
        let adam = Adam::new(det.config.adam_config());
        Trainer {
            det,
            adam,
            active: None,
        }
    }

    pub fn with_optimizer_state(
        det: Detector,
        step: u64,
        active: Vec<String>,
        moments: Vec<(Tensor<f32>, Tensor<f32>)>,
    ) -> Trainer {
        let mut adam = Adam::new(det.config.adam_config());
        adam.restore(step, moments);
        Trainer {
            det,
            adam,
            active: Some(active),
        }
    }

    pub fn adam(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn active_params(&self) -> Option<&[String]> {
        self.active.as_deref()
    }

    /// One optimizer step over a batch; returns (l_c, l_ssim, l_pmse, total)
    /// plus per-sequence scores.
    pub fn train_step(
        &mut self,
        batch: &[&PreparedItem],
    ) -> Result<(f32, f32, f32, f32, Vec<f64>)> {
        let g: Graph<f32> = Graph::new();
        let vars = self.det.params.vars(&g, true);

        let mut pred_stacks = Vec::new();
        let mut target_stacks = Vec::new();
        let mut ce_terms = Vec::new();
        let mut scores = Vec::new();
        for item in batch {
            let fwd = forward_sequence(&g, &vars, &self.det, item)?;
            let labels = sequence_labels(self.det.config.mode, item.label, item.seq.num_frames());
            ce_terms.push(losses::cross_entropy(&g, fwd.logits, &labels)?);
            pred_stacks.push(fwd.preds);
            target_stacks.push(g.constant(item.targets.clone()));
            scores.push(fwd.score);
        }
        let mut l_c = ce_terms[0];
        for term in &ce_terms[1..] {
            l_c = l_c.add(*term)?;
        }
        let l_c = l_c.scale(1.0 / ce_terms.len() as f64)?;

        let preds = g.concat(&pred_stacks, 0)?;
        let targets = g.concat(&target_stacks, 0)?;
        let l_ssim = losses::ssim_loss(preds, targets)?;
        let reduction = if self.det.config.pmse_per_sample {
            PmseReduction::MeanPerSample
        } else {
            PmseReduction::Sum
        };
        let l_pmse = losses::patch_mse(preds, targets, reduction)?;
        let total = losses::total_loss(l_c, l_ssim, l_pmse, &self.det.config.loss_weights())?;

        g.backward(total)?;

        // the active set is fixed by the mode; pinned on the first step
        let grads: Vec<(String, Option<Tensor<f32>>)> = vars
            .entries()
            .iter()
            .map(|(n, v)| (n.clone(), v.grad()))
            .collect();
        if self.active.is_none() {
            self.active = Some(
                grads
                    .iter()
                    .filter(|(_, g)| g.is_some())
                    .map(|(n, _)| n.clone())
                    .collect(),
            );
        }
        let active = self.active.as_ref().expect("just set");
        let mut grad_list = Vec::with_capacity(active.len());
        for name in active {
            let g = grads
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, g)| g.clone())
                .ok_or_else(|| {
                    validation(format!("parameter '{name}' lost its gradient mid-run"))
                })?;
            grad_list.push(g);
        }
        let mut param_refs: Vec<&mut Tensor<f32>> = Vec::with_capacity(active.len());
        for (name, t) in self.det.params.entries_mut() {
            if active.contains(name) {
                param_refs.push(t);
            }
        }
        self.adam.step(&mut param_refs, &grad_list)?;

        Ok((
            l_c.value().item()?,
            l_ssim.value().item()?,
            l_pmse.value().item()?,
            total.value().item()?,
            scores,
        ))
    }
}

/// Runs one full training epoch and returns its stats row material.
pub fn run_epoch(
    trainer: &mut Trainer,
    items: &[PreparedItem],
    epoch: usize,
    master_seed: u64,
) -> Result<(EpochStats, usize)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = Rng::new(derive_seed(master_seed, &format!("shuffle{epoch}")));
    rng.shuffle(&mut order);

    let batch_size = trainer.det.config.batch_size;
    let mut stats = EpochStats::new();
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&PreparedItem> = chunk.iter().map(|&i| &items[i]).collect();
        let (l_c, l_ssim, l_pmse, total, scores) = trainer.train_step(&batch)?;
        stats.l_c += l_c as f64;
        stats.l_ssim += l_ssim as f64;
        stats.l_pmse += l_pmse as f64;
        stats.total += total as f64;
        for (s, item) in scores.iter().zip(&batch) {
            stats.scores.push(*s);
            stats.labels.push(item.label.as_u8());
        }
        batches += 1;
    }
    Ok((stats, batches))
}

pub fn load_prepared_split(
    config: &RunConfig,
    data_dir: &Path,
    split: Split,
) -> Result<Vec<PreparedItem>> {
    let items = dataset::load_split(data_dir, split, config.resolution, config.frames)?;
    let grid = config.patch_grid;
    let hook_hw = config.backbone_config()?.hook_hw();
    items
        .into_iter()
        .map(|it| prepare_item(it, grid, hook_hw))
        .collect()
}

pub struct EvalOutcome {
    pub rows: Vec<(String, u8, f64)>,
    pub stats: EpochStats,
    pub batches: usize,
}

/// Deterministic scoring pass without parameter mutation.
pub fn evaluate_split(det: &Detector, items: &[PreparedItem]) -> Result<EvalOutcome> {
    let mut rows = Vec::with_capacity(items.len());
    let mut stats = EpochStats::new();
    let mut batches = 0usize;
    for item in items {
        let g: Graph<f32> = Graph::new();
        let vars = det.params.vars(&g, false);
        let fwd = forward_sequence(&g, &vars, det, item)?;
        let labels = sequence_labels(det.config.mode, item.label, item.seq.num_frames());
        let l_c = losses::cross_entropy(&g, fwd.logits, &labels)?;
        let targets = g.constant(item.targets.clone());
        let l_ssim = losses::ssim_loss(fwd.preds, targets)?;
        let reduction = if det.config.pmse_per_sample {
            PmseReduction::MeanPerSample
        } else {
            PmseReduction::Sum
        };
        let l_pmse = losses::patch_mse(fwd.preds, targets, reduction)?;
        let total = losses::total_loss(l_c, l_ssim, l_pmse, &det.config.loss_weights())?;

        stats.l_c += l_c.value().item()? as f64;
        stats.l_ssim += l_ssim.value().item()? as f64;
        stats.l_pmse += l_pmse.value().item()? as f64;
        stats.total += total.value().item()? as f64;
        stats.scores.push(fwd.score);
        stats.labels.push(item.label.as_u8());
        rows.push((item.id.clone(), item.label.as_u8(), fwd.score));
        batches += 1;
    }
    Ok(EvalOutcome {
        rows,
        stats,
        batches,
    })
}
