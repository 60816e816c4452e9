//! Small convolutional RGB feature extractor with a mid-network hook.
//!
//! Six conv stages (conv 3x3 -> instance norm -> relu); the stage at the
//! hook index hands its feature map to the attention fusion, the remaining
//! stages plus a pooled linear head produce the two-class logits. The hook
//! index is configurable to study different insertion depths.

use fmd_tensor::{derive_seed, Graph, Padding, Rng, Scalar, Tensor, Var};

use crate::error::{validation, Result};
use crate::params::{xavier_bound, ParamSet, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_hw: (usize, usize),
    pub stages: Vec<StageSpec>,
    /// Number of stages before the hook; the hook feature is the output of
    /// stage `hook - 1`.
    pub hook: usize,
    pub classes: usize,
}

impl BackboneConfig {
    /// 56x56 input, hook feature 32x14x14; aligns with a 14x14 patch grid
    /// without resampling.
    pub fn toy56() -> BackboneConfig {
        BackboneConfig {
            input_hw: (56, 56),
            stages: vec![
                StageSpec {
                    c_out: 16,
                    stride: 1,
                },
                StageSpec {
                    c_out: 24,
                    stride: 2,
                },
                StageSpec {
                    c_out: 32,
                    stride: 2,
                },
                StageSpec {
                    c_out: 32,
                    stride: 1,
                },
                StageSpec {
                    c_out: 32,
                    stride: 1,
                },
                StageSpec {
                    c_out: 32,
                    stride: 1,
                },
            ],
            hook: 3,
            classes: 2,
        }
    }

    /// 224x224 input, hook feature 48x14x14.
    pub fn input224() -> BackboneConfig {
        BackboneConfig {
            input_hw: (224, 224),
            stages: vec![
                StageSpec {
                    c_out: 16,
                    stride: 2,
                },
                StageSpec {
                    c_out: 24,
                    stride: 2,
                },
                StageSpec {
                    c_out: 32,
                    stride: 2,
                },
                StageSpec {
                    c_out: 48,
                    stride: 2,
                },
                StageSpec {
                    c_out: 48,
                    stride: 1,
                },
                StageSpec {
                    c_out: 48,
                    stride: 1,
                },
            ],
            hook: 4,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(validation("backbone needs at least one stage".to_string()));
        }
        if self.hook == 0 || self.hook >= self.stages.len() {
            return Err(validation(format!(
                "hook index {} must fall inside 1..{}",
                self.hook,
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|s| s.stride == 0) {
            return Err(validation("stage stride must be >= 1".to_string()));
        }
        if self.classes < 2 {
            return Err(validation("need at least two classes".to_string()));
        }
        let (h, w) = self.hook_hw();
        if h == 0 || w == 0 {
            return Err(validation(
                "strides collapse the hook feature to nothing".to_string(),
            ));
        }
        Ok(())
    }

    fn hw_after(&self, stages: usize) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw;
        for s in &self.stages[..stages] {
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
        }
        (h, w)
    }

    pub fn hook_hw(&self) -> (usize, usize) {
        self.hw_after(self.hook)
    }

    pub fn hook_channels(&self) -> usize {
        self.stages[self.hook - 1].c_out
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().expect("validated").c_out
    }
}

pub fn init_params<E: Scalar>(cfg: &BackboneConfig, seed: u64) -> ParamSet<E> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    let mut c_in = 3usize;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let fan_in = c_in * 9;
        let fan_out = stage.c_out * 9;
        let b = xavier_bound(fan_in, fan_out);
        set.insert(
            format!("stage{i}.k"),
            Tensor::rand_uniform(&[stage.c_out, c_in, 3, 3], -b, b, &mut rng),
        );
        set.insert(format!("stage{i}.b"), Tensor::zeros(&[stage.c_out, 1, 1]));
        set.insert(
            format!("stage{i}.in_g"),
            Tensor::full(&[stage.c_out, 1, 1], E::ONE),
        );
        set.insert(
            format!("stage{i}.in_b"),
            Tensor::zeros(&[stage.c_out, 1, 1]),
        );
        c_in = stage.c_out;
    }
    let b = xavier_bound(c_in, cfg.classes);
    set.insert(
        "fc_w",
        Tensor::rand_uniform(&[c_in, cfg.classes], -b, b, &mut rng),
    );
    set.insert("fc_b", Tensor::zeros(&[cfg.classes]));
    set
}

pub fn init_params_from_master<E: Scalar>(cfg: &BackboneConfig, master_seed: u64) -> ParamSet<E> {
    init_params(cfg, derive_seed(master_seed, "backbone"))
}

fn stage<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    idx: usize,
    stride: usize,
    x: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let s = vars.scope(&format!("stage{idx}"));
    let y = x
        .conv2d(s.get("k")?, Padding::Same, stride)?
        .add(s.get("b")?)?;
    let normed = y.layer_norm(&[1, 2], s.get("in_g")?, s.get("in_b")?, 1e-5)?;
    Ok(normed.relu())
}

/// Stages up to the hook: frame `[3,H,W]` -> F_rgb at the hook resolution.
pub fn stem<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &BackboneConfig,
    frame: &Tensor<E>,
) -> Result<Var<'g, E>> {
    if frame.shape() != [3, cfg.input_hw.0, cfg.input_hw.1] {
        return Err(validation(format!(
            "backbone configured for {:?} input, got {:?}",
            cfg.input_hw,
            frame.shape()
        )));
    }
    let mut x = g.constant(frame.clone());
    for (i, s) in cfg.stages[..cfg.hook].iter().enumerate() {
        x = stage(vars, i, s.stride, x)?;
    }
    Ok(x)
}

/// Remaining stages + global average pool + linear head -> logits.
pub fn head<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    cfg: &BackboneConfig,
    f_en: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let expect = [cfg.hook_channels(), cfg.hook_hw().0, cfg.hook_hw().1];
    if f_en.shape() != expect {
        return Err(validation(format!(
            "backbone head wants {expect:?} at the hook, got {:?}",
            f_en.shape()
        )));
    }
    let mut x = f_en;
    for i in cfg.hook..cfg.stages.len() {
        x = stage(vars, i, cfg.stages[i].stride, x)?;
    }
    let pooled = x.mean(&[1, 2], false)?; // [c_last]
    let logits = pooled
        .reshape(&[1, cfg.last_channels()])?
        .matmul(vars.get("fc_w")?)?
        .add(vars.get("fc_b")?)?
        .reshape(&[cfg.classes])?;
    Ok(logits)
}

/// stem composed with head; equals the split forward by construction.
pub fn forward_unhooked<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &BackboneConfig,
    frame: &Tensor<E>,
) -> Result<Var<'g, E>> {
    let f_rgb = stem(g, vars, cfg, frame)?;
    head(vars, cfg, f_rgb)
}
