//! Flat key=value run configuration.
//!
//! Plain text, one `key = value` per line, `#` comments. Unknown keys are
//! rejected so typos fail loudly. The canonical rendering (fixed key order)
//! feeds the config hash that checkpoints carry for compatibility checks.

use std::fmt;
use std::path::PathBuf;

use fmd_model::backbone::BackboneConfig;
use fmd_model::fdmt::FdmtConfig;
use fmd_model::losses::LossWeights;
use fmd_model::mda::{AttentionScale, MdaConfig};
use fmd_model::rdia::RdiaConfig;
use fmd_tensor::AdamConfig;

use crate::error::{validation, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Video,
    Image,
    ConcatFusion,
    MsaOnly,
    Cnn3dOnly,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "video" => Ok(Mode::Video),
            "image" => Ok(Mode::Image),
            "concat-fusion" => Ok(Mode::ConcatFusion),
            "msa-only" => Ok(Mode::MsaOnly),
            "3dcnn-only" => Ok(Mode::Cnn3dOnly),
            _ => Err(validation(format!(
                "unknown mode '{s}' (expected video | image | concat-fusion | msa-only | 3dcnn-only)"
            ))),
        }
    }

    /// Modes that classify the whole sequence through the 3D pathway.
    pub fn is_sequence_level(self) -> bool {
        !matches!(self, Mode::Image)
    }

    pub fn uses_rdia_attention(self) -> bool {
        matches!(self, Mode::Video | Mode::ConcatFusion | Mode::MsaOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Video => "video",
            Mode::Image => "image",
            Mode::ConcatFusion => "concat-fusion",
            Mode::MsaOnly => "msa-only",
            Mode::Cnn3dOnly => "3dcnn-only",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub resolution: usize,
    pub patch_grid: (usize, usize),
    pub frames: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Divide the patch MSE by the number of maps in the batch.
    pub pmse_per_sample: bool,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub fdmt_embed: usize,
    pub fdmt_blocks: usize,
    pub fdmt_heads: usize,
    pub fdmt_mlp_ratio: usize,
    pub mda_heads: usize,
    /// 0 selects hook_channels / mda_heads.
    pub mda_head_width: usize,
    pub mda_scale: AttentionScale,
    pub rdia_chi_mid: usize,
    pub rdia_cls1: usize,
    pub rdia_cls2: usize,
    pub deterministic: bool,
}

impl Default for RunConfig {
    /// The toy defaults: 56x56, n=8, a small transformer, optimizer settings
    /// lr 3e-4 / weight decay 1e-4 / batch 4, loss weights 0.7.
    fn default() -> Self {
        RunConfig {
            mode: Mode::Video,
            resolution: 56,
            patch_grid: (7, 7),
            frames: 8,
            epochs: 6,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 1e-4,
            alpha: 0.7,
            beta: 0.7,
            pmse_per_sample: true,
            seed: 42,
            data_dir: PathBuf::from("data"),
            fdmt_embed: 32,
            fdmt_blocks: 2,
            fdmt_heads: 4,
            fdmt_mlp_ratio: 4,
            mda_heads: 4,
            mda_head_width: 0,
            mda_scale: AttentionScale::RgbChannels,
            rdia_chi_mid: 16,
            rdia_cls1: 16,
            rdia_cls2: 16,
            deterministic: false,
        }
    }
}

const KEYS: [&str; 24] = [
    "mode",
    "resolution",
    "patch_grid",
    "frames",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "alpha",
    "beta",
    "pmse_per_sample",
    "seed",
    "data_dir",
    "fdmt_embed",
    "fdmt_blocks",
    "fdmt_heads",
    "fdmt_mlp_ratio",
    "mda_heads",
    "mda_head_width",
    "mda_scale",
    "rdia_chi_mid",
    "rdia_cls1",
    "rdia_cls2",
    "deterministic",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| validation(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| match e {
                CliError::Validation(msg) => validation(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| validation(format!("bad value '{value}' for {key}")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "resolution" => self.resolution = num(key, value)?,
            "patch_grid" => {
                let (r, c) = value
                    .split_once('x')
                    .ok_or_else(|| validation(format!("patch_grid wants RxC, got '{value}'")))?;
                self.patch_grid = (num(key, r)?, num(key, c)?);
            }
            "frames" => self.frames = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "pmse_per_sample" => self.pmse_per_sample = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "fdmt_embed" => self.fdmt_embed = num(key, value)?,
            "fdmt_blocks" => self.fdmt_blocks = num(key, value)?,
            "fdmt_heads" => self.fdmt_heads = num(key, value)?,
            "fdmt_mlp_ratio" => self.fdmt_mlp_ratio = num(key, value)?,
            "mda_heads" => self.mda_heads = num(key, value)?,
            "mda_head_width" => self.mda_head_width = num(key, value)?,
            "mda_scale" => {
                self.mda_scale = match value {
                    "rgb-channels" => AttentionScale::RgbChannels,
                    "head-width" => AttentionScale::HeadWidth,
                    _ => {
                        return Err(validation(format!(
                            "mda_scale wants rgb-channels | head-width, got '{value}'"
                        )))
                    }
                }
            }
            "rdia_chi_mid" => self.rdia_chi_mid = num(key, value)?,
            "rdia_cls1" => self.rdia_cls1 = num(key, value)?,
            "rdia_cls2" => self.rdia_cls2 = num(key, value)?,
            "deterministic" => self.deterministic = num(key, value)?,
            _ => return Err(validation(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "mode" => self.mode.to_string(),
            "resolution" => self.resolution.to_string(),
            "patch_grid" => format!("{}x{}", self.patch_grid.0, self.patch_grid.1),
            "frames" => self.frames.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "pmse_per_sample" => self.pmse_per_sample.to_string(),
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "fdmt_embed" => self.fdmt_embed.to_string(),
            "fdmt_blocks" => self.fdmt_blocks.to_string(),
            "fdmt_heads" => self.fdmt_heads.to_string(),
            "fdmt_mlp_ratio" => self.fdmt_mlp_ratio.to_string(),
            "mda_heads" => self.mda_heads.to_string(),
            "mda_head_width" => self.mda_head_width.to_string(),
            "mda_scale" => match self.mda_scale {
                AttentionScale::RgbChannels => "rgb-channels".to_string(),
                AttentionScale::HeadWidth => "head-width".to_string(),
            },
            "rdia_chi_mid" => self.rdia_chi_mid.to_string(),
            "rdia_cls1" => self.rdia_cls1.to_string(),
            "rdia_cls2" => self.rdia_cls2.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Fixed key order; the hash input and the checkpoint copy.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.value_of(key)));
        }
        out
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(validation(
                "alpha and beta must be non-negative".to_string(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.frames < 2 {
            return Err(validation(
                "batch_size and epochs must be positive; frames must be >= 2".to_string(),
            ));
        }
        self.fdmt_config()?.validate().map_err(CliError::from)?;
        let b = self.backbone_config()?;
        b.validate()?;
        let mda = self.mda_config()?;
        mda.validate(b.hook_channels())?;
        self.rdia_config().validate()?;
        Ok(())
    }

    pub fn fdmt_config(&self) -> Result<FdmtConfig> {
        Ok(FdmtConfig {
            image_hw: (self.resolution, self.resolution),
            grid: self.patch_grid,
            embed: self.fdmt_embed,
            blocks: self.fdmt_blocks,
            heads: self.fdmt_heads,
            mlp_ratio: self.fdmt_mlp_ratio,
        })
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        match self.resolution {
            56 => Ok(BackboneConfig::toy56()),
            224 => Ok(BackboneConfig::input224()),
            other => Err(validation(format!(
                "no backbone preset for resolution {other} (supported: 56, 224)"
            ))),
        }
    }

    pub fn mda_config(&self) -> Result<MdaConfig> {
        let hook_c = self.backbone_config()?.hook_channels();
        let head_width = if self.mda_head_width == 0 {
            if hook_c % self.mda_heads != 0 {
                return Err(validation(format!(
                    "{hook_c} hook channels do not split into {} heads; set mda_head_width",
                    self.mda_heads
                )));
            }
            hook_c / self.mda_heads
        } else {
            self.mda_head_width
        };
        Ok(MdaConfig {
            heads: self.mda_heads,
            head_width,
            scale: self.mda_scale,
            mlp_ratio: 4,
        })
    }

    pub fn rdia_config(&self) -> RdiaConfig {
        let channels = self
            .backbone_config()
            .map(|b| b.hook_channels())
            .unwrap_or(32);
        RdiaConfig {
            channels,
            chi_mid: self.rdia_chi_mid,
            cls_c1: self.rdia_cls1,
            cls_c2: self.rdia_cls2,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_canonical_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nmode = image # trailing\n").unwrap();
        assert_eq!(cfg.mode, Mode::Image);
    }

    #[test]
    fn ablation_configs_differ_only_in_mode_line() {
        let base = RunConfig::default();
        for mode in [Mode::ConcatFusion, Mode::MsaOnly, Mode::Cnn3dOnly] {
            let mut ablation = base.clone();
            ablation.mode = mode;
            let at = base.canonical_text();
            let bt = ablation.canonical_text();
            let diffs: Vec<(&str, &str)> =
                at.lines().zip(bt.lines()).filter(|(x, y)| x != y).collect();
            assert_eq!(diffs.len(), 1);
            assert!(diffs[0].0.starts_with("mode ="));
        }
    }

    #[test]
    fn negative_weights_fail_validation() {
        let text = "alpha = -0.3\n";
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }
}
