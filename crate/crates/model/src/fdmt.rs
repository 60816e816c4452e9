//! Face depth map transformer: patch embedding + pre-norm transformer
//! blocks + a per-token depth head squashed into `[0,1]`.
//!
//! The pre-head tokens double as the depth feature consumed by the
//! cross-modal attention stage.

use fmd_tensor::{derive_seed, Graph, Rng, Scalar, Tensor, Var};

use crate::error::{validation, Result};
use crate::params::{xavier_bound, ParamSet, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdmtConfig {
    pub image_hw: (usize, usize),
    pub grid: (usize, usize),
    pub embed: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for FdmtConfig {
    fn default() -> Self {
        FdmtConfig {
            image_hw: (224, 224),
            grid: (14, 14),
            embed: 128,
            blocks: 12,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

impl FdmtConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        let (r, c) = self.grid;
        if r == 0 || c == 0 || h % r != 0 || w % c != 0 {
            return Err(validation(format!(
                "image {h}x{w} not divisible by grid {r}x{c}"
            )));
        }
        if self.blocks == 0 {
            return Err(validation("block count must be >= 1".to_string()));
        }
        if self.heads == 0 || self.embed % self.heads != 0 {
            return Err(validation(format!(
                "embed width {} must divide evenly into {} heads",
                self.embed, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(validation("mlp ratio must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_hw(&self) -> (usize, usize) {
        (self.image_hw.0 / self.grid.0, self.image_hw.1 / self.grid.1)
    }

    /// Flattened patch length: 3 * ph * pw.
    pub fn patch_dim(&self) -> usize {
        let (ph, pw) = self.patch_hw();
        3 * ph * pw
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }
}

/// Splits a `[3,H,W]` frame into row-major patches, channel-major within each
/// patch: `out[p][c*ph*pw + dy*pw + dx]`. Lossless.
pub fn patchify<E: Scalar>(frame: &Tensor<E>, grid: (usize, usize)) -> Result<Tensor<E>> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(validation(format!(
            "patchify wants a [3,H,W] frame, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let (r, c) = grid;
    if r == 0 || c == 0 || h % r != 0 || w % c != 0 {
        return Err(validation(format!(
            "frame {h}x{w} not divisible by grid {r}x{c}"
        )));
    }
    let (ph, pw) = (h / r, w / c);
    let dim = 3 * ph * pw;
    let fd = frame.data();
    let mut out = vec![E::ZERO; r * c * dim];
    for py in 0..r {
        for px in 0..c {
            let row = &mut out[(py * c + px) * dim..(py * c + px + 1) * dim];
            let mut idx = 0;
            for ch in 0..3 {
                for dy in 0..ph {
                    let y = py * ph + dy;
                    for dx in 0..pw {
                        let x = px * pw + dx;
                        row[idx] = fd[(ch * h + y) * w + x];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![r * c, dim], out).map_err(Into::into)
}

/// Inverse of `patchify`.
pub fn unpatchify<E: Scalar>(
    patches: &Tensor<E>,
    grid: (usize, usize),
    image_hw: (usize, usize),
) -> Result<Tensor<E>> {
    let (h, w) = image_hw;
    let (r, c) = grid;
    let (ph, pw) = (h / r, w / c);
    let dim = 3 * ph * pw;
    if patches.rank() != 2 || patches.shape() != [r * c, dim] {
        return Err(validation(format!(
            "unpatchify wants [{}, {dim}] patches, got {:?}",
            r * c,
            patches.shape()
        )));
    }
    let pd = patches.data();
    let mut out = vec![E::ZERO; 3 * h * w];
    for py in 0..r {
        for px in 0..c {
            let row = &pd[(py * c + px) * dim..(py * c + px + 1) * dim];
            let mut idx = 0;
            for ch in 0..3 {
                for dy in 0..ph {
                    let y = py * ph + dy;
                    for dx in 0..pw {
                        let x = px * pw + dx;
                        out[(ch * h + y) * w + x] = row[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], out).map_err(Into::into)
}

/// Seeded parameter set; weight matrices are Xavier-uniform, biases zero,
/// norms identity, position embeddings small uniform.
pub fn init_params<E: Scalar>(cfg: &FdmtConfig, seed: u64) -> ParamSet<E> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    let e = cfg.embed;
    let d = cfg.patch_dim();
    let p = cfg.patches();

    let mat = |set: &mut ParamSet<E>, name: String, rows: usize, cols: usize, rng: &mut Rng| {
        let b = xavier_bound(rows, cols);
        set.insert(name, Tensor::rand_uniform(&[rows, cols], -b, b, rng));
    };

    mat(&mut set, "embed_w".into(), d, e, &mut rng);
    set.insert("embed_b", Tensor::zeros(&[e]));
    set.insert("pos", Tensor::rand_uniform(&[p, e], -0.02, 0.02, &mut rng));
    for b in 0..cfg.blocks {
        set.insert(format!("block{b}.ln1_g"), Tensor::full(&[e], E::ONE));
        set.insert(format!("block{b}.ln1_b"), Tensor::zeros(&[e]));
        mat(&mut set, format!("block{b}.wq"), e, e, &mut rng);
        mat(&mut set, format!("block{b}.wk"), e, e, &mut rng);
        mat(&mut set, format!("block{b}.wv"), e, e, &mut rng);
        mat(&mut set, format!("block{b}.wo"), e, e, &mut rng);
        set.insert(format!("block{b}.ln2_g"), Tensor::full(&[e], E::ONE));
        set.insert(format!("block{b}.ln2_b"), Tensor::zeros(&[e]));
        mat(
            &mut set,
            format!("block{b}.fc1_w"),
            e,
            cfg.mlp_ratio * e,
            &mut rng,
        );
        set.insert(
            format!("block{b}.fc1_b"),
            Tensor::zeros(&[cfg.mlp_ratio * e]),
        );
        mat(
            &mut set,
            format!("block{b}.fc2_w"),
            cfg.mlp_ratio * e,
            e,
            &mut rng,
        );
        set.insert(format!("block{b}.fc2_b"), Tensor::zeros(&[e]));
    }
    set.insert("final_g", Tensor::full(&[e], E::ONE));
    set.insert("final_b", Tensor::zeros(&[e]));
    mat(&mut set, "head_w".into(), e, 1, &mut rng);
    set.insert("head_b", Tensor::zeros(&[1]));
    set
}

pub fn init_params_from_master<E: Scalar>(cfg: &FdmtConfig, master_seed: u64) -> ParamSet<E> {
    init_params(cfg, derive_seed(master_seed, "fdmt"))
}

pub struct FdmtOutput<'g, E: Scalar> {
    /// Per-patch depth predictions in (0,1), shape `[P]`.
    pub depth_pred: Var<'g, E>,
    /// Pre-head tokens, shape `[P, embed]`.
    pub depth_feature: Var<'g, E>,
}

/// Multi-head self-attention over tokens `[P, e]`, row softmax, 1/sqrt(dh).
fn self_attention<'g, E: Scalar>(
    x: Var<'g, E>,
    scope: &Scope<'_, 'g, E>,
    cfg: &FdmtConfig,
) -> Result<Var<'g, E>> {
    let p = cfg.patches();
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let split = |v: Var<'g, E>| -> fmd_tensor::Result<Var<'g, E>> {
        v.reshape(&[p, heads, dh])?.permute(&[1, 0, 2])
    };
    // 1/sqrt(dh) folded into the (small) query tensor
    let q = split(x.matmul(scope.get("wq")?)?)?.scale(1.0 / (dh as f64).sqrt())?;
    let k = split(x.matmul(scope.get("wk")?)?)?;
    let v = split(x.matmul(scope.get("wv")?)?)?;
    let att = q.matmul(k.transpose(1, 2)?)?.softmax(2)?;
    let ctx = att
        .matmul(v)?
        .permute(&[1, 0, 2])?
        .reshape(&[p, heads * dh])?;
    ctx.matmul(scope.get("wo")?).map_err(Into::into)
}

fn mlp<'g, E: Scalar>(x: Var<'g, E>, scope: &Scope<'_, 'g, E>) -> Result<Var<'g, E>> {
    let h = x
        .matmul(scope.get("fc1_w")?)?
        .add(scope.get("fc1_b")?)?
        .gelu();
    h.matmul(scope.get("fc2_w")?)?
        .add(scope.get("fc2_b")?)
        .map_err(Into::into)
}

/// Forward from pre-patchified tokens `[P, patch_dim]` (a graph var, so tests
/// can permute patches or check gradients through them).
pub fn forward_patches<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &FdmtConfig,
    patches: Var<'g, E>,
) -> Result<FdmtOutput<'g, E>> {
    cfg.validate()?;
    let p = cfg.patches();
    if patches.shape() != [p, cfg.patch_dim()] {
        return Err(validation(format!(
            "fdmt expected patches [{p}, {}], got {:?} (config mismatch)",
            cfg.patch_dim(),
            patches.shape()
        )));
    }
    let mut tokens = patches
        .matmul(vars.get("embed_w")?)?
        .add(vars.get("embed_b")?)?
        .add(vars.get("pos")?)?;
    for b in 0..cfg.blocks {
        let blk = vars.scope(&format!("block{b}"));
        let normed = tokens.layer_norm(&[1], blk.get("ln1_g")?, blk.get("ln1_b")?, 1e-5)?;
        tokens = tokens.add(self_attention(normed, &blk, cfg)?)?;
        let normed = tokens.layer_norm(&[1], blk.get("ln2_g")?, blk.get("ln2_b")?, 1e-5)?;
        tokens = tokens.add(mlp(normed, &blk)?)?;
    }
    let feature = tokens.layer_norm(&[1], vars.get("final_g")?, vars.get("final_b")?, 1e-5)?;
    let logits = feature
        .matmul(vars.get("head_w")?)?
        .add(vars.get("head_b")?)?;
    let depth_pred = logits.sigmoid().reshape(&[p])?;
    let _ = g;
    Ok(FdmtOutput {
        depth_pred,
        depth_feature: feature,
    })
}

/// Forward from a raw `[3,H,W]` frame.
pub fn forward<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &FdmtConfig,
    frame: &Tensor<E>,
) -> Result<FdmtOutput<'g, E>> {
    if frame.shape() != [3, cfg.image_hw.0, cfg.image_hw.1] {
        return Err(validation(format!(
            "fdmt configured for {:?} frames, got {:?}",
            cfg.image_hw,
            frame.shape()
        )));
    }
    let patches = g.constant(patchify(frame, cfg.grid)?);
    forward_patches(g, vars, cfg, patches)
}

/// Lays the `[P, c]` token feature onto its grid as `[c, rows, cols]` and
/// resamples (nearest) to the requested spatial size.
pub fn depth_feature_to_grid<'g, E: Scalar>(
    feature: Var<'g, E>,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Var<'g, E>> {
    let shape = feature.shape();
    let (r, c) = grid;
    if shape.len() != 2 || shape[0] != r * c {
        return Err(validation(format!(
            "feature {shape:?} does not hold {r}x{c} = {} tokens",
            r * c
        )));
    }
    let channels = shape[1];
    let grid_feat = feature.permute(&[1, 0])?.reshape(&[channels, r, c])?;
    grid_feat
        .resize_nearest(out_hw.0, out_hw.1)
        .map_err(Into::into)
}

/// Depth predictions `[P]` laid onto the grid as a 1-channel map, resampled.
pub fn depth_pred_to_map<'g, E: Scalar>(
    pred: Var<'g, E>,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Var<'g, E>> {
    let (r, c) = grid;
    if pred.shape() != [r * c] {
        return Err(validation(format!(
            "expected [{}] predictions, got {:?}",
            r * c,
            pred.shape()
        )));
    }
    pred.reshape(&[1, r, c])?
        .resize_nearest(out_hw.0, out_hw.1)
        .map_err(Into::into)
}
