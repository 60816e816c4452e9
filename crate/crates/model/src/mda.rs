//! Multi-head depth attention: depth tokens project to queries, RGB tokens
//! to keys and values, per-head projections unshared. The attended value
//! aggregate re-enters the RGB feature through a residual MLP, so zeroing
//! the MLP path leaves the feature untouched.
//!
//! Also holds the two ablation comparators: plain multi-head self-attention
//! (RGB queries) and channel-concat fusion through a 1x1 conv.

use fmd_tensor::{derive_seed, Graph, Padding, Rng, Scalar, Tensor, Var};

use crate::error::{validation, Result};
use crate::params::{xavier_bound, ParamSet, Scope};

/// What the softmax temperature divides by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScale {
    /// Channel count of the RGB feature.
    RgbChannels,
    /// Per-head projection width.
    HeadWidth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdaConfig {
    pub heads: usize,
    pub head_width: usize,
    pub scale: AttentionScale,
    pub mlp_ratio: usize,
}

impl MdaConfig {
    /// 8 heads splitting the RGB channel count, scaled by it.
    pub fn for_channels(c: usize) -> Result<MdaConfig> {
        let heads = 8;
        if c % heads != 0 {
            return Err(validation(format!(
                "{c} channels do not split into {heads} heads"
            )));
        }
        Ok(MdaConfig {
            heads,
            head_width: c / heads,
            scale: AttentionScale::RgbChannels,
            mlp_ratio: 4,
        })
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.heads == 0 || self.head_width == 0 {
            return Err(validation("heads and head width must be >= 1".to_string()));
        }
        if self.mlp_ratio == 0 {
            return Err(validation("mlp ratio must be >= 1".to_string()));
        }
        let _ = c;
        Ok(())
    }

    fn scale_denominator(&self, c: usize) -> f64 {
        match self.scale {
            AttentionScale::RgbChannels => (c as f64).sqrt(),
            AttentionScale::HeadWidth => (self.head_width as f64).sqrt(),
        }
    }
}

/// Per-head W_D/W_R/W_V (unshared), shared W_O, residual MLP.
pub fn init_params<E: Scalar>(cfg: &MdaConfig, c_d: usize, c: usize, seed: u64) -> ParamSet<E> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    let dh = cfg.head_width;
    let mat = |set: &mut ParamSet<E>, name: String, rows: usize, cols: usize, rng: &mut Rng| {
        let b = xavier_bound(rows, cols);
        set.insert(name, Tensor::rand_uniform(&[rows, cols], -b, b, rng));
    };
    for i in 0..cfg.heads {
        mat(&mut set, format!("head{i}.wd"), c_d, dh, &mut rng);
        mat(&mut set, format!("head{i}.wr"), c, dh, &mut rng);
        mat(&mut set, format!("head{i}.wv"), c, dh, &mut rng);
    }
    mat(&mut set, "wo".into(), cfg.heads * dh, c, &mut rng);
    mat(&mut set, "mlp.fc1_w".into(), c, cfg.mlp_ratio * c, &mut rng);
    set.insert("mlp.fc1_b", Tensor::zeros(&[cfg.mlp_ratio * c]));
    mat(&mut set, "mlp.fc2_w".into(), cfg.mlp_ratio * c, c, &mut rng);
    set.insert("mlp.fc2_b", Tensor::zeros(&[c]));
    set
}

pub fn init_params_from_master<E: Scalar>(
    cfg: &MdaConfig,
    c_d: usize,
    c: usize,
    master_seed: u64,
) -> ParamSet<E> {
    init_params(cfg, c_d, c, derive_seed(master_seed, "mda"))
}

fn to_tokens<E: Scalar>(grid: Var<'_, E>) -> Result<Var<'_, E>> {
    let s = grid.shape();
    if s.len() != 3 {
        return Err(validation(format!("expected [c,h,w] feature, got {s:?}")));
    }
    Ok(grid.reshape(&[s[0], s[1] * s[2]])?.permute(&[1, 0])?)
}

fn to_grid<E: Scalar>(tokens: Var<'_, E>, c: usize, h: usize, w: usize) -> Result<Var<'_, E>> {
    Ok(tokens.permute(&[1, 0])?.reshape(&[c, h, w])?)
}

/// One head of depth attention over spatial tokens: queries from the depth
/// feature, keys/values from the RGB feature, row softmax at 1/sqrt(d).
pub fn depth_attention_head<'g, E: Scalar>(
    depth_tokens: Var<'g, E>,
    rgb_tokens: Var<'g, E>,
    w_d: Var<'g, E>,
    w_r: Var<'g, E>,
    w_v: Var<'g, E>,
    scale_denominator: f64,
) -> Result<Var<'g, E>> {
    // scale folded into the (small) query tensor
    let q = depth_tokens.matmul(w_d)?.scale(1.0 / scale_denominator)?;
    let k = rgb_tokens.matmul(w_r)?;
    let v = rgb_tokens.matmul(w_v)?;
    let att = q.matmul(k.transpose(0, 1)?)?.softmax(1)?;
    Ok(att.matmul(v)?)
}

fn check_spatial<E: Scalar>(
    f_d: &Var<'_, E>,
    f_rgb: &Var<'_, E>,
) -> Result<(usize, usize, usize, usize)> {
    let sd = f_d.shape();
    let sr = f_rgb.shape();
    if sd.len() != 3 || sr.len() != 3 || sd[1..] != sr[1..] {
        return Err(validation(format!(
            "depth grid {sd:?} and rgb feature {sr:?} must share spatial size"
        )));
    }
    Ok((sd[0], sr[0], sr[1], sr[2]))
}

/// Full multi-head depth attention enhancement; output shape = F_rgb shape.
pub fn forward<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &MdaConfig,
    f_d_grid: Var<'g, E>,
    f_rgb: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let (_, c, h, w) = check_spatial(&f_d_grid, &f_rgb)?;
    cfg.validate(c)?;
    let depth_tokens = to_tokens(f_d_grid)?;
    let rgb_tokens = to_tokens(f_rgb)?;
    let denom = cfg.scale_denominator(c);

    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let hp = vars.scope(&format!("head{i}"));
        heads.push(depth_attention_head(
            depth_tokens,
            rgb_tokens,
            hp.get("wd")?,
            hp.get("wr")?,
            hp.get("wv")?,
            denom,
        )?);
    }
    let multihead = g.concat(&heads, 1)?.matmul(vars.get("wo")?)?;

    let mlp_in = multihead.add(rgb_tokens)?;
    let m = vars.scope("mlp");
    let hidden = mlp_in.matmul(m.get("fc1_w")?)?.add(m.get("fc1_b")?)?.gelu();
    let mlp_out = hidden.matmul(m.get("fc2_w")?)?.add(m.get("fc2_b")?)?;
    let f_en_tokens = rgb_tokens.add(mlp_out)?;
    to_grid(f_en_tokens, c, h, w)
}

/// Self-attention comparator: identical wiring with RGB tokens as queries.
/// Parameters must have been initialized with `c_d == c`.
pub fn forward_msa<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &MdaConfig,
    f_rgb: Var<'g, E>,
) -> Result<Var<'g, E>> {
    forward(g, vars, cfg, f_rgb, f_rgb)
}

/// Channel-concat fusion comparator: [F_d; F_rgb] through a 1x1 conv back to
/// the RGB channel count.
pub fn init_concat_params<E: Scalar>(c_d: usize, c: usize, seed: u64) -> ParamSet<E> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    let b = xavier_bound(c_d + c, c);
    set.insert(
        "fuse_k",
        Tensor::rand_uniform(&[c, c_d + c, 1, 1], -b, b, &mut rng),
    );
    set.insert("fuse_b", Tensor::zeros(&[c, 1, 1]));
    set
}

pub fn concat_fusion_baseline<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    f_d_grid: Var<'g, E>,
    f_rgb: Var<'g, E>,
) -> Result<Var<'g, E>> {
    check_spatial(&f_d_grid, &f_rgb)?;
    let stacked = g.concat(&[f_d_grid, f_rgb], 0)?;
    Ok(stacked
        .conv2d(vars.get("fuse_k")?, Padding::Valid, 1)?
        .add(vars.get("fuse_b")?)?)
}
