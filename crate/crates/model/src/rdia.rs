//! Cross-frame inconsistency attention over RGB and depth residuals.
//!
//! Inter-frame residuals in each space pass a shared-per-frame 2D conv stack,
//! then combined temporal (3x1x1) and spatial (1x3x3) attention. The two
//! attention stacks modulate the enhanced per-frame features, a channel dot
//! product plus softmax turns them into one attention weight per token, and
//! a 1x1x1-conv residual update feeds a small 3D conv classifier.
//!
//! Residual stacks have length n-1; attention slice i modulates frame i+1
//! (the arriving frame carries the anomaly) and frame 0 passes unmodulated.

use fmd_tensor::{derive_seed, Graph, Padding, Rng, Scalar, Tensor, Var};

use crate::error::{validation, Result};
use crate::params::{xavier_bound, ParamSet, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RdiaConfig {
    /// Channel count of the enhanced features (backbone hook width).
    pub channels: usize,
    /// Hidden width of the residual preprocess stacks.
    pub chi_mid: usize,
    /// Classifier stage widths.
    pub cls_c1: usize,
    pub cls_c2: usize,
}

impl RdiaConfig {
    pub fn for_channels(channels: usize) -> RdiaConfig {
        RdiaConfig {
            channels,
            chi_mid: 16,
            cls_c1: 16,
            cls_c2: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.chi_mid == 0 || self.cls_c1 == 0 || self.cls_c2 == 0 {
            return Err(validation("rdia widths must be >= 1".to_string()));
        }
        Ok(())
    }
}

fn conv2d_kernel<E: Scalar>(
    set: &mut ParamSet<E>,
    name: &str,
    c_out: usize,
    c_in: usize,
    rng: &mut Rng,
) {
    let b = xavier_bound(c_in * 9, c_out * 9);
    set.insert(
        format!("{name}.k"),
        Tensor::rand_uniform(&[c_out, c_in, 3, 3], -b, b, rng),
    );
    set.insert(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1, 1]));
}

fn conv3d_kernel<E: Scalar>(
    set: &mut ParamSet<E>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: (usize, usize, usize),
    rng: &mut Rng,
) {
    let vol = k.0 * k.1 * k.2;
    let b = xavier_bound(c_in * vol, c_out * vol);
    set.insert(
        format!("{name}.k"),
        Tensor::rand_uniform(&[c_out, c_in, k.0, k.1, k.2], -b, b, rng),
    );
    set.insert(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1, 1]));
}

/// Residual branches (RGB from 3 channels, depth from 1), per-branch SA/TA,
/// the three 1x1x1 projections, and the 3D classifier.
pub fn init_params<E: Scalar>(cfg: &RdiaConfig, seed: u64) -> ParamSet<E> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    let c = cfg.channels;
    for (branch, c_in) in [("chi_rgb", 3usize), ("chi_d", 1usize)] {
        conv2d_kernel(
            &mut set,
            &format!("{branch}.l0"),
            cfg.chi_mid,
            c_in,
            &mut rng,
        );
        conv2d_kernel(
            &mut set,
            &format!("{branch}.l1"),
            cfg.chi_mid,
            cfg.chi_mid,
            &mut rng,
        );
        conv2d_kernel(&mut set, &format!("{branch}.l2"), c, cfg.chi_mid, &mut rng);
    }
    for branch in ["ra_rgb", "ra_d"] {
        conv3d_kernel(&mut set, &format!("{branch}.sa"), c, c, (1, 3, 3), &mut rng);
        conv3d_kernel(&mut set, &format!("{branch}.ta"), c, c, (3, 1, 1), &mut rng);
    }
    conv3d_kernel(&mut set, "phi", c, c, (1, 1, 1), &mut rng);
    conv3d_kernel(&mut set, "psi", c, c, (1, 1, 1), &mut rng);
    conv3d_kernel(&mut set, "upsilon", c, c, (1, 1, 1), &mut rng);
    conv3d_kernel(&mut set, "cls.s0", cfg.cls_c1, c, (3, 3, 3), &mut rng);
    conv3d_kernel(
        &mut set,
        "cls.s1",
        cfg.cls_c2,
        cfg.cls_c1,
        (3, 3, 3),
        &mut rng,
    );
    let b = xavier_bound(cfg.cls_c2, 2);
    set.insert(
        "cls.fc_w",
        Tensor::rand_uniform(&[cfg.cls_c2, 2], -b, b, &mut rng),
    );
    set.insert("cls.fc_b", Tensor::zeros(&[2]));
    set
}

pub fn init_params_from_master<E: Scalar>(cfg: &RdiaConfig, master_seed: u64) -> ParamSet<E> {
    init_params(cfg, derive_seed(master_seed, "rdia"))
}

/// Consecutive-frame differences: slice i = `seq[i+1] - seq[i]`, length n-1.
pub fn frame_residuals<'g, E: Scalar>(seq: Var<'g, E>) -> Result<Var<'g, E>> {
    let s = seq.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(validation(format!(
            "frame_residuals wants [c,n>=2,h,w], got {s:?}"
        )));
    }
    let n = s[1];
    let later = seq.narrow(1, 1, n - 1)?;
    let earlier = seq.narrow(1, 0, n - 1)?;
    Ok(later.sub(earlier)?)
}

fn conv3<'g, E: Scalar>(scope: &Scope<'_, 'g, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
    Ok(x.conv3d(scope.get("k")?, Padding::Same)?
        .add(scope.get("b")?)?)
}

/// Shared-per-frame 2D conv stack: each temporal slice passes the same
/// three conv+relu layers. The 2D kernels run as 1xKxK 3D convolutions,
/// which is the same arithmetic with one unfold.
pub fn residual_preprocess<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    residuals: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let s = residuals.shape();
    if s.len() != 4 {
        return Err(validation(format!(
            "residual stack must be [c,m,h,w], got {s:?}"
        )));
    }
    let mut x = residuals;
    for layer in ["l0", "l1", "l2"] {
        let l = vars.scope(layer);
        let k2d = l.get("k")?;
        let ks = k2d.shape();
        let k3d = k2d.reshape(&[ks[0], ks[1], 1, ks[2], ks[3]])?;
        x = x.conv3d(k3d, Padding::Same)?.add(l.get("b")?)?.relu();
    }
    Ok(x)
}

pub struct ResidualAttentionParts<'g, E: Scalar> {
    /// softmax over the temporal axis, shape `[c, m, h, w]`.
    pub temporal_soft: Var<'g, E>,
    /// softmax over the joint spatial axis, shape `[c, m, h, w]`.
    pub spatial_soft: Var<'g, E>,
    pub att: Var<'g, E>,
}

/// Att = R_F * softmax_space(SA(R_F) * softmax_time(TA(R_F))).
/// The temporal softmax normalizes over the stack axis, the outer softmax
/// over the joint h*w spatial axis. The parts are exposed so normalization
/// can be checked at each site.
pub fn residual_attention_parts<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    r_f: Var<'g, E>,
) -> Result<ResidualAttentionParts<'g, E>> {
    let s = r_f.shape();
    if s.len() != 4 {
        return Err(validation(format!(
            "residual feature must be [c,m,h,w], got {s:?}"
        )));
    }
    let (c, m, h, w) = (s[0], s[1], s[2], s[3]);
    let ta = conv3(&vars.scope("ta"), r_f)?;
    let t_soft = ta.softmax(1)?;
    let sa = conv3(&vars.scope("sa"), r_f)?;
    let inner = sa.mul(t_soft)?;
    let s_soft = inner
        .reshape(&[c, m, h * w])?
        .softmax(2)?
        .reshape(&[c, m, h, w])?;
    let att = r_f.mul(s_soft)?;
    Ok(ResidualAttentionParts {
        temporal_soft: t_soft,
        spatial_soft: s_soft,
        att,
    })
}

pub fn residual_attention<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    r_f: Var<'g, E>,
) -> Result<Var<'g, E>> {
    Ok(residual_attention_parts(vars, r_f)?.att)
}

/// Aligns an (n-1)-long attention stack against n frames: frame 0 passes
/// unmodulated, attention slice i scales frame i+1.
fn modulate<'g, E: Scalar>(att: Var<'g, E>, f_en: Var<'g, E>) -> Result<Var<'g, E>> {
    let n = f_en.shape()[1];
    let first = f_en.narrow(1, 0, 1)?;
    let rest = f_en.narrow(1, 1, n - 1)?.mul(att)?;
    Ok(f_en.graph().concat(&[first, rest], 1)?)
}

/// Channel dot product of the two projected modulated stacks, softmax over
/// all n*h*w tokens; yields one weight per token.
pub fn rgb_depth_inconsistency<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    att_rgb: Var<'g, E>,
    att_d: Var<'g, E>,
    f_en: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let s = f_en.shape();
    if s.len() != 4 {
        return Err(validation(format!(
            "enhanced stack must be [c,n,h,w], got {s:?}"
        )));
    }
    let (n, h, w) = (s[1], s[2], s[3]);
    let expected = [s[0], n - 1, h, w];
    if att_rgb.shape() != expected || att_d.shape() != expected {
        return Err(validation(format!(
            "attention stacks must be {expected:?}, got {:?} and {:?}",
            att_rgb.shape(),
            att_d.shape()
        )));
    }
    let mod_rgb = modulate(att_rgb, f_en)?;
    let mod_d = modulate(att_d, f_en)?;
    let p = conv3(&vars.scope("phi"), mod_rgb)?;
    let q = conv3(&vars.scope("psi"), mod_d)?;
    let dot = p.mul(q)?.sum(&[0], false)?; // [n,h,w]
    let att = dot.reshape(&[n * h * w])?.softmax(0)?.reshape(&[n, h, w])?;
    Ok(att)
}

/// F' = Att_RD * upsilon(F_en) + F_en.
pub fn enhance<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    att_rd: Var<'g, E>,
    f_en: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let projected = conv3(&vars.scope("upsilon"), f_en)?;
    Ok(projected.mul(att_rd)?.add(f_en)?)
}

/// Two (conv3d 3x3x3 -> relu -> 2x spatial pool) stages, global average
/// pool, linear head to two logits.
pub fn classify_sequence<'g, E: Scalar>(
    vars: &Scope<'_, 'g, E>,
    cfg: &RdiaConfig,
    f: Var<'g, E>,
) -> Result<Var<'g, E>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(validation(format!(
            "classifier input must be [c,n,h,w], got {s:?}"
        )));
    }
    let cls = vars.scope("cls");
    let x = conv3(&cls.scope("s0"), f)?.relu().avg_pool2()?;
    let x = conv3(&cls.scope("s1"), x)?.relu().avg_pool2()?;
    let pooled = x.mean(&[1, 2, 3], false)?; // [c2]
    Ok(pooled
        .reshape(&[1, cfg.cls_c2])?
        .matmul(cls.get("fc_w")?)?
        .add(cls.get("fc_b")?)?
        .reshape(&[2])?)
}

pub struct RdiaOutput<'g, E: Scalar> {
    pub logits: Var<'g, E>,
    pub att_rd: Var<'g, E>,
    pub enhanced: Var<'g, E>,
}

/// Full pass: residual branches -> combined attention -> residual update ->
/// classifier. `rgb_frames` is the raw frame stack pooled to the feature
/// resolution (constant), `depth_maps` the predicted per-frame depth stack
/// `[1,n,h,w]` (differentiable), `f_en` the enhanced features `[c,n,h,w]`.
pub fn forward<'g, E: Scalar>(
    g: &'g Graph<E>,
    vars: &Scope<'_, 'g, E>,
    cfg: &RdiaConfig,
    rgb_frames: Var<'g, E>,
    depth_maps: Var<'g, E>,
    f_en: Var<'g, E>,
) -> Result<RdiaOutput<'g, E>> {
    cfg.validate()?;
    let _ = g;
    let r_rgb = frame_residuals(rgb_frames)?;
    let r_d = frame_residuals(depth_maps)?;
    let rf_rgb = residual_preprocess(&vars.scope("chi_rgb"), r_rgb)?;
    let rf_d = residual_preprocess(&vars.scope("chi_d"), r_d)?;
    let att_rgb = residual_attention(&vars.scope("ra_rgb"), rf_rgb)?;
    let att_d = residual_attention(&vars.scope("ra_d"), rf_d)?;
    let att_rd = rgb_depth_inconsistency(vars, att_rgb, att_d, f_en)?;
    let enhanced = enhance(vars, att_rd, f_en)?;
    let logits = classify_sequence(vars, cfg, enhanced)?;
    Ok(RdiaOutput {
        logits,
        att_rd,
        enhanced,
    })
}
