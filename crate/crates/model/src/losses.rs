//! Depth-supervision and classification losses.
//!
//! SSIM is computed from whole-map moments per sample and averaged over the
//! batch; the training loss is `1 - ssim`. Patch MSE is the plain sum of
//! squared per-patch errors (a mean-per-sample variant exists for step-size
//! stability). The total objective is `l_c + alpha*l_ssim + beta*l_pmse`.

use fmd_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{validation, Result};

pub const DEFAULT_SSIM_C1: f64 = 1e-4;
pub const DEFAULT_SSIM_C2: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            beta: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(validation(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn check_pair<E: Scalar>(op: &str, a: &Var<'_, E>, b: &Var<'_, E>) -> Result<(usize, usize)> {
    let sa = a.shape();
    let sb = b.shape();
    if sa != sb || sa.len() != 2 {
        return Err(validation(format!(
            "{op} wants two equal [batch, P] stacks, got {sa:?} and {sb:?}"
        )));
    }
    Ok((sa[0], sa[1]))
}

/// Batch-mean SSIM between two map stacks `[batch, P]`, whole-map moments.
pub fn ssim<'g, E: Scalar>(a: Var<'g, E>, b: Var<'g, E>, c1: f64, c2: f64) -> Result<Var<'g, E>> {
    check_pair("ssim", &a, &b)?;
    if c1 <= 0.0 || c2 <= 0.0 {
        return Err(validation(format!(
            "ssim constants must be positive, got c1={c1} c2={c2}"
        )));
    }
    let mu_a = a.mean(&[1], true)?;
    let mu_b = b.mean(&[1], true)?;
    let da = a.sub(mu_a)?;
    let db = b.sub(mu_b)?;
    let var_a = da.mul(da)?.mean(&[1], true)?;
    let var_b = db.mul(db)?.mean(&[1], true)?;
    let cov = da.mul(db)?.mean(&[1], true)?;

    let lum = mu_a.mul(mu_b)?.affine(2.0, c1)?;
    let st = cov.affine(2.0, c2)?;
    let num = lum.mul(st)?;
    let mu_sq = mu_a.mul(mu_a)?.add(mu_b.mul(mu_b)?)?.affine(1.0, c1)?;
    let var_sum = var_a.add(var_b)?.affine(1.0, c2)?;
    let den = mu_sq.mul(var_sum)?;
    Ok(num.div(den)?.mean_all()?)
}

/// 1 - ssim; zero iff the stacks are identical.
pub fn ssim_loss<'g, E: Scalar>(a: Var<'g, E>, b: Var<'g, E>) -> Result<Var<'g, E>> {
    Ok(ssim(a, b, DEFAULT_SSIM_C1, DEFAULT_SSIM_C2)?.affine(-1.0, 1.0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmseReduction {
    /// Plain double sum over samples and patches.
    Sum,
    /// Sum divided by the number of samples.
    MeanPerSample,
}

/// Squared per-patch depth error between prediction and target stacks
/// `[batch, P]`.
pub fn patch_mse<'g, E: Scalar>(
    pred: Var<'g, E>,
    target: Var<'g, E>,
    reduction: PmseReduction,
) -> Result<Var<'g, E>> {
    let (batch, _) = check_pair("patch_mse", &pred, &target)?;
    let d = pred.sub(target)?;
    let total = d.mul(d)?.sum_all()?;
    match reduction {
        PmseReduction::Sum => Ok(total),
        PmseReduction::MeanPerSample => Ok(total.scale(1.0 / batch as f64)?),
    }
}

/// Mean `-log softmax(logits)[label]` over the batch; logits `[batch, 2]`.
pub fn cross_entropy<'g, E: Scalar>(
    g: &'g Graph<E>,
    logits: Var<'g, E>,
    labels: &[usize],
) -> Result<Var<'g, E>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(validation(format!(
            "cross_entropy wants logits [batch, classes] matching {} labels, got {shape:?}",
            labels.len()
        )));
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let ls = logits.log_softmax(1)?;
    let mut onehot = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(&[i, l], E::ONE);
    }
    let picked = ls.mul(g.constant(onehot))?.sum(&[1], false)?;
    Ok(picked.mean_all()?.neg()?)
}

/// l_c + alpha*l_ssim + beta*l_pmse.
pub fn total_loss<'g, E: Scalar>(
    l_c: Var<'g, E>,
    l_ssim: Var<'g, E>,
    l_pmse: Var<'g, E>,
    weights: &LossWeights,
) -> Result<Var<'g, E>> {
    weights.validate()?;
    Ok(l_c
        .add(l_ssim.scale(weights.alpha)?)?
        .add(l_pmse.scale(weights.beta)?)?)
}
