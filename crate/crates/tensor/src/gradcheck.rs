//! Central finite-difference gradient checker.
//!
//! Runs the function under test as a fresh graph per evaluation, compares
//! analytic gradients against central differences, and reports the maximum
//! relative error `|a - n| / max(1, |a|, |n|)` over every input element.
//! Only meaningful in f64; finite differences drown in f32 rounding.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Builds a scalar-valued expression from leaves handed to it.
pub trait ScalarFn {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> Result<Var<'g, f64>>;
}

impl<F> ScalarFn for F
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
        self(g, inputs)
    }
}

fn run_forward(f: &dyn ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&g, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: v.shape().to_vec(),
        });
    }
    v.item()
}

/// Maximum relative error between analytic and numeric gradients of `f`
/// with respect to every element of every input.
pub fn gradcheck(f: &dyn ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    // analytic pass
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f.eval(&g, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        g.backward(out)?;
        vars.iter()
            .enumerate()
            .map(|(i, v)| v.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape())))
            .collect()
    };

    let mut max_err = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + eps;
            let plus = run_forward(f, &perturbed)?;
            perturbed[ti].data_mut()[ei] = orig - eps;
            let minus = run_forward(f, &perturbed)?;
            perturbed[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Forward with a deliberately wrong backward; exists so tests can prove the
/// checker catches faulty gradients.
#[doc(hidden)]
pub fn faulty_double<'g>(x: Var<'g, f64>, g: &'g Graph<f64>) -> Result<Var<'g, f64>> {
    // y = 2x built as x*2, but wired as x*3 on the tape: scale by 3 then
    // correct the forward value with a constant offset of -x (constant leaf),
    // leaving the forward right and the gradient wrong by 1x.
    let three = x.scale(3.0)?;
    let detached = g.constant(x.value());
    three.sub(detached)
}
