//! Composite gradient checks per component, in f64 at toy sizes.
//!
//! Each entry re-runs the component's real forward with every parameter as
//! a checked input and compares the backward pass against central finite
//! differences. The report is the backbone of the `gradcheck` subcommand:
//! one row per registered component, maximum relative error each.

use fmd_tensor::error::Result as TensorResult;
use fmd_tensor::gradcheck::{gradcheck, ScalarFn, DEFAULT_EPS};
use fmd_tensor::{Graph, Rng, Tensor, TensorError, Var};

use crate::error::Result;
use crate::params::ParamSet;
use crate::{backbone, fdmt, losses, mda, rdia};

pub const FAIL_THRESHOLD: f64 = 1e-4;
pub const TARGET: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FAIL_THRESHOLD
    }
}

pub const COMPONENTS: [&str; 7] = [
    "fdmt",
    "backbone",
    "mda",
    "rdia",
    "ssim_loss",
    "patch_mse",
    "cross_entropy",
];

fn to_tensor_err(e: crate::ModelError) -> TensorError {
    TensorError::Config {
        detail: e.to_string(),
    }
}

struct FdmtCheck {
    cfg: fdmt::FdmtConfig,
    params: ParamSet<f64>,
    patches: Tensor<f64>,
}

impl ScalarFn for FdmtCheck {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        let vars = self
            .params
            .vars_from_ordered(inputs)
            .map_err(to_tensor_err)?;
        let patches = g.constant(self.patches.clone());
        let out =
            fdmt::forward_patches(g, &vars.root(), &self.cfg, patches).map_err(to_tensor_err)?;
        out.depth_pred.mean_all()
    }
}

struct BackboneCheck {
    cfg: backbone::BackboneConfig,
    params: ParamSet<f64>,
    frame: Tensor<f64>,
}

impl ScalarFn for BackboneCheck {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        let vars = self
            .params
            .vars_from_ordered(inputs)
            .map_err(to_tensor_err)?;
        let logits = backbone::forward_unhooked(g, &vars.root(), &self.cfg, &self.frame)
            .map_err(to_tensor_err)?;
        let batched = logits.reshape(&[1, 2])?;
        losses::cross_entropy(g, batched, &[1]).map_err(to_tensor_err)
    }
}

struct MdaCheck {
    cfg: mda::MdaConfig,
    params: ParamSet<f64>,
}

impl ScalarFn for MdaCheck {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        let n = self.params.len();
        let vars = self
            .params
            .vars_from_ordered(&inputs[..n])
            .map_err(to_tensor_err)?;
        let f_d = inputs[n];
        let f_rgb = inputs[n + 1];
        let f_en = mda::forward(g, &vars.root(), &self.cfg, f_d, f_rgb).map_err(to_tensor_err)?;
        f_en.mul(f_en)?.mean_all()
    }
}

struct RdiaCheck {
    cfg: rdia::RdiaConfig,
    params: ParamSet<f64>,
    rgb: Tensor<f64>,
}

impl ScalarFn for RdiaCheck {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        let n = self.params.len();
        let vars = self
            .params
            .vars_from_ordered(&inputs[..n])
            .map_err(to_tensor_err)?;
        let depth = inputs[n];
        let f_en = inputs[n + 1];
        let rgb = g.constant(self.rgb.clone());
        let out =
            rdia::forward(g, &vars.root(), &self.cfg, rgb, depth, f_en).map_err(to_tensor_err)?;
        let batched = out.logits.reshape(&[1, 2])?;
        losses::cross_entropy(g, batched, &[1]).map_err(to_tensor_err)
    }
}

struct SsimCheck;

impl ScalarFn for SsimCheck {
    fn eval<'g>(&self, _g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        losses::ssim_loss(inputs[0], inputs[1]).map_err(to_tensor_err)
    }
}

struct PatchMseCheck;

impl ScalarFn for PatchMseCheck {
    fn eval<'g>(&self, _g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        losses::patch_mse(inputs[0], inputs[1], losses::PmseReduction::Sum).map_err(to_tensor_err)
    }
}

struct CrossEntropyCheck;

impl ScalarFn for CrossEntropyCheck {
    fn eval<'g>(&self, g: &'g Graph<f64>, inputs: &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>> {
        losses::cross_entropy(g, inputs[0], &[0, 1, 0]).map_err(to_tensor_err)
    }
}

fn check_one(
    name: &'static str,
    f: &dyn ScalarFn,
    inputs: &[Tensor<f64>],
) -> Result<ComponentReport> {
    let max_rel_err = gradcheck(f, inputs, DEFAULT_EPS)?;
    Ok(ComponentReport { name, max_rel_err })
}

/// Runs every registered component check and returns one report per entry
/// of `COMPONENTS`, in order.
pub fn run_all() -> Result<Vec<ComponentReport>> {
    let mut rng = Rng::new(0xfd17);
    let mut reports = Vec::new();

    // fdmt: 6x6 image, 2x2 patches -> 9 tokens, 1 block
    {
        let cfg = fdmt::FdmtConfig {
            image_hw: (6, 6),
            grid: (3, 3),
            embed: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let params: ParamSet<f64> = fdmt::init_params(&cfg, 1);
        let patches = Tensor::rand_uniform(&[9, cfg.patch_dim()], 0.0, 1.0, &mut rng);
        let inputs = params.tensors();
        let check = FdmtCheck {
            cfg,
            params,
            patches,
        };
        reports.push(check_one("fdmt", &check, &inputs)?);
    }

    // backbone: tiny 8x8 stack, hook mid-way, cross-entropy head
    {
        let cfg = backbone::BackboneConfig {
            input_hw: (8, 8),
            stages: vec![
                backbone::StageSpec {
                    c_out: 4,
                    stride: 1,
                },
                backbone::StageSpec {
                    c_out: 6,
                    stride: 2,
                },
                backbone::StageSpec {
                    c_out: 6,
                    stride: 2,
                },
                backbone::StageSpec {
                    c_out: 6,
                    stride: 1,
                },
            ],
            hook: 2,
            classes: 2,
        };
        let params: ParamSet<f64> = backbone::init_params(&cfg, 2);
        let frame = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let inputs = params.tensors();
        let check = BackboneCheck { cfg, params, frame };
        reports.push(check_one("backbone", &check, &inputs)?);
    }

    // mda: 2x2 spatial, 2 heads
    {
        let cfg = mda::MdaConfig {
            heads: 2,
            head_width: 3,
            scale: mda::AttentionScale::RgbChannels,
            mlp_ratio: 2,
        };
        let params: ParamSet<f64> = mda::init_params(&cfg, 3, 4, 3);
        let mut inputs = params.tensors();
        inputs.push(Tensor::rand_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng));
        inputs.push(Tensor::rand_uniform(&[4, 2, 2], -1.0, 1.0, &mut rng));
        let check = MdaCheck { cfg, params };
        reports.push(check_one("mda", &check, &inputs)?);
    }

    // rdia: 3 frames of 4x4, 3 channels
    {
        let cfg = rdia::RdiaConfig {
            channels: 3,
            chi_mid: 2,
            cls_c1: 2,
            cls_c2: 2,
        };
        let params: ParamSet<f64> = rdia::init_params(&cfg, 4);
        let mut inputs = params.tensors();
        inputs.push(Tensor::rand_uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng)); // depth stack
        inputs.push(Tensor::rand_uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut rng)); // f_en
        let rgb = Tensor::rand_uniform(&[3, 3, 4, 4], 0.0, 1.0, &mut rng);
        let check = RdiaCheck { cfg, params, rgb };
        reports.push(check_one("rdia", &check, &inputs)?);
    }

    // losses
    {
        let a = Tensor::rand_uniform(&[2, 6], 0.1, 0.9, &mut rng);
        let b = Tensor::rand_uniform(&[2, 6], 0.1, 0.9, &mut rng);
        reports.push(check_one("ssim_loss", &SsimCheck, &[a.clone(), b.clone()])?);
        reports.push(check_one("patch_mse", &PatchMseCheck, &[a, b])?);
        let logits = Tensor::rand_uniform(&[3, 2], -1.5, 1.5, &mut rng);
        reports.push(check_one("cross_entropy", &CrossEntropyCheck, &[logits])?);
    }

    debug_assert_eq!(reports.len(), COMPONENTS.len());
    Ok(reports)
}

/// Same roster plus a component whose backward is wrong on purpose; proves
/// the checker and the exit logic notice.
#[doc(hidden)]
pub fn run_all_with_injected_fault() -> Result<Vec<ComponentReport>> {
    struct Faulty;
    impl ScalarFn for Faulty {
        fn eval<'g>(
            &self,
            g: &'g Graph<f64>,
            inputs: &[Var<'g, f64>],
        ) -> TensorResult<Var<'g, f64>> {
            fmd_tensor::gradcheck::faulty_double(inputs[0], g)?.sum_all()
        }
    }
    let mut reports = run_all()?;
    let x = Tensor::from_vec(vec![4], vec![0.3, -0.7, 0.2, 0.9])?;
    reports.push(ComponentReport {
        name: "fault_injected",
        max_rel_err: gradcheck(&Faulty, &[x], DEFAULT_EPS)?,
    });
    Ok(reports)
}
