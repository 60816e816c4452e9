//! Ground-truth depth construction for manipulated frames.
//!
//! Raw depth maps are 8-bit valued: background 0, face region positive, a
//! larger value means closer. The ground truth for training shifts every
//! genuine pixel up by `lambda` (clamped at 255) and zeroes manipulated
//! pixels, producing three well-separated bands: fake 0, background
//! `lambda`, real face in `(lambda, 255]`. Patch supervision targets are
//! per-patch means normalized to `[0,1]`.

use fmd_tensor::Tensor;

use crate::error::{validation, Result};

pub const DEFAULT_LAMBDA: f32 = 50.0;
pub const DEFAULT_MASK_THRESHOLD: f32 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthDomain {
    /// Integer-valued in `[0, 255]`.
    Raw,
    /// Real-valued in `[0, 1]`.
    Normalized,
}

#[derive(Clone, Debug)]
pub struct DepthMap {
    height: usize,
    width: usize,
    domain: DepthDomain,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn raw(height: usize, width: usize, values: Vec<f32>) -> Result<DepthMap> {
        if values.len() != height * width {
            return Err(validation(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        for &v in &values {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(validation(format!(
                    "raw depth value {v} is not an integer in [0,255]"
                )));
            }
        }
        Ok(DepthMap {
            height,
            width,
            domain: DepthDomain::Raw,
            values,
        })
    }

    pub fn normalized(height: usize, width: usize, values: Vec<f32>) -> Result<DepthMap> {
        if values.len() != height * width {
            return Err(validation("depth map size mismatch".to_string()));
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation(format!(
                    "normalized depth value {v} outside [0,1]"
                )));
            }
        }
        Ok(DepthMap {
            height,
            width,
            domain: DepthDomain::Normalized,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> DepthDomain {
        self.domain
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![self.height, self.width], self.values.clone()).expect("sizes checked")
    }

    pub fn raw_from_tensor(t: &Tensor<f32>) -> Result<DepthMap> {
        if t.rank() != 2 {
            return Err(validation(format!(
                "depth map tensor must be rank 2, got {:?}",
                t.shape()
            )));
        }
        DepthMap::raw(t.shape()[0], t.shape()[1], t.data().to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct FakeMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FakeMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<FakeMask> {
        if values.len() != height * width {
            return Err(validation("mask size mismatch".to_string()));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(validation("mask must be strictly binary".to_string()));
        }
        Ok(FakeMask {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> FakeMask {
        FakeMask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1.0
    }

    pub fn any(&self) -> bool {
        self.values.iter().any(|&v| v == 1.0)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![self.height, self.width], self.values.clone()).expect("sizes checked")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<FakeMask> {
        if t.rank() != 2 {
            return Err(validation("mask tensor must be rank 2".to_string()));
        }
        FakeMask::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }
}

/// Per-patch mean depths in `[0,1]` on a fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDepthVector {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl PatchDepthVector {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<PatchDepthVector> {
        if values.len() != rows * cols {
            return Err(validation(format!(
                "patch vector needs {} values for a {rows}x{cols} grid, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(validation("patch depth outside [0,1]".to_string()));
        }
        Ok(PatchDepthVector { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![self.rows * self.cols], self.values.clone()).expect("sizes checked")
    }
}

/// Mask of manipulated pixels: 1 where the max-over-channels absolute
/// difference between frame and original exceeds `threshold`.
pub fn compute_fake_mask(
    frame: &Tensor<f32>,
    original: &Tensor<f32>,
    threshold: f32,
) -> Result<FakeMask> {
    if frame.shape() != original.shape() || frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(validation(format!(
            "compute_fake_mask wants two [3,h,w] frames of one size, got {:?} and {:?}",
            frame.shape(),
            original.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let plane = h * w;
    let fd = frame.data();
    let od = original.data();
    let mut values = vec![0.0f32; plane];
    for i in 0..plane {
        let mut diff = 0.0f32;
        for c in 0..3 {
            diff = diff.max((fd[c * plane + i] - od[c * plane + i]).abs());
        }
        if diff > threshold {
            values[i] = 1.0;
        }
    }
    FakeMask::new(h, w, values)
}

/// Ground-truth depth: 0 on masked pixels, `min(depth + lambda, 255)`
/// elsewhere. `lambda` must be a positive integer <= 255.
pub fn ground_truth_depth(depth: &DepthMap, mask: &FakeMask, lambda: f32) -> Result<DepthMap> {
    if depth.domain() != DepthDomain::Raw {
        return Err(validation(
            "ground_truth_depth expects a raw-domain map".to_string(),
        ));
    }
    if depth.height() != mask.height() || depth.width() != mask.width() {
        return Err(validation(format!(
            "depth {}x{} vs mask {}x{}",
            depth.height(),
            depth.width(),
            mask.height(),
            mask.width()
        )));
    }
    if !(1.0..=255.0).contains(&lambda) || lambda.fract() != 0.0 {
        return Err(validation(format!(
            "lambda must be a positive integer <= 255, got {lambda}"
        )));
    }
    let values = depth
        .values()
        .iter()
        .zip(mask.values())
        .map(|(&d, &m)| {
            if m == 1.0 {
                0.0
            } else {
                (d + lambda).min(255.0)
            }
        })
        .collect();
    DepthMap::raw(depth.height(), depth.width(), values)
}

/// Reduces a raw map to per-patch means, normalized to `[0,1]` by 255.
pub fn patch_average(map: &DepthMap, rows: usize, cols: usize) -> Result<PatchDepthVector> {
    if map.domain() != DepthDomain::Raw {
        return Err(validation(
            "patch_average expects a raw-domain map".to_string(),
        ));
    }
    if rows == 0 || cols == 0 || map.height() % rows != 0 || map.width() % cols != 0 {
        return Err(validation(format!(
            "map {}x{} is not divisible by the {rows}x{cols} patch grid; resize the input",
            map.height(),
            map.width()
        )));
    }
    let (ph, pw) = (map.height() / rows, map.width() / cols);
    let mut values = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut sum = 0.0f32;
            for dy in 0..ph {
                for dx in 0..pw {
                    sum += map.at(py * ph + dy, px * pw + dx);
                }
            }
            values.push(sum / (ph * pw) as f32 / 255.0);
        }
    }
    PatchDepthVector::new(rows, cols, values)
}
