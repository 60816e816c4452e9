//! Depth-assisted face-manipulation detection: patch-wise depth estimation,
//! depth-guided feature attention, cross-frame inconsistency attention, the
//! composite training loss, metrics, and a seeded synthetic data generator.

pub mod backbone;
pub mod depth_gt;
pub mod error;
pub mod fdmt;
pub mod gradchecks;
pub mod losses;
pub mod mda;
pub mod metrics;
pub mod params;
pub mod rdia;
pub mod synth;

pub use error::{ModelError, Result};
pub use params::{ParamSet, Scope, VarSet};
