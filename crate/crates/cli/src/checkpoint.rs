//! Checkpoint directories: parameters, optimizer state, config, and meta.
//!
//! Layout:
//!   params/        FDTN tensors + manifest (integrity-checked on load)
//!   optimizer/m|v  first/second moment tensors for the active parameters
//!   optimizer/state.txt
//!   config.txt     canonical run config
//!   meta.txt       epoch, config hash, seed, mode

use std::fs;
use std::path::Path;

use fmd_model::params::ParamSet;
use fmd_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{validation, Result};

pub struct OptimizerState {
    pub step: u64,
    pub active: Vec<String>,
    pub moments: Vec<(Tensor<f32>, Tensor<f32>)>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
}

pub fn save(
    dir: &Path,
    config: &RunConfig,
    params: &ParamSet<f32>,
    epoch: usize,
    optimizer: Option<(&[String], u64, &[(Tensor<f32>, Tensor<f32>)])>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    params.save_dir(&dir.join("params"))?;
    if let Some((active, step, moments)) = optimizer {
        if active.len() != moments.len() {
            return Err(validation(
                "optimizer state misaligned with active set".to_string(),
            ));
        }
        let mut m_set: ParamSet<f32> = ParamSet::new();
        let mut v_set: ParamSet<f32> = ParamSet::new();
        for (name, (m, v)) in active.iter().zip(moments) {
            m_set.insert(name.clone(), m.clone());
            v_set.insert(name.clone(), v.clone());
        }
        m_set.save_dir(&dir.join("optimizer").join("m"))?;
        v_set.save_dir(&dir.join("optimizer").join("v"))?;
        fs::write(
            dir.join("optimizer").join("state.txt"),
            format!("step={step}\n"),
        )?;
    }
    fs::write(dir.join("config.txt"), config.canonical_text())?;
    fs::write(
        dir.join("meta.txt"),
        format!(
            "epoch={epoch}\nconfig_hash={}\nseed={}\nmode={}\n",
            config.hash(),
            config.seed,
            config.mode
        ),
    )?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let config_text = fs::read_to_string(dir.join("config.txt"))
        .map_err(|e| validation(format!("cannot read {dir:?}/config.txt: {e}")))?;
    let config = RunConfig::parse(&config_text)?;

    let meta = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| validation(format!("cannot read {dir:?}/meta.txt: {e}")))?;
    let mut epoch = None;
    let mut stored_hash = None;
    for line in meta.lines() {
        if let Some(v) = line.strip_prefix("epoch=") {
            epoch = v.parse().ok();
        }
        if let Some(v) = line.strip_prefix("config_hash=") {
            stored_hash = Some(v.to_string());
        }
    }
    let epoch = epoch.ok_or_else(|| validation("meta.txt missing epoch".to_string()))?;
    let stored_hash =
        stored_hash.ok_or_else(|| validation("meta.txt missing config_hash".to_string()))?;
    if stored_hash != config.hash() {
        return Err(validation(format!(
            "checkpoint config hash {stored_hash} does not match its config text ({})",
            config.hash()
        )));
    }

    let params = ParamSet::load_dir(&dir.join("params"))?;

    let optimizer = if dir.join("optimizer").join("state.txt").exists() {
        let state = fs::read_to_string(dir.join("optimizer").join("state.txt"))?;
        let step = state
            .lines()
            .find_map(|l| l.strip_prefix("step="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| validation("optimizer state.txt missing step".to_string()))?;
        let m_set: ParamSet<f32> = ParamSet::load_dir(&dir.join("optimizer").join("m"))?;
        let v_set: ParamSet<f32> = ParamSet::load_dir(&dir.join("optimizer").join("v"))?;
        if m_set.len() != v_set.len() {
            return Err(validation("optimizer moment sets disagree".to_string()));
        }
        let active: Vec<String> = m_set.names().map(String::from).collect();
        let moments = m_set
            .entries()
            .iter()
            .zip(v_set.entries())
            .map(|((_, m), (_, v))| (m.clone(), v.clone()))
            .collect();
        Some(OptimizerState {
            step,
            active,
            moments,
        })
    } else {
        None
    };

    Ok(Checkpoint {
        config,
        params,
        epoch,
        optimizer,
    })
}

/// Rejects checkpoints whose config hash differs from an explicitly
/// supplied run config.
pub fn check_compatible(config: &RunConfig, loaded: &Checkpoint) -> Result<()> {
    if config.hash() != loaded.config.hash() {
        return Err(validation(format!(
            "checkpoint was trained with config hash {}, this run has {}",
            loaded.config.hash(),
            config.hash()
        )));
    }
    Ok(())
}
