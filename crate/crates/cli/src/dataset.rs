//! Dataset files: one directory holding `manifest.txt` plus FDTN tensors
//! per item (frames, depth, masks).

use std::fs;
use std::path::Path;

use fmd_model::synth::{self, DatasetManifest, ItemMeta, Label, LabeledSequence, Split};
use fmd_tensor::{io, Tensor};

use crate::error::{validation, Result};

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let items_dir = dir.join("items");
    fs::create_dir_all(&items_dir)?;
    for meta in &manifest.items {
        let spec = synth::spec_for_item(meta, manifest.resolution, manifest.frames);
        let seq = synth::generate_sequence(&spec)?;
        save_item(&items_dir, &meta.id, &seq)?;
    }
    fs::write(dir.join("manifest.txt"), manifest.to_text())?;
    Ok(())
}

pub fn save_item(items_dir: &Path, id: &str, seq: &LabeledSequence) -> Result<()> {
    io::save_tensor(&items_dir.join(format!("{id}.frames.fdtn")), &seq.frames)?;
    io::save_tensor(&items_dir.join(format!("{id}.depth.fdtn")), &seq.depth)?;
    io::save_tensor(&items_dir.join(format!("{id}.masks.fdtn")), &seq.masks)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| validation(format!("cannot read dataset manifest {path:?}: {e}")))?;
    Ok(DatasetManifest::from_text(&text)?)
}

pub fn load_item(dir: &Path, meta: &ItemMeta) -> Result<LabeledSequence> {
    let items_dir = dir.join("items");
    let frames: Tensor<f32> = io::load_tensor(&items_dir.join(format!("{}.frames.fdtn", meta.id)))?;
    let depth: Tensor<f32> = io::load_tensor(&items_dir.join(format!("{}.depth.fdtn", meta.id)))?;
    let masks: Tensor<f32> = io::load_tensor(&items_dir.join(format!("{}.masks.fdtn", meta.id)))?;
    Ok(LabeledSequence {
        frames,
        depth,
        masks,
        label: meta.label,
    })
}

pub struct LoadedItem {
    pub meta: ItemMeta,
    pub seq: LabeledSequence,
}

/// Loads one split into memory, validating shapes against the manifest and
/// the expectations of the run config.
pub fn load_split(
    dir: &Path,
    split: Split,
    resolution: usize,
    frames: usize,
) -> Result<Vec<LoadedItem>> {
    let manifest = read_manifest(dir)?;
    if manifest.resolution != resolution || manifest.frames != frames {
        return Err(validation(format!(
            "dataset is {}px x {} frames but the run expects {}px x {}",
            manifest.resolution, manifest.frames, resolution, frames
        )));
    }
    let metas: Vec<ItemMeta> = manifest
        .items
        .iter()
        .filter(|m| m.split == split)
        .cloned()
        .collect();
    if metas.is_empty() {
        return Err(validation(format!("split '{split}' is empty in {dir:?}")));
    }
    let mut out = Vec::with_capacity(metas.len());
    for meta in metas {
        let seq = load_item(dir, &meta)?;
        let n = seq.num_frames();
        let (h, w) = seq.resolution();
        if n != frames || h != resolution || w != resolution {
            return Err(validation(format!(
                "item {} has shape {n}x{h}x{w}, expected {frames}x{resolution}x{resolution}",
                meta.id
            )));
        }
        let is_fake = seq.masks.data().iter().any(|&v| v == 1.0);
        if is_fake != (meta.label == Label::Fake) {
            return Err(validation(format!(
                "item {} label disagrees with its masks",
                meta.id
            )));
        }
        out.push(LoadedItem { meta, seq });
    }
    Ok(out)
}
