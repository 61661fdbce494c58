//! Dumping generated samples as NIfTI volumes plus JSON metadata.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::{SampleMetadata, TrainingSample};
use crate::nifti;

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub inputs: Vec<String>,
    pub target: String,
    pub reference: String,
    pub metadata: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `{index}_U{c}.nii`, `{index}_V{c}.nii` (channels 1-based),
/// `{index}_Y.nii`, `{index}_ref.nii` and `{index}_meta.json`.
pub fn write_sample(dir: &Path, s: &TrainingSample) -> Result<ManifestEntry> {
    let i = s.metadata.sample_index;
    let stem = format!("{i:06}");
    let mut inputs = Vec::new();
    for (k, v) in s.inputs.iter().enumerate() {
        let name = format!("{stem}_{}{}.nii", if k % 2 == 0 { 'U' } else { 'V' }, k / 2 + 1);
        nifti::write_volume(v, &dir.join(&name))?;
        inputs.push(name);
    }
    let target = format!("{stem}_Y.nii");
    nifti::write_volume(&s.target.residual, &dir.join(&target))?;
    let reference = format!("{stem}_ref.nii");
    nifti::write_volume(&s.target.reference, &dir.join(&reference))?;
    let metadata = format!("{stem}_meta.json");
    write_json(&dir.join(&metadata), &s.metadata)?;
    Ok(ManifestEntry { index: i, inputs, target, reference, metadata })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_manifest(dir: &Path, seed: u64, samples: Vec<ManifestEntry>) -> Result<PathBuf> {
    let p = dir.join("manifest.json");
    write_json(&p, &Manifest { seed, count: samples.len(), samples })?;
    Ok(p)
}

pub fn read_metadata(path: &Path) -> Result<SampleMetadata> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
