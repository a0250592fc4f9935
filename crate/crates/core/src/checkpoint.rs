//! Checkpoint directories.
//!
//! `checkpoint.json` holds the run configuration, step, seed and the name and
//! shape of every parameter. `params.bin` holds the parameters as
//! little-endian `f32` in manifest order; `optimizer.bin` holds the AdamW
//! first moments followed by the second moments in the same layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainState;
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::pipeline::PipelineConfig;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "checkpoint.json";
pub const PARAMS_NAME: &str = "params.bin";
pub const OPTIMIZER_NAME: &str = "optimizer.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: PipelineConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

fn write_f32s<'a>(path: &Path, tensors: impl Iterator<Item = &'a Tensor>) -> Result<()> {
    let mut bytes = Vec::new();
    for t in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32s(path: &Path, shapes: &[[usize; 2]]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    let total: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
    if bytes.len() != total * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            total * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    Ok(shapes
        .iter()
        .map(|s| Tensor::from_vec(s[0], s[1], values.by_ref().take(s[0] * s[1]).collect()))
        .collect())
}

pub fn save_checkpoint(dir: &Path, config: &PipelineConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let model = &state.model;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        step: state.step,
        seed: state.seed,
        params: model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: [p.rows(), p.cols()],
            })
            .collect(),
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    write_f32s(&dir.join(PARAMS_NAME), model.params().iter())?;
    write_f32s(&dir.join(OPTIMIZER_NAME), state.m.iter().chain(&state.v))?;
    Ok(())
}

/// Loads the configuration and training state. A missing optimizer file
/// yields zero moments.
pub fn load_checkpoint(dir: &Path) -> Result<(PipelineConfig, TrainState)> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("checkpoint manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let shapes: Vec<[usize; 2]> = manifest.params.iter().map(|p| p.shape).collect();
    let names: Vec<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    let params = read_f32s(&dir.join(PARAMS_NAME), &shapes)?;
    let model = Denoiser::from_params(manifest.config.model.clone(), names, params)?;
    let mut state = TrainState::new(model, manifest.seed);
    state.step = manifest.step;
    let opt_path = dir.join(OPTIMIZER_NAME);
    if opt_path.exists() {
        let doubled: Vec<[usize; 2]> = shapes.iter().chain(&shapes).copied().collect();
        let mut moments = read_f32s(&opt_path, &doubled)?;
        state.v = moments.split_off(shapes.len());
        state.m = moments;
    }
    Ok((manifest.config, state))
}
