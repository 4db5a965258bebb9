//! Checkpoint files: named tensors in a safetensors container, with the model
//! config, schedule fingerprint and training position in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, ParamStore};
use crate::diffusion::{Schedule, ScheduleConfig};
use crate::error::{Error, Result};

/// Prefix of optimizer state tensors; everything else is a model parameter.
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub fingerprint: String,
    pub step: usize,
    pub boundary_enabled: bool,
    /// Serialized run configuration, when written by the trainer.
    pub run: Option<String>,
}

impl CheckpointMeta {
    fn to_map(&self) -> Result<HashMap<String, String>> {
        let mut m = HashMap::new();
        m.insert("denoiser".into(), serde_json::to_string(&self.denoiser)?);
        m.insert("schedule".into(), serde_json::to_string(&self.schedule)?);
        m.insert("fingerprint".into(), self.fingerprint.clone());
        m.insert("step".into(), self.step.to_string());
        m.insert("boundary_enabled".into(), self.boundary_enabled.to_string());
        if let Some(run) = &self.run {
            m.insert("run".into(), run.clone());
        }
        Ok(m)
    }

    fn from_map(m: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata field {k} missing")))
        };
        let parse_err = |k: &str| Error::Checkpoint(format!("metadata field {k} malformed"));
        Ok(Self {
            denoiser: serde_json::from_str(get("denoiser")?)?,
            schedule: serde_json::from_str(get("schedule")?)?,
            fingerprint: get("fingerprint")?.clone(),
            step: get("step")?.parse().map_err(|_| parse_err("step"))?,
            boundary_enabled: get("boundary_enabled")?
                .parse()
                .map_err(|_| parse_err("boundary_enabled"))?,
            run: m.get("run").cloned(),
        })
    }
}

/// Writes to a sibling temporary file and renames it into place, so a failed
/// write never clobbers an existing checkpoint.
pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta.to_map()?))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and verifies that the stored schedule reproduces the
/// stored fingerprint.
pub fn load(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let map = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let meta = CheckpointMeta::from_map(map)?;
    let schedule = Schedule::linear(meta.schedule.clone())?;
    if schedule.fingerprint() != meta.fingerprint {
        return Err(Error::CheckpointMismatch(format!(
            "schedule fingerprint {} does not match stored {}",
            schedule.fingerprint(),
            meta.fingerprint
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((meta, tensors.into_iter().collect()))
}

/// A model ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub denoiser: Denoiser,
    pub schedule: Schedule,
    pub meta: CheckpointMeta,
}

/// Loads model parameters, converted to `dtype` when given.
pub fn load_model(path: &Path, dtype: Option<DType>) -> Result<LoadedModel> {
    let (meta, tensors) = load(path)?;
    let stored = tensors
        .iter()
        .find(|(k, _)| !k.starts_with(OPTIMIZER_PREFIX))
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::Checkpoint("no model parameters".into()))?;
    let mut params = ParamStore::new(dtype.unwrap_or(stored), Device::Cpu);
    for (name, t) in tensors.iter().filter(|(k, _)| !k.starts_with(OPTIMIZER_PREFIX)) {
        params.insert(name, t)?;
    }
    let denoiser = Denoiser::from_params(meta.denoiser.clone(), params)?;
    let schedule = Schedule::linear(meta.schedule.clone())?;
    Ok(LoadedModel {
        denoiser,
        schedule,
        meta,
    })
}

/// Saves a bare model (no optimizer state).
pub fn save_model(path: &Path, model: &Denoiser, schedule: &Schedule, step: usize, boundary_enabled: bool) -> Result<()> {
    let meta = CheckpointMeta {
        denoiser: model.config.clone(),
        schedule: schedule.config().clone(),
        fingerprint: schedule.fingerprint(),
        step,
        boundary_enabled,
        run: None,
    };
    save(path, &meta, &model.params.tensors())
}
