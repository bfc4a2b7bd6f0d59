//! Model directories: `model.artc` holds `codec.*` and, after stage 2,
//! `ar.*` tensors; `model.json` is the generation sidecar.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use facemotion::ar::{ArConfig, ArModel, DecodeMode};
use facemotion::checkpoint::{load_checkpoint, save_checkpoint, strip_prefix};
use facemotion::codec::{CodecConfig, CodecModel, ScaleSchedule};
use facemotion::motion::FPS;
use serde::{Deserialize, Serialize};

pub const MODEL_FILE: &str = "model.artc";
pub const SIDECAR: &str = "model.json";
pub const STATE_FILE: &str = "state.artc";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub codec: CodecConfig,
    pub ar: Option<ArConfig>,
    pub schedule: ScaleSchedule,
    pub window_seconds: f64,
    pub decode: DecodeMode,
    pub seed: u64,
}

pub struct Bundle {
    pub codec: CodecModel,
    pub ar: Option<ArModel>,
    pub sidecar: Sidecar,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(SIDECAR)).with_context(|| format!("reading {}", dir.join(SIDECAR).display()))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(facemotion::Error::from)?;
        let all = load_checkpoint(&dir.join(MODEL_FILE))?;
        let codec = CodecModel::from_named(&sidecar.codec, &strip_prefix(&all, "codec."))?;
        let ar = match &sidecar.ar {
            Some(cfg) => Some(ArModel::from_named(cfg, &sidecar.codec, &strip_prefix(&all, "ar."))?),
            None => None,
        };
        Ok(Bundle { codec, ar, sidecar })
    }

    pub fn require_ar(&self) -> Result<&ArModel> {
        self.ar
            .as_ref()
            .ok_or_else(|| facemotion::Error::State("model directory has no stage-2 weights; run train-ar first".into()).into())
    }
}

pub fn sidecar_for(codec: &CodecConfig, ar: Option<&ArConfig>, decode: DecodeMode, seed: u64) -> Sidecar {
    Sidecar {
        codec: codec.clone(),
        ar: ar.cloned(),
        schedule: codec.schedule.clone(),
        window_seconds: codec.window() as f64 / FPS as f64,
        decode,
        seed,
    }
}

/// Writes weights and sidecar; `ar` tensors are included when present.
pub fn save_model(dir: &Path, codec: &CodecModel, ar: Option<&ArModel>, sidecar: &Sidecar) -> Result<()> {
    save_weights(&dir.join(MODEL_FILE), codec, ar)?;
    fs::write(dir.join(SIDECAR), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn save_weights(path: &Path, codec: &CodecModel, ar: Option<&ArModel>) -> Result<()> {
    let mut t = codec.to_named();
    if let Some(a) = ar {
        t.extend(a.to_named());
    }
    save_checkpoint(path, &t)?;
    Ok(())
}
