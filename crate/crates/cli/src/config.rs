use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use facemotion::ar::{ArConfig, DecodeMode};
use facemotion::codec::CodecConfig;
use facemotion::metrics::FddConvention;
use facemotion::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub clips: usize,
    pub frames: usize,
    pub n_shape: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub scale: f64,
    pub fdd: FddConvention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub seconds: f64,
    pub warmup_windows: usize,
}

/// Every tunable of the pipeline, fully resolved before a subcommand runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub codec: CodecConfig,
    pub ar: ArConfig,
    pub codec_train: TrainConfig,
    pub ar_train: TrainConfig,
    pub freeze_style: bool,
    /// Use only the first `n` clips of a dataset.
    pub max_clips: Option<usize>,
    pub checkpoint_every: usize,
    pub decode: DecodeMode,
    pub synth: SynthSettings,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        RunConfig {
            command: String::new(),
            seed,
            codec: CodecConfig::desk(),
            ar: ArConfig::desk(),
            codec_train: TrainConfig { lr_start: 2e-3, lr_end: 2e-4, batch_size: 4, seed, ..TrainConfig::default() },
            ar_train: TrainConfig { lr_start: 1e-3, lr_end: 1e-4, batch_size: 4, seed, ..TrainConfig::default() },
            freeze_style: false,
            max_clips: None,
            checkpoint_every: 500,
            decode: DecodeMode::Argmax,
            synth: SynthSettings { clips: 32, frames: 200, n_shape: 4 },
            eval: EvalSettings { scale: 1.0, fdd: FddConvention::default() },
            bench: BenchSettings { seconds: 40.0, warmup_windows: 2 },
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with a (possibly partial) JSON file.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = file {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let over: Value = serde_json::from_str(&text).map_err(facemotion::Error::from)?;
            merge(&mut v, over);
        }
        Ok(serde_json::from_value(v).map_err(facemotion::Error::from)?)
    }

    pub fn validate(&self) -> facemotion::Result<()> {
        self.codec.validate()?;
        self.ar.validate()?;
        self.codec_train.validate()?;
        self.ar_train.validate()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_overrides_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "codec": {"hidden": 32}, "codec_train": {"iterations": 10}}"#).unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.codec.hidden, 32);
        assert_eq!(c.codec.heads, CodecConfig::desk().heads);
        assert_eq!(c.codec_train.iterations, 10);
    }

    #[test]
    fn default_roundtrips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
