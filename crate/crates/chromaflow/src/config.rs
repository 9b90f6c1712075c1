//! Run configuration: one JSON document with every knob defaulted, so an
//! empty object `{}` is a valid config. Unknown keys are rejected, and the
//! parsed document is echoed into every artifact for provenance.

use std::path::Path;

use crate::evalkit;
use crate::flow::FlowConfig;
use crate::pipeline::{InferConfig, ModelConfig, TrainConfig};
use crate::{Error, Result};

/// Dataset location and synthetic-generation parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root (holds `manifest.json` after `synth-gen`).
    pub root: String,
    /// Clip count for `synth-gen`.
    pub clips: usize,
    pub canvas: [usize; 2],
    pub frames: usize,
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            clips: 200,
            canvas: [64, 64],
            frames: 8,
            base_seed: 7,
        }
    }
}

/// Evaluation parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Which manifest split to evaluate.
    pub split: String,
    /// Use stored ground-truth flows/masks when available (else estimate).
    pub use_gt_flow: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            use_gt_flow: true,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub flow: FlowConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.clips == 0 || self.data.frames == 0 {
            return Err(Error::InvalidConfig("data.clips and data.frames must be positive".into()));
        }
        match self.eval.split.as_str() {
            "train" | "val" | "test" => {}
            s => {
                return Err(Error::InvalidConfig(format!(
                    "eval.split must be train/val/test, got {s:?}"
                )))
            }
        }
        Ok(())
    }

    /// Applies the `CHROMAFLOW_SEED` environment override to the training
    /// and data seeds.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CHROMAFLOW_SEED") {
            let seed: u64 = v.parse().map_err(|_| {
                Error::InvalidConfig(format!("CHROMAFLOW_SEED must be an integer, got {v:?}"))
            })?;
            self.train.seed = seed;
            self.data.base_seed = seed;
        }
        Ok(())
    }

    /// The config as a JSON value, for echoing into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serializable")
    }
}

/// Evaluation report alias re-exported for CLI consumers.
pub type EvalReport = evalkit::EvalReport;
