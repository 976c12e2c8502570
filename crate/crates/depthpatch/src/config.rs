//! Run configuration files (TOML or JSON, chosen by extension).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use depthpatch_core::attack::AttackConfig;
use depthpatch_core::metrics::EvalTransforms;
use depthpatch_core::pipeline::TransformRanges;
use depthpatch_core::DetectorConfig;

use crate::error::{AppError, AppResult};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    /// Write a checkpoint every this many epochs (0 disables them).
    pub checkpoint_every: usize,
    /// Evaluate the validation split with sampled transforms from this seed
    /// instead of identity placement.
    pub eval_transform_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            detector: DetectorConfig::default(),
            checkpoint_every: 50,
            eval_transform_seed: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> AppResult<()> {
        self.attack.validate()?;
        self.detector.validate()?;
        Ok(())
    }

    pub fn eval_transforms(&self) -> EvalTransforms {
        match self.eval_transform_seed {
            None => EvalTransforms::Identity,
            Some(seed) => EvalTransforms::Sampled {
                seed,
                ranges: self.attack.transforms.clone(),
            },
        }
    }

    /// Collapse every transform range to the identity.
    pub fn freeze_transforms(&mut self) {
        self.attack.transforms = TransformRanges::identity();
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("json")
}

pub fn load_config(path: &Path) -> AppResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = if is_json(path) {
        serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate().map_err(|e| match e {
        AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> AppResult<()> {
    let text = if is_json(path) {
        serde_json::to_string_pretty(cfg).map_err(|e| AppError::Config(e.to_string()))?
    } else {
        toml::to_string_pretty(cfg).map_err(|e| AppError::Config(e.to_string()))?
    };
    write_atomic(path, text.as_bytes())
}
