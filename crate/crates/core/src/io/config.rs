//! Run configuration as TOML. Every key has a default and unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! revnet_blocks = 8
//! predictor_hidden = 512
//! cspn_iterations = 3
//! [model.deformation]        # overridden by the scene's own layout
//! resolutions = [8, 16]
//! width = 16
//! hidden = 64
//!
//! [stage1]                   # see Stage1Config
//! [stage2]                   # see Stage2Config
//!
//! [output]
//! checkpoint_every = 0       # 0 disables periodic checkpoints
//! metrics_csv = "metrics.csv"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::IoError;
use crate::model::ModelConfig;
use crate::train::{Stage1Config, Stage2Config, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write `<out>.step<N>` every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Per-step losses as CSV; relative paths resolve against the working
    /// directory. Omitted means no log.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_csv: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let cfg: Self = toml::from_str(text).map_err(|e| IoError::Invalid(format!("config: {e}")))?;
        cfg.train().validate().map_err(|e| IoError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = crate::io::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| IoError::Format { offset: e.valid_up_to(), msg: "config is not UTF-8".into() })?;
        Self::parse(text).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, stage1: self.stage1.clone(), stage2: self.stage2.clone() }
    }
}

/// A TOML [`SceneSpec`](crate::scene::SceneSpec); missing keys default.
pub fn load_scene_spec(path: &Path) -> Result<crate::scene::SceneSpec, IoError> {
    let bytes = crate::io::read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| IoError::Format { offset: e.valid_up_to(), msg: "scene spec is not UTF-8".into() })?;
    toml::from_str(text).map_err(|e| IoError::Invalid(format!("{}: {e}", path.display())))
}
