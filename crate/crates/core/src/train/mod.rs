//! Two-stage optimization, the optimizer and the gradient-check registry.

pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod predictor;
pub mod stage1;
pub mod stage2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tape::Grads;

pub use optim::Adam;
pub use stage1::{train_stage1, train_stage1_with, Stage1Report};
pub use stage2::{train_stage2, train_stage2_with, Stage2Report};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub coarse_iters: usize,
    pub fine_iters: usize,
    /// Gaussians and deformation field: exponential decay from `lr_geometry`
    /// to `lr_geometry_final` over the whole run.
    pub lr_geometry: f64,
    pub lr_geometry_final: f64,
    /// Heads and reversible network.
    pub lr_network: f64,
    pub lambda_embed_color: f64,
    pub lambda_embed_feat: f64,
    /// Held-out PSNR every this many steps (0 disables).
    pub validate_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            coarse_iters: 3000,
            fine_iters: 1500,
            lr_geometry: 1.6e-3,
            lr_geometry_final: 1.6e-4,
            lr_network: 1e-3,
            lambda_embed_color: 1.0,
            lambda_embed_feat: 1.0,
            validate_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub iters: usize,
    pub lr: f64,
    pub lambda_cov: f64,
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub lambda_pro: f64,
    /// Side of the square style images fed to `ℛ_f`.
    pub style_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            iters: 1500,
            lr: 1e-3,
            lambda_cov: 1.0,
            lambda_content: 1.0,
            lambda_style: 10.0,
            lambda_pro: 1.0,
            style_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let weights = [
            s1.lambda_embed_color,
            s1.lambda_embed_feat,
            s2.lambda_cov,
            s2.lambda_content,
            s2.lambda_style,
            s2.lambda_pro,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        let rates = [s1.lr_geometry, s1.lr_geometry_final, s1.lr_network, s2.lr];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if s2.style_size < crate::nets::extractors::MIN_STYLE_SIZE {
            return Err(TrainError::Config(format!("style_size {} below 64", s2.style_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("non-finite {what} at step {step} (parameter group `{group}`)")]
    NonFinite { step: usize, what: String, group: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Hook(String),
}

/// Prefix up to the first `.` of a parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// First parameter group holding a non-finite gradient, if any.
pub(crate) fn non_finite_group(store: &ParamStore, grads: &Grads) -> Option<String> {
    grads.param_grads().iter().find(|(_, g)| !g.all_finite()).map(|(id, _)| group_of(store.name(*id)).to_string())
}

/// `10 log10(1 / mse)` of two images after clamping both to `[0, 1]`.
pub fn psnr(a: &crate::tensor::Tensor, b: &crate::tensor::Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2)).sum::<f64>()
        / a.numel() as f64;
    10.0 * (1.0 / mse.max(1e-20)).log10()
}
