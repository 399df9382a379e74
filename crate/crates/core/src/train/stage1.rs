//! Embedded-Gaussian reconstruction: coarse static phase, then the fine
//! phase with the deformation field unfrozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{is_stage1, Model};
use crate::render::{RasterMode, Renderer};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::losses::loss_embed;
use crate::train::optim::{exponential_lr, Adam};
use crate::train::{non_finite_group, psnr, Stage1Config, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage1Row {
    pub step: usize,
    pub phase: &'static str,
    pub camera: usize,
    pub timestep: usize,
    pub loss: f64,
    pub loss_color: f64,
    pub loss_feat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Validation {
    pub step: usize,
    pub psnr_color: f64,
    pub psnr_feat: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Stage1Report {
    pub rows: Vec<Stage1Row>,
    pub validations: Vec<Validation>,
}

impl Stage1Report {
    pub fn final_validation(&self) -> Option<&Validation> {
        self.validations.last()
    }

    /// Mean loss over rows `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let r = &self.rows[from.min(self.rows.len())..to.min(self.rows.len())];
        r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64
    }
}

fn is_geometry(name: &str) -> bool {
    name.starts_with("gaussians.") || name.starts_with("deform.")
}

/// Mean held-out PSNR of `C` and of `clamp(R_rev(F))` over all timestamps.
pub fn holdout_psnr(model: &Model, ground_truth: &[Tensor], static_scene: bool) -> (f64, f64) {
    let cam = model.meta.holdout_camera();
    let nt = model.meta.timestamps.len();
    let renderer =
        Renderer { deformation: (!static_scene).then_some(&model.deformation), ..model.renderer(RasterMode::Tiled) };
    let (mut pc, mut pf) = (0.0, 0.0);
    for (k, &t) in model.meta.timestamps.iter().enumerate() {
        let out = renderer.render(&model.store, &model.meta.cameras[cam], t);
        let gt = &ground_truth[cam * nt + k];
        pc += psnr(&out.color, gt);
        pf += psnr(&model.decode_features(&out.feature), gt);
    }
    (pc / nt as f64, pf / nt as f64)
}

/// Trains Gaussians, deformation field, heads and the reversible network on
/// the training cameras. `ground_truth` is indexed `camera * T + k`.
pub fn train_stage1(
    model: &mut Model,
    ground_truth: &[Tensor],
    config: &Stage1Config,
    seed: u64,
) -> Result<Stage1Report, TrainError> {
    train_stage1_with(model, ground_truth, config, seed, &mut |_, _| Ok(()))
}

/// [`train_stage1`] calling `after_step(completed_steps, model)` after every
/// optimizer step, e.g. for periodic checkpoints.
pub fn train_stage1_with(
    model: &mut Model,
    ground_truth: &[Tensor],
    config: &Stage1Config,
    seed: u64,
    after_step: &mut dyn FnMut(usize, &Model) -> Result<(), TrainError>,
) -> Result<Stage1Report, TrainError> {
    let nt = model.meta.timestamps.len();
    if ground_truth.len() != model.meta.cameras.len() * nt {
        return Err(TrainError::Input(format!(
            "expected {} ground-truth images, got {}",
            model.meta.cameras.len() * nt,
            ground_truth.len()
        )));
    }
    let cams = model.meta.training_cameras();
    let total = config.coarse_iters + config.fine_iters;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new();
    let mut report = Stage1Report::default();
    for step in 0..total {
        let coarse = step < config.coarse_iters;
        let cam = cams[rng.random_range(0..cams.len())];
        let k = rng.random_range(0..nt);
        let t = model.meta.timestamps[k];
        let mut tape = if coarse {
            Tape::with_trainable(|n| is_stage1(n) && !n.starts_with("deform."))
        } else {
            Tape::with_trainable(is_stage1)
        };
        let renderer =
            Renderer { deformation: (!coarse).then_some(&model.deformation), ..model.renderer(RasterMode::Tiled) };
        let rv = renderer.render_vars(&mut tape, &model.store, &model.meta.cameras[cam], t);
        let recon = model.revnet.rev_inverse(&mut tape, &model.store, rv.feature);
        let gt = tape.constant(ground_truth[cam * nt + k].clone());
        let lc = tape.mse(rv.color, gt);
        let lf = tape.mse(recon, gt);
        let loss = loss_embed(&mut tape, rv.color, recon, gt, config.lambda_embed_color, config.lambda_embed_feat);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss);
        if !value.is_finite() {
            let group = non_finite_group(&model.store, &grads).unwrap_or_else(|| "loss".into());
            return Err(TrainError::NonFinite { step, what: "loss".into(), group });
        }
        if let Some(group) = non_finite_group(&model.store, &grads) {
            return Err(TrainError::NonFinite { step, what: "gradient".into(), group });
        }
        let lr_geo = exponential_lr(config.lr_geometry, config.lr_geometry_final, step, total);
        for (id, g) in grads.param_grads() {
            let lr = if is_geometry(model.store.name(id)) { lr_geo } else { config.lr_network };
            opt.step(&mut model.store, id, &g, lr);
        }
        model.gaussians.renormalize_rotations(&mut model.store);
        report.rows.push(Stage1Row {
            step,
            phase: if coarse { "coarse" } else { "fine" },
            camera: cam,
            timestep: k,
            loss: value,
            loss_color: tape.value(lc).item(),
            loss_feat: tape.value(lf).item(),
        });
        let last = step + 1 == total;
        if config.validate_every > 0 && ((step + 1) % config.validate_every == 0 || last) {
            let (psnr_color, psnr_feat) = holdout_psnr(model, ground_truth, coarse);
            log::info!(
                "step {} loss {value:.5} holdout PSNR C {psnr_color:.2} dB, R_rev(F) {psnr_feat:.2} dB",
                step + 1
            );
            report.validations.push(Validation { step: step + 1, psnr_color, psnr_feat });
        }
        after_step(step + 1, model)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_scene, SceneSpec};

    fn toy(gaussians: usize) -> (Model, Vec<Tensor>) {
        let spec = SceneSpec {
            gaussians,
            width: 16,
            height: 16,
            cameras: 3,
            timesteps: 2,
            spheres: 1,
            ..SceneSpec::default()
        };
        let bundle = generate_scene(&spec, 9).unwrap();
        let cfg = ModelConfig { revnet_blocks: 2, predictor_hidden: 8, ..ModelConfig::default() };
        (Model::from_scene(&bundle, cfg, 2), bundle.ground_truth)
    }

    #[test]
    fn zero_iterations_leave_the_model_untouched() {
        let (mut m, gt) = toy(20);
        let before = m.store.clone();
        let cfg = Stage1Config { coarse_iters: 0, fine_iters: 0, ..Stage1Config::default() };
        let r = train_stage1(&mut m, &gt, &cfg, 0).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(m.store, before);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let cfg = Stage1Config { coarse_iters: 60, fine_iters: 40, validate_every: 0, ..Stage1Config::default() };
        let (mut a, gt) = toy(60);
        let ra = train_stage1(&mut a, &gt, &cfg, 5).unwrap();
        assert!(ra.mean_loss(90, 100) < ra.mean_loss(0, 10), "{} vs {}", ra.mean_loss(90, 100), ra.mean_loss(0, 10));
        let (mut b, _) = toy(60);
        let rb = train_stage1(&mut b, &gt, &cfg, 5).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(ra, rb);
    }

    #[test]
    fn coarse_phase_keeps_deformation_frozen() {
        let (mut m, gt) = toy(20);
        let before = m.store.clone();
        let cfg = Stage1Config { coarse_iters: 5, fine_iters: 0, validate_every: 0, ..Stage1Config::default() };
        train_stage1(&mut m, &gt, &cfg, 1).unwrap();
        for (id, name, v) in m.store.iter() {
            if name.starts_with("deform.") || !is_stage1(name) {
                assert_eq!(v, before.get(id), "{name}");
            }
        }
    }
}
