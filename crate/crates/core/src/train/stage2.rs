//! Style-transfer training: transform predictors, feature extractors and the
//! propagation network, with every stage-1 parameter frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{is_stage1, Model};
use crate::nets::encoder::FrozenEncoder;
use crate::pipeline::{fit_style, EncodedStyle};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::losses::{loss_art, loss_pro, EncoderStats};
use crate::train::optim::Adam;
use crate::train::{non_finite_group, Stage2Config, TrainError};
use crate::wct::{tape_apply_transform, tape_covariance, tape_transformed_covariance_loss};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage2Row {
    pub step: usize,
    pub style: usize,
    pub camera: usize,
    pub timestep: usize,
    pub loss: f64,
    pub loss_cov: f64,
    pub loss_content: f64,
    pub loss_style: f64,
    pub loss_pro: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Stage2Report {
    pub rows: Vec<Stage2Row>,
}

/// Frozen stage-1 quantities of one view.
pub struct ViewCache {
    pub camera: usize,
    pub timestep: usize,
    pub features: Tensor,
    pub recon: Tensor,
    pub guidance: Tensor,
    pub content: Vec<Tensor>,
    pub recon_feats: Vec<Tensor>,
}

impl ViewCache {
    pub fn new(model: &Model, encoder: &FrozenEncoder, ground_truth: &[Tensor], camera: usize, k: usize) -> Self {
        let nt = model.meta.timestamps.len();
        let features = model.render_features(camera, model.meta.timestamps[k]);
        let recon = model.decode_features(&features);
        Self {
            camera,
            timestep: k,
            guidance: Model::guidance(&recon),
            content: encoder.features(&ground_truth[camera * nt + k]),
            recon_feats: encoder.features(&recon),
            features,
            recon,
        }
    }
}

pub struct StyleCache {
    pub encoded: EncodedStyle,
    pub stats: EncoderStats,
}

impl StyleCache {
    pub fn new(model: &Model, encoder: &FrozenEncoder, style: &Tensor, size: usize) -> Self {
        let img = fit_style(style, size);
        Self { encoded: EncodedStyle::new(model, &img), stats: EncoderStats::of(encoder, &img) }
    }
}

/// Scalar loss terms of one stage-2 evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Terms {
    pub cov: f64,
    pub content: f64,
    pub style: f64,
    pub pro: f64,
}

/// Builds the stage-2 objective for one (view, style) pair on `tape`; returns
/// the weighted total and `(Î_trans, Î_pro)` vars.
fn objective(
    tape: &mut Tape,
    model: &Model,
    encoder: &FrozenEncoder,
    view: &ViewCache,
    style: &StyleCache,
    config: &Stage2Config,
) -> Result<(crate::tape::Var, Stage2Terms), TrainError> {
    let store = &model.store;
    let g = tape.param(store, model.gaussians.feature);
    let mu_f = tape.mean_rows(g);
    let mu_f = tape.detach(mu_f);
    let fc = model.phi_c.forward(tape, store, g);
    let (cov_c, _) = tape_covariance(tape, fc);
    let t_c = model.predictor.whitening(tape, store, cov_c);
    let s = tape.constant(style.encoded.encoded.clone());
    let fs = model.phi_s.forward(tape, store, s).map_err(|e| TrainError::Input(e.to_string()))?;
    let (cov_s, _) = tape_covariance(tape, fs);
    let t_s = model.predictor.coloring(tape, store, cov_s);
    let t = tape.matmul(t_s, t_c);
    let l_cov = tape_transformed_covariance_loss(tape, t, cov_c, cov_s);

    let f = tape.constant(view.features.clone());
    let mu_s = tape.constant(Tensor::new([style.encoded.mean.len()], style.encoded.mean.clone()));
    let f_cs = tape_apply_transform(tape, f, t, mu_f, mu_s);
    let trans = model.revnet.rev_inverse(tape, store, f_cs);
    let (l_content, l_style) = loss_art(tape, encoder, trans, &view.content, &style.stats);

    let detached = tape.detach(trans);
    let guide = tape.constant(view.guidance.clone());
    let pro = model.cspn.forward(tape, store, detached, guide);
    let l_pro = loss_pro(tape, encoder, pro, &view.recon_feats);

    let terms = Stage2Terms {
        cov: tape.value(l_cov).item(),
        content: tape.value(l_content).item(),
        style: tape.value(l_style).item(),
        pro: tape.value(l_pro).item(),
    };
    let parts = [
        tape.scale(l_cov, config.lambda_cov),
        tape.scale(l_content, config.lambda_content),
        tape.scale(l_style, config.lambda_style),
        tape.scale(l_pro, config.lambda_pro),
    ];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p);
    }
    Ok((total, terms))
}

/// Loss terms of one (view, style) pair under the current parameters.
pub fn evaluate_stage2(
    model: &Model,
    encoder: &FrozenEncoder,
    view: &ViewCache,
    style: &StyleCache,
    config: &Stage2Config,
) -> Result<Stage2Terms, TrainError> {
    let mut tape = Tape::with_trainable(|_| false);
    Ok(objective(&mut tape, model, encoder, view, style, config)?.1)
}

/// Trains the stage-2 parameters on the training views. `styles` are raw
/// images of any size; each is fitted to `config.style_size`.
pub fn train_stage2(
    model: &mut Model,
    ground_truth: &[Tensor],
    styles: &[Tensor],
    config: &Stage2Config,
    seed: u64,
) -> Result<Stage2Report, TrainError> {
    train_stage2_with(model, ground_truth, styles, config, seed, &mut |_, _| Ok(()))
}

/// [`train_stage2`] with a hook after every optimizer step.
pub fn train_stage2_with(
    model: &mut Model,
    ground_truth: &[Tensor],
    styles: &[Tensor],
    config: &Stage2Config,
    seed: u64,
    after_step: &mut dyn FnMut(usize, &Model) -> Result<(), TrainError>,
) -> Result<Stage2Report, TrainError> {
    if styles.is_empty() {
        return Err(TrainError::Input("stage 2 needs at least one style image".into()));
    }
    let nt = model.meta.timestamps.len();
    if ground_truth.len() != model.meta.cameras.len() * nt {
        return Err(TrainError::Input(format!(
            "expected {} ground-truth images, got {}",
            model.meta.cameras.len() * nt,
            ground_truth.len()
        )));
    }
    let encoder = FrozenEncoder::new();
    let style_caches: Vec<StyleCache> =
        styles.iter().map(|s| StyleCache::new(model, &encoder, s, config.style_size)).collect();
    let mut views: Vec<Option<ViewCache>> = (0..model.meta.cameras.len() * nt).map(|_| None).collect();
    let cams = model.meta.training_cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new();
    let mut report = Stage2Report::default();
    for step in 0..config.iters {
        let si = rng.random_range(0..styles.len());
        let cam = cams[rng.random_range(0..cams.len())];
        let k = rng.random_range(0..nt);
        let view = views[cam * nt + k].get_or_insert_with(|| ViewCache::new(model, &encoder, ground_truth, cam, k));
        let mut tape = Tape::with_trainable(|n| !is_stage1(n));
        let (loss, terms) = objective(&mut tape, model, &encoder, view, &style_caches[si], config)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss);
        if !value.is_finite() {
            let group = non_finite_group(&model.store, &grads).unwrap_or_else(|| "loss".into());
            return Err(TrainError::NonFinite { step, what: "loss".into(), group });
        }
        if let Some(group) = non_finite_group(&model.store, &grads) {
            return Err(TrainError::NonFinite { step, what: "gradient".into(), group });
        }
        for (id, g) in grads.param_grads() {
            opt.step(&mut model.store, id, &g, config.lr);
        }
        if (step + 1) % 100 == 0 {
            log::info!(
                "stage 2 step {} loss {value:.5} (cov {:.4}, content {:.4}, style {:.4}, pro {:.4})",
                step + 1,
                terms.cov,
                terms.content,
                terms.style,
                terms.pro
            );
        }
        report.rows.push(Stage2Row {
            step,
            style: si,
            camera: cam,
            timestep: k,
            loss: value,
            loss_cov: terms.cov,
            loss_content: terms.content,
            loss_style: terms.style,
            loss_pro: terms.pro,
        });
        after_step(step + 1, model)?;
    }
    Ok(report)
}
