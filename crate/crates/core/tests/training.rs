mod common;

use common::style_image;
use g4ds::model::{Model, ModelConfig};
use g4ds::nets::encoder::FrozenEncoder;
use g4ds::pipeline::{fit_style, EncodedStyle};
use g4ds::scene::{generate_scene, SceneBundle, SceneSpec};
use g4ds::tape::Tape;
use g4ds::tensor::Tensor;
use g4ds::train::losses::{loss_art, EncoderStats};
use g4ds::train::predictor::{train_on_covariances, CovarianceFamily, PredictorTraining};
use g4ds::train::stage2::ViewCache;
use g4ds::train::{train_stage1, train_stage2, Stage1Config, Stage2Config};
use g4ds::wct::{apply_transform, covariance_gap, tape_covariance, StyleTransform};

fn scene() -> (SceneBundle, Model) {
    let spec = SceneSpec { gaussians: 300, width: 32, height: 32, cameras: 4, timesteps: 3, ..SceneSpec::default() };
    let bundle = generate_scene(&spec, 21).unwrap();
    let mut m = Model::from_scene(&bundle, ModelConfig { revnet_blocks: 4, ..ModelConfig::default() }, 21);
    let s1 = Stage1Config { coarse_iters: 150, fine_iters: 100, validate_every: 0, ..Stage1Config::default() };
    train_stage1(&mut m, &bundle.ground_truth, &s1, 22).unwrap();
    (bundle, m)
}

fn config(iters: usize) -> Stage2Config {
    Stage2Config { iters, style_size: 64, ..Stage2Config::default() }
}

/// Covariance loss in extractor space with the predicted transform and with
/// `T = I`.
fn covariance_losses(m: &Model, style: &EncodedStyle) -> (f64, f64) {
    let mut tape = Tape::with_trainable(|_| false);
    let g = tape.param(&m.store, m.gaussians.feature);
    let fc = m.phi_c.forward(&mut tape, &m.store, g);
    let (cc, _) = tape_covariance(&mut tape, fc);
    let s = tape.constant(style.encoded.clone());
    let fs = m.phi_s.forward(&mut tape, &m.store, s).unwrap();
    let (cs, _) = tape_covariance(&mut tape, fs);
    let t_c = m.predictor.whitening(&mut tape, &m.store, cc);
    let t_s = m.predictor.coloring(&mut tape, &m.store, cs);
    let t = tape.value(t_s).matmul(tape.value(t_c));
    let (cc, cs) = (tape.value(cc), tape.value(cs));
    (covariance_gap(&t.matmul(cc).matmul(&t.transpose()), cs), covariance_gap(cc, cs))
}

#[test]
fn held_out_style_covariance_loss_beats_identity() {
    let (bundle, mut m) = scene();
    let styles: Vec<Tensor> = (0..8).map(|k| style_image(k, 72)).collect();
    // Eight styles do not constrain the predictors on their own; start them
    // from a short fit on random covariance pairs.
    let warm = PredictorTraining { steps: 300, batch: 16, ..PredictorTraining::default() };
    train_on_covariances(&mut m.store, &m.predictor.clone(), &CovarianceFamily::default(), &warm);
    train_stage2(&mut m, &bundle.ground_truth, &styles, &config(500), 5).unwrap();
    for k in 12..16 {
        let s = EncodedStyle::new(&m, &fit_style(&style_image(k, 72), 64));
        let (ours, identity) = covariance_losses(&m, &s);
        assert!(ours < identity, "style {k}: {ours} vs T = I {identity}");
    }
}

/// Content plus weighted style loss of `Î_trans` for one view.
fn art_loss(
    m: &Model,
    enc: &FrozenEncoder,
    view: &ViewCache,
    stats: &EncoderStats,
    tr: &StyleTransform,
    w: f64,
) -> f64 {
    let img = m.decode_features(&apply_transform(&view.features, tr));
    let mut tape = Tape::with_trainable(|_| false);
    let x = tape.constant(img);
    let (c, s) = loss_art(&mut tape, enc, x, &view.content, stats);
    tape.value(c).item() + w * tape.value(s).item()
}

#[test]
fn single_style_matches_closed_form_within_two_times() {
    let (bundle, mut m) = scene();
    let img = style_image(3, 72);
    let cfg = config(300);
    train_stage2(&mut m, &bundle.ground_truth, std::slice::from_ref(&img), &cfg, 6).unwrap();
    let enc = FrozenEncoder::new();
    let fitted = fit_style(&img, 64);
    let encoded = EncodedStyle::new(&m, &fitted);
    let stats = EncoderStats::of(&enc, &fitted);
    let predicted = m.style_transform(&encoded).unwrap();
    let closed = m.closed_form_style_transform(&encoded).unwrap();
    let (mut ours, mut reference) = (0.0, 0.0);
    for cam in m.meta.training_cameras() {
        for k in 0..m.meta.timestamps.len() {
            let view = ViewCache::new(&m, &enc, &bundle.ground_truth, cam, k);
            ours += art_loss(&m, &enc, &view, &stats, &predicted, cfg.lambda_style);
            reference += art_loss(&m, &enc, &view, &stats, &closed, cfg.lambda_style);
        }
    }
    assert!(ours <= 2.0 * reference, "predicted {ours} vs closed form {reference}");
}
