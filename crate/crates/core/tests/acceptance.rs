//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per criterion
//! and fails at the end if any criterion failed.

mod common;

use std::time::{Duration, Instant};

use common::style_image;
use g4ds::io::{checkpoint, model_file, ppm, report};
use g4ds::model::{Model, ModelConfig};
use g4ds::nets::cspn::{identity_kernels, propagate_with_kernels};
use g4ds::nets::encoder::FrozenEncoder;
use g4ds::nets::revnet::{RevNet, DEFAULT_BLOCKS};
use g4ds::params::ParamStore;
use g4ds::pipeline::{baseline_frames, eval_protocol, stylized_frames, summarize, EncodedStyle, Range};
use g4ds::render::{rasterize, RasterMode};
use g4ds::scene::{generate_scene, Camera, DeformedVars, Gaussian4D, GaussianParams, SceneSpec};
use g4ds::tape::Tape;
use g4ds::tensor::Tensor;
use g4ds::train::gradcheck;
use g4ds::train::losses::loss_pro;
use g4ds::train::predictor::{evaluate_on_covariances, train_on_covariances, CovarianceFamily, PredictorTraining};
use g4ds::train::stage1::holdout_psnr;
use g4ds::train::stage2::ViewCache;
use g4ds::train::{train_stage1, train_stage2, Stage1Config, Stage2Config};
use g4ds::wct::{apply_transform, closed_form_transform, interpolate_styles, StyleTransform, TransformPredictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

struct Run {
    outcomes: Vec<Outcome>,
}

impl Run {
    fn record(&mut self, id: usize, name: &'static str, limit: Duration, f: impl FnOnce() -> (bool, String)) {
        let t0 = Instant::now();
        let (ok, detail) = f();
        let elapsed = t0.elapsed();
        let pass = ok && elapsed <= limit;
        let o = Outcome { id, name, pass, detail, elapsed };
        println!(
            "[{}] {:>2} {}: {} ({:.1} s, limit {} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail,
            o.elapsed.as_secs_f64(),
            limit.as_secs()
        );
        self.outcomes.push(o);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- revnet

fn revnet_round_trip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut worst_image: f64 = 0.0;
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let net = RevNet::new(&mut store, DEFAULT_BLOCKS, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(shape, 0.2, &mut rng));
        }
        let z = Tensor::randn([16, 16, 32], 1.0, &mut rng);
        let y = net.forward_plain(&store, z.data(), 16, 16);
        let back = net.inverse_plain(&store, &y, 16, 16);
        worst = worst.max(max_abs_diff(&back, z.data()));

        let mut tape = Tape::with_trainable(|_| false);
        let zv = tape.constant(z.clone());
        let fwd = net.forward_features(&mut tape, &store, zv);
        let inv = net.inverse_features(&mut tape, &store, fwd);
        worst = worst.max(tape.value(inv).max_abs_diff(&z));

        if trial % 10 == 0 {
            let img = Tensor::uniform([16, 16, 3], 0.0, 1.0, &mut rng);
            let iv = tape.constant(img.clone());
            let f = net.rev_forward(&mut tape, &store, iv).unwrap();
            let r = net.rev_inverse(&mut tape, &store, f);
            worst_image = worst_image.max(tape.value(r).max_abs_diff(&img));
        }
    }
    (worst < 1e-10 && worst_image < 1e-10, format!("max |R^-1(R(z)) - z| = {worst:.2e}, image {worst_image:.2e}"))
}

// ---------------------------------------------------------------- rasterizer

fn random_gaussians(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian4D> {
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            Gaussian4D {
                center: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                log_scale: std::array::from_fn(|_| rng.random_range(-4.0..-1.5)),
                rotation: q.map(|v| v / norm),
                opacity_logit: rng.random_range(-3.0..4.0),
                feature: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            }
        })
        .collect()
}

fn tiled_matches_naive() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    let mut covered = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=1000);
        let mut store = ParamStore::new();
        let g = GaussianParams::register(&mut store, &random_gaussians(n, &mut rng));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(2.5..4.0);
        let eye = [dist * angle.sin(), rng.random_range(-0.5..0.5), -dist * angle.cos()];
        let cam = Camera::look_at(eye, [0.0; 3], 64.0 * 1.1, 64, 64);
        let mut out = Vec::new();
        for mode in [RasterMode::Tiled, RasterMode::Naive] {
            let mut tape = Tape::with_trainable(|_| false);
            let d = DeformedVars::canonical(&mut tape, &store, &g);
            let (e, a) = rasterize(&mut tape, &d, &cam, mode);
            out.push((tape.value(e).clone(), tape.value(a).clone()));
        }
        worst = worst.max(out[0].0.max_abs_diff(&out[1].0)).max(out[0].1.max_abs_diff(&out[1].1));
        covered += out[0].1.data().iter().filter(|&&a| a > 0.0).count() as f64 / 4096.0;
    }
    (worst == 0.0, format!("max diff {worst:e} over 50 scenes, mean coverage {:.2}", covered / 50.0))
}

// ---------------------------------------------------------------- gradients

fn gradients() -> (bool, String) {
    let reports = gradcheck::run("all", 20, 33).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.component.clone()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    (failed.is_empty(), format!("{} components, max rel error {worst:.2e}, failed {:?}", reports.len(), failed))
}

// ---------------------------------------------------------------- closed-form WCT

/// Two-pass `1/N` sample covariance.
fn oracle_covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    c.iter_mut().flatten().for_each(|v| *v /= n);
    c
}

fn oracle_congruence(t: &Tensor, c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = c.len();
    let tm = |i: usize, j: usize| t.data()[i * d + j];
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                for l in 0..d {
                    s += tm(i, k) * c[k][l] * tm(j, l);
                }
            }
            out[i][j] = s;
        }
    }
    out
}

fn correlated_samples(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mix = Tensor::randn([d, d], 0.5 / (d as f64).sqrt(), rng).add(&Tensor::eye(d));
    let scale = rng.random_range(0.3..3.0);
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = Tensor::randn([n, d], scale, rng).matmul(&mix);
    (0..n).map(|i| z.row(i).iter().zip(&shift).map(|(a, b)| a + b).collect()).collect()
}

fn closed_form_wct() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let d = 32;
    let (mut color, mut white): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let xc = correlated_samples(200, d, &mut rng);
        let xs = correlated_samples(300, d, &mut rng);
        let to_tensor = |x: &[Vec<f64>]| Tensor::new([x.len(), d], x.concat());
        let tr = closed_form_transform(&to_tensor(&xc), &to_tensor(&xs)).unwrap();
        let (cc, cs) = (oracle_covariance(&xc), oracle_covariance(&xs));
        let moved = oracle_congruence(&tr.matrix(), &cc);
        let whitened = oracle_congruence(&tr.t_c, &cc);
        for i in 0..d {
            for j in 0..d {
                color = color.max((moved[i][j] - cs[i][j]).abs());
                white = white.max((whitened[i][j] - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    (color < 1e-6 && white < 1e-6, format!("max |T Cc T^T - Cs| = {color:.2e}, max |Tc Cc Tc^T - I| = {white:.2e}"))
}

// ---------------------------------------------------------------- predictor

fn predictor_quality() -> (bool, String) {
    let mut store = ParamStore::new();
    let p = TransformPredictor::new(&mut store, 32, 512, &mut ChaCha8Rng::seed_from_u64(55));
    let fam = CovarianceFamily::default();
    train_on_covariances(&mut store, &p, &fam, &PredictorTraining { seed: 56, ..PredictorTraining::default() });
    let e = evaluate_on_covariances(&store, &p, &fam.pairs(100, 57)).unwrap();
    let ratio = e.predictor / e.baseline;
    (
        ratio < 0.1 && e.below_closed_form == 0,
        format!(
            "held-out loss {:.4} vs T = I {:.4} (ratio {ratio:.3}), closed form {:.1e}, pairs below closed form {}",
            e.predictor, e.baseline, e.closed_form, e.below_closed_form
        ),
    )
}

// ---------------------------------------------------------------- interpolation

fn random_transform(d: usize, mu_f: &[f64], rng: &mut ChaCha8Rng) -> StyleTransform {
    StyleTransform {
        t_c: Tensor::randn([d, d], 0.3, rng).add(&Tensor::eye(d)),
        t_s: Tensor::randn([d, d], 0.3, rng).add(&Tensor::eye(d)),
        mu_f: mu_f.to_vec(),
        mu_s: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn interpolation_linearity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let d = 32;
    let (mut worst, mut endpoint): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let f = Tensor::randn([64, 64, d], 1.0, &mut rng);
        let mu_f: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let k = rng.random_range(2..=4);
        let ts: Vec<StyleTransform> = (0..k).map(|_| random_transform(d, &mu_f, &mut rng)).collect();
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let blended = interpolate_styles(&ts.iter().cloned().zip(w.iter().copied()).collect::<Vec<_>>()).unwrap();
        let lhs = apply_transform(&f, &blended);
        let mut rhs = Tensor::zeros(lhs.shape().to_vec());
        for (t, wi) in ts.iter().zip(&w) {
            rhs.add_assign(&apply_transform(&f, t).scale(*wi));
        }
        worst = worst.max(lhs.max_abs_diff(&rhs));
        for i in 0..k {
            let pairs: Vec<_> =
                ts.iter().enumerate().map(|(j, t)| (t.clone(), if i == j { 1.0 } else { 0.0 })).collect();
            let single = apply_transform(&f, &interpolate_styles(&pairs).unwrap());
            endpoint = endpoint.max(single.max_abs_diff(&apply_transform(&f, &ts[i])));
        }
    }
    (worst < 1e-12 && endpoint == 0.0, format!("max |blend - sum w T_i F| = {worst:.2e}, endpoint diff {endpoint:e}"))
}

// ---------------------------------------------------------------- determinism

fn tiny_pipeline() -> Vec<(&'static str, Vec<u8>)> {
    let spec = SceneSpec { gaussians: 150, width: 32, height: 32, cameras: 4, timesteps: 3, ..SceneSpec::default() };
    let bundle = generate_scene(&spec, 5).unwrap();
    let cfg = ModelConfig { revnet_blocks: 2, predictor_hidden: 16, ..ModelConfig::default() };
    let mut m = Model::from_scene(&bundle, cfg, 5);
    let s1 = Stage1Config { coarse_iters: 20, fine_iters: 10, validate_every: 10, ..Stage1Config::default() };
    let r1 = train_stage1(&mut m, &bundle.ground_truth, &s1, 6).unwrap();
    let styles = [style_image(0, 80), style_image(1, 80)];
    let s2 = Stage2Config { iters: 6, style_size: 64, ..Stage2Config::default() };
    let r2 = train_stage2(&mut m, &bundle.ground_truth, &styles, &s2, 7).unwrap();
    let style = EncodedStyle::new(&m, &g4ds::pipeline::fit_style(&style_image(5, 80), 64));
    let tr = m.style_transform(&style).unwrap();
    let frames = stylized_frames(&m, &tr, true);
    let reports = eval_protocol(&m, &FrozenEncoder::new(), "ours", &frames, Range::Short).unwrap();
    vec![
        ("checkpoint", checkpoint::encode(&model_file::model_entries(&m)).unwrap()),
        ("ppm", ppm::encode(&frames[1]).unwrap()),
        ("stage1.csv", report::csv_bytes(&r1.rows).unwrap()),
        ("stage2.csv", report::csv_bytes(&r2.rows).unwrap()),
        ("consistency.csv", report::csv_bytes(&reports).unwrap()),
    ]
}

fn determinism() -> (bool, String) {
    let (a, b) = (tiny_pipeline(), tiny_pipeline());
    let differing: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    (differing.is_empty(), format!("{} artifacts, {bytes} bytes, differing {:?}", a.len(), differing))
}

// ---------------------------------------------------------------- the run

#[test]
fn acceptance() {
    let mut run = Run { outcomes: Vec::new() };

    run.record(1, "revnet round trip", secs(10), revnet_round_trip);
    run.record(2, "tiled rasterizer equals naive", secs(60), tiled_matches_naive);
    run.record(3, "gradient checks", secs(120), gradients);
    run.record(4, "closed-form WCT", secs(10), closed_form_wct);
    run.record(5, "predictor quality", secs(600), predictor_quality);
    run.record(8, "style interpolation", secs(60), interpolation_linearity);

    let bundle = generate_scene(&SceneSpec::default(), 0).unwrap();
    let mut model = Model::from_scene(&bundle, ModelConfig::default(), 0);
    run.record(6, "stage-1 reconstruction", secs(7200), || {
        let r = train_stage1(&mut model, &bundle.ground_truth, &Stage1Config::default(), 1).unwrap();
        let (pc, pf) = holdout_psnr(&model, &bundle.ground_truth, false);
        let curve: Vec<String> =
            r.validations.iter().map(|v| format!("{}:{:.1}/{:.1}", v.step, v.psnr_color, v.psnr_feat)).collect();
        (
            pc >= 28.0 && pf >= 28.0,
            format!("held-out PSNR C {pc:.2} dB, R_rev(F) {pf:.2} dB; curve {}", curve.join(" ")),
        )
    });

    let train_styles: Vec<Tensor> = (0..4).map(|k| style_image(k, 256)).collect();
    let held_out: Vec<Tensor> = (4..7).map(|k| style_image(k, 256)).collect();
    let t0 = Instant::now();
    train_stage2(&mut model, &bundle.ground_truth, &train_styles, &Stage2Config::default(), 2).unwrap();
    println!("       stage-2 training: {:.1} s", t0.elapsed().as_secs_f64());
    let encoded: Vec<EncodedStyle> =
        held_out.iter().map(|s| EncodedStyle::new(&model, &g4ds::pipeline::fit_style(s, 256))).collect();
    let transforms: Vec<StyleTransform> = encoded.iter().map(|e| model.style_transform(e).unwrap()).collect();

    run.record(9, "propagation improvement", secs(600), || {
        let encoder = FrozenEncoder::new();
        let cam = model.meta.holdout_camera();
        let ident = {
            let x = Tensor::uniform([64, 64, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99));
            propagate_with_kernels(&x, &identity_kernels(64 * 64), 3) == x
        };
        let (mut worse_views, mut worse_pairs, mut n, mut sum_pro, mut sum_trans) = (0, 0, 0, 0.0, 0.0);
        let views = model.meta.timestamps.len();
        for k in 0..views {
            let view = ViewCache::new(&model, &encoder, &bundle.ground_truth, cam, k);
            let (mut view_pro, mut view_trans) = (0.0, 0.0);
            for tr in &transforms {
                let out = model.stylize_features(&view.features, tr, true);
                let loss = |img: &Tensor| {
                    let mut tape = Tape::with_trainable(|_| false);
                    let v = tape.constant(img.clone());
                    let l = loss_pro(&mut tape, &encoder, v, &view.recon_feats);
                    tape.value(l).item()
                };
                let (lp, lt) = (loss(out.pro.as_ref().unwrap()), loss(&out.trans));
                worse_pairs += usize::from(lp > lt);
                n += 1;
                view_pro += lp;
                view_trans += lt;
            }
            worse_views += usize::from(view_pro > view_trans);
            sum_pro += view_pro;
            sum_trans += view_trans;
        }
        (
            ident && worse_views == 0,
            format!(
                "mean L_pro: propagated {:.5}, transformed {:.5}; views worse {worse_views}/{views}, \
                 (view, style) pairs worse {worse_pairs}/{n}; identity kernels no-op: {ident}",
                sum_pro / n as f64,
                sum_trans / n as f64
            ),
        )
    });

    run.record(7, "consistency vs per-frame baseline", secs(1800), || {
        let encoder = FrozenEncoder::new();
        let mut means = [[0.0; 2]; 2];
        for (e, tr) in encoded.iter().zip(&transforms) {
            let ours = stylized_frames(&model, tr, true);
            let base = baseline_frames(&model, e).unwrap();
            for (ri, range) in [Range::Short, Range::Long].into_iter().enumerate() {
                means[0][ri] += summarize(&eval_protocol(&model, &encoder, "ours", &ours, range).unwrap()).0 / 3.0;
                means[1][ri] += summarize(&eval_protocol(&model, &encoder, "baseline", &base, range).unwrap()).0 / 3.0;
            }
        }
        (
            means[0][0] < means[1][0] && means[0][1] < means[1][1],
            format!(
                "RMSE short: ours {:.5} vs baseline {:.5}; long: ours {:.5} vs baseline {:.5}",
                means[0][0], means[1][0], means[0][1], means[1][1]
            ),
        )
    });

    run.record(11, "stylization speed", secs(1), || {
        let t0 = Instant::now();
        let out = model.stylize_view(0, model.meta.timestamps[3], &transforms[0], true);
        let dt = t0.elapsed();
        (
            out.pro.is_some() && dt < secs(1),
            format!("one 64x64 frame with propagation in {:.1} ms", dt.as_secs_f64() * 1e3),
        )
    });

    run.record(10, "determinism", secs(600), determinism);

    let failed: Vec<_> = run.outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {}/{} criteria passed", run.outcomes.len() - failed.len(), run.outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
