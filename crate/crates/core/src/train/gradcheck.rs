//! Registry of differentiable components checked against central finite
//! differences on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nets::cspn::Cspn;
use crate::nets::encoder::FrozenEncoder;
use crate::nets::extractors::StyleExtractor;
use crate::nets::layers::{conv2d, ConvGeom, Init, Linear, Mlp};
use crate::nets::revnet::RevNet;
use crate::nets::whiten::whiten_image;
use crate::numdiff::{check_inputs, check_params, GradCheck};
use crate::params::{ParamId, ParamStore};
use crate::render::{composite, project_vars, Heads, RasterMode, Renderer};
use crate::scene::{Camera, DeformationConfig, DeformationField, Gaussian4D, GaussianParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::losses::{loss_art, loss_embed, EncoderStats};
use crate::vec3::V3;
use crate::wct::{
    sym_matrix_fn, tape_apply_transform, tape_covariance, tape_transformed_covariance_loss, SpectralFn,
    TransformPredictor,
};

/// Failure threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per checked tensor.
const ENTRIES: usize = 24;

pub const COMPONENTS: [&str; 19] = [
    "linear",
    "mlp",
    "conv",
    "coupling",
    "revnet",
    "cspn",
    "whiten",
    "sym_sqrt",
    "sym_inv_sqrt",
    "covariance",
    "covariance_loss",
    "apply_transform",
    "predictor",
    "style_extractor",
    "project",
    "composite",
    "deform",
    "render_loss",
    "art_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Entries where the function was not smooth within one step.
    pub skipped: usize,
    pub passed: bool,
}

/// Runs `component` (or every component for `"all"`) for `trials` random
/// draws. Unknown names return `None`.
pub fn run(component: &str, trials: usize, seed: u64) -> Option<Vec<ComponentReport>> {
    let names: Vec<&str> = if component == "all" {
        let mut v = COMPONENTS.to_vec();
        v.push("encoder");
        v
    } else if COMPONENTS.contains(&component) || component == "encoder" {
        vec![component]
    } else {
        return None;
    };
    Some(
        names
            .into_iter()
            .map(|name| {
                let mut r = ComponentReport {
                    component: name.to_string(),
                    trials,
                    max_rel_error: 0.0,
                    entries: 0,
                    skipped: 0,
                    passed: true,
                };
                for trial in 0..trials {
                    let c = check(name, seed.wrapping_mul(1000).wrapping_add(trial as u64));
                    r.passed &= c.passed(TOLERANCE);
                    r.max_rel_error =
                        if c.max_rel_error.is_finite() { r.max_rel_error.max(c.max_rel_error) } else { f64::INFINITY };
                    r.entries += c.entries;
                    r.skipped += c.skipped;
                }
                r
            })
            .collect(),
    )
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], std: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        let t = Tensor::randn(store.get(id).shape().to_vec(), std, rng);
        store.set(id, t);
    }
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn spd(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = Tensor::randn([d, d], 1.0, rng);
    a.matmul(&a.transpose()).add(&Tensor::eye(d).scale(0.5))
}

fn params_then_inputs(a: GradCheck, b: GradCheck) -> GradCheck {
    GradCheck {
        name: a.name,
        max_rel_error: if a.max_rel_error.is_finite() && b.max_rel_error.is_finite() {
            a.max_rel_error.max(b.max_rel_error)
        } else {
            f64::INFINITY
        },
        entries: a.entries + b.entries,
        skipped: a.skipped + b.skipped,
    }
}

/// One trial of one component.
pub fn check(name: &str, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match name {
        "linear" => {
            let l = Linear::new(&mut store, "l", 5, 4, Init::He, &mut rng);
            randomize(&mut store, &[l.bias], 0.5, &mut rng);
            let x = Tensor::randn([3, 5], 1.0, &mut rng);
            let p = check_params(
                name,
                &store,
                &[l.weight, l.bias],
                |t, s| {
                    let xv = t.constant(x.clone());
                    l.forward(t, s, xv)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[x.clone()], |t, v| l.forward(t, &store, v[0]), ENTRIES, seed);
            params_then_inputs(p, i)
        }
        "mlp" => {
            let m = Mlp::new(&mut store, "m", (6, 8, 6), true, &mut rng);
            let ids = all_ids(&store);
            randomize(&mut store, &ids, 0.5, &mut rng);
            let x = Tensor::randn([4, 6], 1.0, &mut rng);
            let p = check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let xv = t.constant(x.clone());
                    m.forward(t, s, xv)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[x.clone()], |t, v| m.forward(t, &store, v[0]), ENTRIES, seed);
            params_then_inputs(p, i)
        }
        "conv" => {
            let x = Tensor::randn([7, 6, 3], 1.0, &mut rng);
            let w = Tensor::randn([3, 3, 3, 4], 0.5, &mut rng);
            let b = Tensor::randn([4], 0.5, &mut rng);
            let geom = if rng.random_bool(0.5) { ConvGeom::down3() } else { ConvGeom::same3() };
            check_inputs(name, &[x, w, b], |t, v| conv2d(t, v[0], v[1], v[2], geom), ENTRIES, seed)
        }
        "coupling" | "revnet" => {
            let blocks = if name == "coupling" { 1 } else { 3 };
            let net = RevNet::new(&mut store, blocks, &mut rng);
            let ids = all_ids(&store);
            randomize(&mut store, &ids, 0.3, &mut rng);
            let z = Tensor::randn([4, 4, 32], 1.0, &mut rng);
            let p = check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let zv = t.constant(z.clone());
                    net.forward_features(t, s, zv)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[z.clone()], |t, v| net.inverse_features(t, &store, v[0]), ENTRIES, seed);
            params_then_inputs(p, i)
        }
        "cspn" => {
            let c = Cspn::new(&mut store, 2, &mut rng);
            let ids = all_ids(&store);
            randomize(&mut store, &ids, 0.4, &mut rng);
            let x = Tensor::uniform([5, 5, 3], 0.0, 1.0, &mut rng);
            let g = Tensor::randn([5, 5, 3], 1.0, &mut rng);
            let p = check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
                    c.forward(t, s, xv, gv)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[x.clone(), g.clone()], |t, v| c.forward(t, &store, v[0], v[1]), ENTRIES, seed);
            params_then_inputs(p, i)
        }
        "whiten" => {
            let x = Tensor::uniform([5, 4, 3], 0.0, 1.0, &mut rng);
            check_inputs(name, &[x], |t, v| whiten_image(t, v[0]), ENTRIES, seed)
        }
        "sym_sqrt" | "sym_inv_sqrt" => {
            let f = if name == "sym_sqrt" { SpectralFn::Sqrt } else { SpectralFn::InvSqrt };
            let m = spd(5, &mut rng);
            check_inputs(
                name,
                &[m],
                |t, v| {
                    let vt = t.transpose(v[0]);
                    let s = t.add(v[0], vt);
                    let s = t.scale(s, 0.5);
                    sym_matrix_fn(t, s, f, 1e-5)
                },
                ENTRIES,
                seed,
            )
        }
        "covariance" => {
            let x = Tensor::randn([9, 4], 1.0, &mut rng);
            check_inputs(
                name,
                &[x],
                |t, v| {
                    let (c, m) = tape_covariance(t, v[0]);
                    let c = t.reshape(c, &[1, 16]);
                    let m = t.reshape(m, &[1, 4]);
                    t.concat_cols(&[c, m])
                },
                ENTRIES,
                seed,
            )
        }
        "covariance_loss" => {
            let tr = Tensor::randn([4, 4], 0.5, &mut rng).add(&Tensor::eye(4));
            let (cc, cs) = (spd(4, &mut rng), spd(4, &mut rng));
            check_inputs(
                name,
                &[tr, cc, cs],
                |t, v| tape_transformed_covariance_loss(t, v[0], v[1], v[2]),
                ENTRIES,
                seed,
            )
        }
        "apply_transform" => {
            let f = Tensor::randn([3, 2, 4], 1.0, &mut rng);
            let tr = Tensor::randn([4, 4], 0.5, &mut rng);
            let (mf, ms) = (Tensor::randn([4], 1.0, &mut rng), Tensor::randn([4], 1.0, &mut rng));
            check_inputs(name, &[f, tr, mf, ms], |t, v| tape_apply_transform(t, v[0], v[1], v[2], v[3]), ENTRIES, seed)
        }
        "predictor" => {
            let p = TransformPredictor::new(&mut store, 3, 6, &mut rng);
            let ids = all_ids(&store);
            randomize(&mut store, &ids, 0.3, &mut rng);
            let (cc, cs) = (spd(3, &mut rng), spd(3, &mut rng));
            let loss = |t: &mut Tape, s: &ParamStore, a: Var, b: Var| {
                let tc = p.whitening(t, s, a);
                let ts = p.coloring(t, s, b);
                let m = t.matmul(ts, tc);
                tape_transformed_covariance_loss(t, m, a, b)
            };
            let pr = check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let (a, b) = (t.constant(cc.clone()), t.constant(cs.clone()));
                    loss(t, s, a, b)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[cc.clone(), cs.clone()], |t, v| loss(t, &store, v[0], v[1]), ENTRIES, seed);
            params_then_inputs(pr, i)
        }
        "style_extractor" => {
            let phi = StyleExtractor::new(&mut store, &mut rng);
            let ids = all_ids(&store);
            randomize(&mut store, &ids, 0.05, &mut rng);
            let x = Tensor::randn([64, 64, 32], 1.0, &mut rng);
            check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let xv = t.constant(x.clone());
                    phi.forward(t, s, xv).expect("64x64 input")
                },
                8,
                seed,
            )
        }
        "project" => {
            let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], 20.0, 16, 16);
            let c = Tensor::uniform([4, 3], -0.8, 0.8, &mut rng);
            let s = Tensor::uniform([4, 3], -2.0, -1.0, &mut rng);
            let q = Tensor::randn([4, 4], 1.0, &mut rng);
            check_inputs(
                name,
                &[c, s, q],
                |t, v| {
                    let r = t.normalize_rows(v[2]);
                    let p = project_vars(t, v[0], v[1], r, &cam);
                    t.slice_cols(p, 0, 5)
                },
                ENTRIES,
                seed,
            )
        }
        "composite" => {
            let n = 3;
            let mut rows = Vec::new();
            for _ in 0..n {
                let a: f64 = rng.random_range(1.0..3.0);
                let c: f64 = rng.random_range(1.0..3.0);
                let b: f64 = rng.random_range(-0.5..0.5) * (a * c).sqrt();
                rows.extend([
                    rng.random_range(1.0..7.0),
                    rng.random_range(1.0..7.0),
                    a,
                    b,
                    c,
                    rng.random_range(1.0..5.0),
                ]);
            }
            let splats = Tensor::new([n, 6], rows);
            let op = Tensor::uniform([n], 0.3, 0.8, &mut rng);
            let feats = Tensor::randn([n, 2], 1.0, &mut rng);
            check_inputs(
                name,
                &[splats, op, feats],
                |t, v| {
                    let s = t.slice_cols(v[0], 0, 5);
                    let d = t.detach(v[0]);
                    let d = t.slice_cols(d, 5, 6);
                    let s = t.concat_cols(&[s, d]);
                    composite(t, s, v[1], v[2], 8, 8, RasterMode::Tiled)
                },
                ENTRIES,
                seed,
            )
        }
        "deform" => {
            let bounds: [V3; 2] = [[-1.0; 3], [1.0; 3]];
            let field = DeformationField::new(&mut store, DeformationConfig::default(), bounds, &mut rng);
            let ids = field.param_ids();
            randomize(&mut store, &ids, 0.3, &mut rng);
            let planes: Vec<ParamId> = field.planes.iter().flatten().copied().collect();
            randomize(&mut store, &planes, 0.8, &mut rng);
            let centers = Tensor::uniform([3, 3], -0.9, 0.9, &mut rng);
            let tt: f64 = rng.random_range(0.05..0.95);
            let build = |t: &mut Tape, s: &ParamStore, c: crate::tape::Var| {
                let d = field.forward(t, s, c, tt);
                t.concat_cols(&[d.center, d.log_scale, d.rotation])
            };
            let p = check_params(
                name,
                &store,
                &ids,
                |t, s| {
                    let c = t.constant(centers.clone());
                    build(t, s, c)
                },
                ENTRIES,
                seed,
            );
            let i = check_inputs(name, &[centers.clone()], |t, v| build(t, &store, v[0]), ENTRIES, seed);
            params_then_inputs(p, i)
        }
        "render_loss" => render_loss(seed, &mut rng),
        "art_loss" => {
            let enc = FrozenEncoder::new();
            let img = Tensor::uniform([16, 16, 3], 0.0, 1.0, &mut rng);
            let content = enc.features(&Tensor::uniform([16, 16, 3], 0.0, 1.0, &mut rng));
            let stats = EncoderStats::of(&enc, &Tensor::uniform([16, 16, 3], 0.0, 1.0, &mut rng));
            check_inputs(
                name,
                &[img],
                |t, v| {
                    let (a, b) = loss_art(t, &enc, v[0], &content, &stats);
                    let b = t.scale(b, 10.0);
                    t.add(a, b)
                },
                ENTRIES,
                seed,
            )
        }
        "encoder" => {
            let enc = FrozenEncoder::new();
            let img = Tensor::uniform([8, 8, 3], 0.0, 1.0, &mut rng);
            let mut r = check_inputs(
                name,
                &[img.clone()],
                |t, v| {
                    let f = enc.forward(t, v[0]);
                    let n = t.value(f[2]).numel();
                    t.reshape(f[2], &[n])
                },
                ENTRIES,
                seed,
            );
            let mut tape = Tape::new();
            let x = tape.leaf(img);
            let f = enc.forward(&mut tape, x);
            let l = tape.sum(f[2]);
            if !tape.backward(l).param_grads().is_empty() {
                r.max_rel_error = f64::INFINITY;
            }
            r
        }
        other => panic!("unknown gradcheck component `{other}`"),
    }
}

/// Deform, project, composite, decode and reconstruct a few Gaussians, then
/// `loss_embed`; checked against every parameter.
fn render_loss(seed: u64, rng: &mut ChaCha8Rng) -> GradCheck {
    let mut store = ParamStore::new();
    let gs: Vec<Gaussian4D> = (0..6)
        .map(|_| {
            let mut feature = [0.0; 32];
            for f in &mut feature {
                *f = rng.random_range(-1.0..1.0);
            }
            Gaussian4D {
                center: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)],
                log_scale: [rng.random_range(-1.6..-1.0), rng.random_range(-1.6..-1.0), rng.random_range(-1.6..-1.0)],
                rotation: [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                opacity_logit: rng.random_range(-1.0..1.0),
                feature,
            }
        })
        .collect();
    let gp = GaussianParams::register(&mut store, &gs);
    let field = DeformationField::new(&mut store, DeformationConfig::default(), [[-1.0; 3], [1.0; 3]], rng);
    let planes: Vec<ParamId> = field.planes.iter().flatten().copied().collect();
    randomize(&mut store, &planes, 0.6, rng);
    let out_heads: Vec<ParamId> =
        [&field.head_center, &field.head_scale, &field.head_rotation].iter().flat_map(|l| [l.weight, l.bias]).collect();
    randomize(&mut store, &out_heads, 0.1, rng);
    let heads = Heads::new(&mut store, rng);
    // Nonzero biases keep background pixels (zero embedding) off the ReLU kink.
    let biases: Vec<ParamId> =
        store.iter().filter(|(_, n, _)| n.starts_with("psi_") && n.ends_with("bias")).map(|(id, _, _)| id).collect();
    randomize(&mut store, &biases, 0.1, rng);
    let rev = RevNet::new(&mut store, 1, rng);
    let rev_ids: Vec<ParamId> = store.with_prefix("revnet.").collect();
    randomize(&mut store, &rev_ids, 0.2, rng);
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], 10.0, 8, 8);
    let gt = Tensor::uniform([8, 8, 3], 0.0, 1.0, rng);
    let tt = rng.random_range(0.1..0.9);
    let renderer = Renderer { gaussians: &gp, deformation: Some(&field), heads: &heads, mode: RasterMode::Tiled };
    let ids = all_ids(&store);
    check_params(
        "render_loss",
        &store,
        &ids,
        |t, s| {
            let rv = renderer.render_vars(t, s, &cam, tt);
            let recon = rev.rev_inverse(t, s, rv.feature);
            let g = t.constant(gt.clone());
            loss_embed(t, rv.color, recon, g, 1.0, 1.0)
        },
        ENTRIES,
        seed,
    )
}
