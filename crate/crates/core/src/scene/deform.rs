//! Six-plane space-time deformation field.
//!
//! Each resolution holds one grid per axis pair (xy, xz, yz, xt, yt, zt).
//! A query `(x, y, z, t)` is normalized to `[-1, 1]⁴`, each plane is sampled
//! bilinearly, the six samples are multiplied elementwise, and the per-
//! resolution products are concatenated and decoded by an MLP into
//! position, log-scale and rotation offsets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::layers::{Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{axpy, Tensor};
use crate::vec3::V3;

pub const PLANES: [(usize, usize, &str); 6] =
    [(0, 1, "xy"), (0, 2, "xz"), (1, 2, "yz"), (0, 3, "xt"), (1, 3, "yt"), (2, 3, "zt")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Cells per axis for each resolution; grids have `cells + 1` vertices.
    pub resolutions: Vec<usize>,
    pub width: usize,
    pub hidden: usize,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self { resolutions: vec![8, 16], width: 16, hidden: 64 }
    }
}

/// Bilinear corner indices and weights for `(u, v) ∈ [-1, 1]²` on a grid
/// with `n` vertices per side (clamped to the border). Indices are
/// `(row, col)` = `(v, u)` vertex positions.
pub fn bilinear_weights(u: f64, v: f64, n: usize) -> [((usize, usize), f64); 4] {
    let (i0, fx) = cell(u, n);
    let (j0, fy) = cell(v, n);
    [
        ((j0, i0), (1.0 - fx) * (1.0 - fy)),
        ((j0, i0 + 1), fx * (1.0 - fy)),
        ((j0 + 1, i0), (1.0 - fx) * fy),
        ((j0 + 1, i0 + 1), fx * fy),
    ]
}

#[inline]
fn cell(u: f64, n: usize) -> (usize, f64) {
    let x = (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64;
    let i = (x.floor() as usize).min(n - 2);
    (i, x - i as f64)
}

/// Differentiable bilinear lookup of `grid[n, n, D]` at `uv[N, 2]` → `[N, D]`.
/// Coordinates outside `[-1, 1]` are clamped and receive zero gradient.
pub fn plane_sample(tape: &mut Tape, grid: Var, uv: Var) -> Var {
    let gs = tape.shape(grid).to_vec();
    let (n, d) = (gs[0], gs[2]);
    assert_eq!(gs[1], n, "plane grids must be square");
    let q = tape.value(uv).rows();
    let (gv, uvv) = (tape.value(grid).data(), tape.value(uv).data());
    let mut out = vec![0.0; q * d];
    for p in 0..q {
        for ((r, c), w) in bilinear_weights(uvv[2 * p], uvv[2 * p + 1], n) {
            axpy(w, &gv[(r * n + c) * d..(r * n + c + 1) * d], &mut out[p * d..(p + 1) * d]);
        }
    }
    tape.record(
        &[grid, uv],
        Tensor::new([q, d], out),
        Box::new(move |ctx| {
            let (gv, uvv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut ggrid = ctx.needs[0].then(|| vec![0.0; n * n * d]);
            let mut guv = ctx.needs[1].then(|| vec![0.0; q * 2]);
            let half = 0.5 * (n - 1) as f64;
            for p in 0..q {
                let gp = &g[p * d..(p + 1) * d];
                let (u, v) = (uvv[2 * p], uvv[2 * p + 1]);
                let corners = bilinear_weights(u, v, n);
                if let Some(gg) = ggrid.as_mut() {
                    for ((r, c), w) in corners {
                        axpy(w, gp, &mut gg[(r * n + c) * d..(r * n + c + 1) * d]);
                    }
                }
                if let Some(gu) = guv.as_mut() {
                    let val = |k: usize| {
                        let ((r, c), _) = corners[k];
                        let row = &gv[(r * n + c) * d..(r * n + c + 1) * d];
                        row.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>()
                    };
                    let (f00, f10, f01, f11) = (val(0), val(1), val(2), val(3));
                    let (_, fx) = cell(u, n);
                    let (_, fy) = cell(v, n);
                    if u.abs() < 1.0 {
                        gu[2 * p] = half * ((f10 - f00) * (1.0 - fy) + (f11 - f01) * fy);
                    }
                    if v.abs() < 1.0 {
                        gu[2 * p + 1] = half * ((f01 - f00) * (1.0 - fx) + (f11 - f10) * fx);
                    }
                }
            }
            vec![ggrid.map(|v| Tensor::new([n, n, d], v)), guv.map(|v| Tensor::new([q, 2], v))]
        }),
    )
}

/// Offsets produced by the field for every Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct Deltas {
    pub center: Var,
    pub log_scale: Var,
    pub rotation: Var,
}

#[derive(Clone, Debug)]
pub struct DeformationField {
    pub config: DeformationConfig,
    pub bounds: [V3; 2],
    /// `planes[r][p]` for resolution `r` and plane `p` in [`PLANES`] order.
    pub planes: Vec<Vec<ParamId>>,
    pub decoder: [Linear; 2],
    pub head_center: Linear,
    pub head_scale: Linear,
    pub head_rotation: Linear,
}

impl DeformationField {
    /// Spatial planes start uniform in `[0.1, 0.5]`, time planes at 1, and
    /// the three heads at zero so the initial field is the identity.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DeformationConfig,
        bounds: [V3; 2],
        rng: &mut R,
    ) -> Self {
        let planes = config
            .resolutions
            .iter()
            .map(|&cells| {
                PLANES
                    .iter()
                    .map(|&(_, b, name)| {
                        let shape = [cells + 1, cells + 1, config.width];
                        let init =
                            if b == 3 { Tensor::full(shape, 1.0) } else { Tensor::uniform(shape, 0.1, 0.5, rng) };
                        store.add(format!("deform.r{cells}.{name}"), init)
                    })
                    .collect()
            })
            .collect();
        let input = config.width * config.resolutions.len();
        let h = config.hidden;
        let decoder = [
            Linear::new(store, "deform.dec0", input, h, Init::He, rng),
            Linear::new(store, "deform.dec1", h, h, Init::He, rng),
        ];
        let head_center = Linear::new(store, "deform.head_center", h, 3, Init::Zero, rng);
        let head_scale = Linear::new(store, "deform.head_scale", h, 3, Init::Zero, rng);
        let head_rotation = Linear::new(store, "deform.head_rotation", h, 4, Init::Zero, rng);
        Self { config, bounds, planes, decoder, head_center, head_scale, head_rotation }
    }

    /// Looks the field up by its parameter names in `store`.
    pub fn find(store: &ParamStore, config: DeformationConfig, bounds: [V3; 2]) -> Option<Self> {
        let lin = |name: &str| -> Option<Linear> {
            let weight = store.find(&format!("{name}.weight"))?;
            let bias = store.find(&format!("{name}.bias"))?;
            let s = store.get(weight).shape();
            Some(Linear { weight, bias, fan_in: s[0], fan_out: s[1] })
        };
        let mut planes = Vec::new();
        for &cells in &config.resolutions {
            let mut row = Vec::new();
            for &(_, _, name) in &PLANES {
                row.push(store.find(&format!("deform.r{cells}.{name}"))?);
            }
            planes.push(row);
        }
        Some(Self {
            planes,
            decoder: [lin("deform.dec0")?, lin("deform.dec1")?],
            head_center: lin("deform.head_center")?,
            head_scale: lin("deform.head_scale")?,
            head_rotation: lin("deform.head_rotation")?,
            config,
            bounds,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.planes.iter().flatten().copied().collect();
        for l in self.decoder.iter().chain([&self.head_center, &self.head_scale, &self.head_rotation]) {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids
    }

    /// Normalized `[N, 4]` query coordinates for `centers[N, 3]` at `t`.
    fn coords(&self, tape: &mut Tape, centers: Var, t: f64) -> Var {
        let n = tape.value(centers).rows();
        let [lo, hi] = self.bounds;
        let scale: Vec<f64> = (0..3).map(|k| 2.0 / (hi[k] - lo[k]).max(1e-9)).collect();
        let shift: Vec<f64> = (0..3).map(|k| -lo[k] * scale[k] - 1.0).collect();
        let sv = tape.constant(Tensor::new([3], scale));
        let bv = tape.constant(Tensor::new([3], shift));
        let x = tape.mul_row(centers, sv);
        let x = tape.add_row(x, bv);
        let tc = tape.constant(Tensor::full([n, 1], (2.0 * t - 1.0).clamp(-1.0, 1.0)));
        tape.concat_cols(&[x, tc])
    }

    /// Space-time features `[N, width * resolutions]` before the decoder.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, centers: Var, t: f64) -> Var {
        let q = self.coords(tape, centers, t);
        let axes: Vec<Var> = (0..4).map(|k| tape.slice_cols(q, k, k + 1)).collect();
        let mut per_res = Vec::with_capacity(self.planes.len());
        for grids in &self.planes {
            let mut acc: Option<Var> = None;
            for (&(a, b, _), &id) in PLANES.iter().zip(grids) {
                let uv = tape.concat_cols(&[axes[a], axes[b]]);
                let g = tape.param(store, id);
                let s = plane_sample(tape, g, uv);
                acc = Some(match acc {
                    Some(prev) => tape.mul(prev, s),
                    None => s,
                });
            }
            per_res.push(acc.expect("at least one plane"));
        }
        tape.concat_cols(&per_res)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, centers: Var, t: f64) -> Deltas {
        let h = self.encode(tape, store, centers, t);
        let h = self.decoder[0].forward(tape, store, h);
        let h = tape.relu(h);
        let h = self.decoder[1].forward(tape, store, h);
        let h = tape.relu(h);
        Deltas {
            center: self.head_center.forward(tape, store, h),
            log_scale: self.head_scale.forward(tape, store, h),
            rotation: self.head_rotation.forward(tape, store, h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::check_inputs;
    use crate::scene::{DeformedVars, Gaussian4D, GaussianParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BOUNDS: [V3; 2] = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]];

    #[test]
    fn weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (u, v) = (rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2));
            let s: f64 = bilinear_weights(u, v, 9).iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_vertices_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = Tensor::randn([5, 5, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let g = tape.constant(grid.clone());
        // Vertex (row 2, col 3) sits at u = -1 + 3/2, v = -1 + 2/2.
        let uv = tape.constant(Tensor::new([2, 2], vec![0.5, 0.0, 1.0, 1.0]));
        let s = plane_sample(&mut tape, g, uv);
        let out = tape.value(s);
        assert!((out.at2(0, 0) - grid.data()[(2 * 5 + 3) * 2]).abs() < 1e-12);
        assert!((out.at2(1, 1) - grid.data()[(4 * 5 + 4) * 2 + 1]).abs() < 1e-12);
    }

    #[test]
    fn plane_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Tensor::randn([4, 4, 3], 1.0, &mut rng);
        let uv = Tensor::uniform([6, 2], -0.95, 0.95, &mut rng);
        let r = check_inputs("plane_sample", &[grid, uv], |t, v| plane_sample(t, v[0], v[1]), 100, 0);
        assert!(r.passed(1e-6), "{r:?}");
    }

    fn gaussians(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian4D> {
        (0..n)
            .map(|_| {
                let q = [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.1];
                let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                Gaussian4D {
                    center: [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
                    log_scale: [-2.0, -2.5, -1.5],
                    rotation: q.map(|x| x / qn),
                    opacity_logit: 0.3,
                    feature: [0.1; 32],
                }
            })
            .collect()
    }

    #[test]
    fn zero_grids_and_zero_bias_decoder_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let gs = gaussians(10, &mut rng);
        let gp = GaussianParams::register(&mut store, &gs);
        let field = DeformationField::new(&mut store, DeformationConfig::default(), BOUNDS, &mut rng);
        for id in field.planes.iter().flatten() {
            store.get_mut(*id).data_mut().fill(0.0);
        }
        // Heads with random weights still see a zero hidden vector.
        for l in [&field.head_center, &field.head_scale, &field.head_rotation] {
            let w = Tensor::randn(store.get(l.weight).shape().to_vec(), 1.0, &mut rng);
            store.set(l.weight, w);
        }
        for t in [0.0, 0.37, 1.0] {
            let mut tape = Tape::new();
            let d = DeformedVars::deformed(&mut tape, &store, &gp, &field, t).to_vec(&tape);
            for (a, b) in d.iter().zip(&gs) {
                assert_eq!(a.center, b.center);
                assert_eq!(a.log_scale, b.log_scale);
                for k in 0..4 {
                    assert!((a.rotation[k] - b.rotation[k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn random_field_varies_with_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let gs = gaussians(5, &mut rng);
        let gp = GaussianParams::register(&mut store, &gs);
        let field = DeformationField::new(&mut store, DeformationConfig::default(), BOUNDS, &mut rng);
        for id in field.param_ids() {
            let t = Tensor::randn(store.get(id).shape().to_vec(), 0.5, &mut rng);
            store.set(id, t);
        }
        let mut tape = Tape::new();
        let a = DeformedVars::deformed(&mut tape, &store, &gp, &field, 0.1).to_vec(&tape);
        let b = DeformedVars::deformed(&mut tape, &store, &gp, &field, 0.8).to_vec(&tape);
        assert_ne!(a[0].center, b[0].center);
    }

    #[test]
    fn field_gradients_wrt_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let field = DeformationField::new(&mut store, DeformationConfig::default(), BOUNDS, &mut rng);
        for id in field.param_ids() {
            let t = Tensor::randn(store.get(id).shape().to_vec(), 0.5, &mut rng);
            store.set(id, t);
        }
        let centers = Tensor::uniform([4, 3], -0.8, 0.8, &mut rng);
        let r = check_inputs(
            "deformation",
            &[centers],
            |t, v| {
                let d = field.forward(t, &store, v[0], 0.4);
                t.concat_cols(&[d.center, d.log_scale, d.rotation])
            },
            100,
            1,
        );
        assert!(r.passed(1e-4), "{r:?}");
    }
}
