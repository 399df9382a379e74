//! Front-to-back alpha compositing of projected splats.
//!
//! Splats are sorted once by `(depth, index)`. Every pixel walks that order
//! (or its per-tile subsequence) with the same arithmetic, so the tiled and
//! naive paths agree bit for bit. The backward pass replays each pixel's walk.

use crate::render::project::{
    conic, is_visible, max_eigenvalue, COV_XX, COV_XY, COV_YY, DEPTH, MEAN_X, MEAN_Y, SPLAT_COLS,
};
use crate::tape::{Tape, Var};
use crate::tensor::{axpy, dot, Tensor};

pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
pub const TILE: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RasterMode {
    #[default]
    Tiled,
    /// Every pixel visits every visible splat.
    Naive,
}

struct Prepared {
    width: usize,
    height: usize,
    order: Vec<usize>,
    conics: Vec<[f64; 3]>,
    /// Per-tile subsequences of `order`, row-major over tiles.
    tiles: Option<Vec<Vec<usize>>>,
}

impl Prepared {
    fn new(splats: &Tensor, opacity: &Tensor, width: usize, height: usize, mode: RasterMode) -> Self {
        let n = opacity.numel();
        let mut conics = vec![[0.0; 3]; n];
        let mut order = Vec::new();
        for i in 0..n {
            let row = splats.row(i);
            if !is_visible(row, width, height) {
                continue;
            }
            if let Some((c, _)) = conic(row[COV_XX], row[COV_XY], row[COV_YY]) {
                conics[i] = c;
                order.push(i);
            }
        }
        order.sort_by(|&a, &b| splats.row(a)[DEPTH].total_cmp(&splats.row(b)[DEPTH]).then(a.cmp(&b)));
        let tiles = (mode == RasterMode::Tiled).then(|| bin_tiles(splats, opacity, &order, width, height));
        Self { width, height, order, conics, tiles }
    }

    fn list(&self, x: usize, y: usize) -> &[usize] {
        match &self.tiles {
            Some(t) => &t[(y / TILE) * self.width.div_ceil(TILE) + x / TILE],
            None => &self.order,
        }
    }
}

/// Assigns each splat to the tiles overlapped by the box outside of which
/// its alpha is provably below [`ALPHA_MIN`].
fn bin_tiles(splats: &Tensor, opacity: &Tensor, order: &[usize], width: usize, height: usize) -> Vec<Vec<usize>> {
    let (tw, th) = (width.div_ceil(TILE), height.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); tw * th];
    for &i in order {
        let sigma = opacity.data()[i];
        if !(sigma >= ALPHA_MIN) {
            continue;
        }
        let row = splats.row(i);
        let lmax = max_eigenvalue(row[COV_XX], row[COV_XY], row[COV_YY]);
        let r = (2.0 * (255.0 * sigma).ln() * lmax).sqrt() + 1.0;
        // Pixel x has center x + 0.5.
        let span = |c: f64, n: usize| -> Option<(usize, usize)> {
            let lo = (c - r - 0.5).ceil().max(0.0);
            let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let (Some((x0, x1)), Some((y0, y1))) = (span(row[MEAN_X], width), span(row[MEAN_Y], height)) else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tw + tx].push(i);
            }
        }
    }
    tiles
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    index: usize,
    alpha: f64,
    /// Transmittance before this splat.
    trans: f64,
    /// `exp(−½ m)` and whether the alpha clamp was active.
    falloff: f64,
    clamped: bool,
}

#[inline]
fn walk(
    px: f64,
    py: f64,
    list: &[usize],
    splats: &[f64],
    conics: &[[f64; 3]],
    opacity: &[f64],
    mut visit: impl FnMut(Hit),
) -> f64 {
    let mut trans = 1.0;
    for &i in list {
        let row = &splats[i * SPLAT_COLS..(i + 1) * SPLAT_COLS];
        let [a, b, c] = conics[i];
        let (dx, dy) = (px - row[MEAN_X], py - row[MEAN_Y]);
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        let falloff = (-0.5 * m).exp();
        let raw = opacity[i] * falloff;
        let alpha = raw.min(ALPHA_MAX);
        if !(alpha >= ALPHA_MIN) {
            continue;
        }
        visit(Hit { index: i, alpha, trans, falloff, clamped: raw > ALPHA_MAX });
        trans *= 1.0 - alpha;
        if trans < T_MIN {
            break;
        }
    }
    trans
}

/// Blends `features[N, D]` of the splats in `splats[N, 6]` with opacities
/// `opacity[N]` into an `[H, W, D]` image. Differentiable with respect to
/// means, covariances, opacities and features.
pub fn composite(
    tape: &mut Tape,
    splats: Var,
    opacity: Var,
    features: Var,
    width: usize,
    height: usize,
    mode: RasterMode,
) -> Var {
    let d = tape.value(features).cols();
    let prep = Prepared::new(tape.value(splats), tape.value(opacity), width, height, mode);
    let (sv, ov, fv) = (tape.value(splats).data(), tape.value(opacity).data(), tape.value(features).data());
    let mut out = vec![0.0; width * height * d];
    for y in 0..height {
        for x in 0..width {
            let px = &mut out[(y * width + x) * d..(y * width + x + 1) * d];
            walk(x as f64 + 0.5, y as f64 + 0.5, prep.list(x, y), sv, &prep.conics, ov, |h| {
                axpy(h.alpha * h.trans, &fv[h.index * d..(h.index + 1) * d], px);
            });
        }
    }
    tape.record(
        &[splats, opacity, features],
        Tensor::new([height, width, d], out),
        Box::new(move |ctx| composite_backward(ctx.inputs, ctx.grad.data(), ctx.needs, &prep, d)),
    )
}

fn composite_backward(inputs: &[&Tensor], g: &[f64], needs: &[bool], prep: &Prepared, d: usize) -> Vec<Option<Tensor>> {
    let (sv, ov, fv) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let mut gs = vec![0.0; sv.len()];
    let mut go = vec![0.0; ov.len()];
    let mut gf = vec![0.0; fv.len()];
    let mut hits = Vec::new();
    for y in 0..prep.height {
        for x in 0..prep.width {
            let gp = &g[(y * prep.width + x) * d..(y * prep.width + x + 1) * d];
            if gp.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            walk(px, py, prep.list(x, y), sv, &prep.conics, ov, |h| hits.push(h));
            // suffix = Σ_{later j} (g·f_j) α_j T_j
            let mut suffix = 0.0;
            for h in hits.iter().rev() {
                let i = h.index;
                let f = &fv[i * d..(i + 1) * d];
                let gdotf = dot(gp, f);
                let w = h.alpha * h.trans;
                axpy(w, gp, &mut gf[i * d..(i + 1) * d]);
                let dalpha = h.trans * gdotf - suffix / (1.0 - h.alpha);
                suffix += gdotf * w;
                if h.clamped {
                    continue;
                }
                go[i] += dalpha * h.falloff;
                let dm = -0.5 * dalpha * h.alpha;
                let row = &sv[i * SPLAT_COLS..(i + 1) * SPLAT_COLS];
                let [a, b, c] = prep.conics[i];
                let (dx, dy) = (px - row[MEAN_X], py - row[MEAN_Y]);
                let (q0, q1) = (a * dx + b * dy, b * dx + c * dy);
                let gr = &mut gs[i * SPLAT_COLS..(i + 1) * SPLAT_COLS];
                gr[MEAN_X] -= 2.0 * q0 * dm;
                gr[MEAN_Y] -= 2.0 * q1 * dm;
                gr[COV_XX] -= q0 * q0 * dm;
                gr[COV_XY] -= 2.0 * q0 * q1 * dm;
                gr[COV_YY] -= q1 * q1 * dm;
            }
        }
    }
    vec![
        needs[0].then(|| Tensor::new(inputs[0].shape().to_vec(), gs)),
        needs[1].then(|| Tensor::new(inputs[1].shape().to_vec(), go)),
        needs[2].then(|| Tensor::new(inputs[2].shape().to_vec(), gf)),
    ]
}
