//! Convolutional spatial propagation: iterative per-pixel convex diffusion
//! with 3×3 affinity kernels predicted from a guidance image.

use rand::Rng;

use crate::nets::layers::{Conv2d, ConvGeom, Init};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{axpy, Tensor};

pub const TAPS: usize = 9;
pub const CENTER_TAP: usize = 4;
pub const DEFAULT_ITERATIONS: usize = 3;
const GUIDE_WIDTH: usize = 16;
/// Initial center logit; softmax gives the center ~70% of the mass.
const CENTER_BIAS: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct Cspn {
    pub guide: Conv2d,
    pub logits: Conv2d,
    pub temperature: ParamId,
    pub iterations: usize,
}

impl Cspn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, iterations: usize, rng: &mut R) -> Self {
        let guide = Conv2d::new(store, "cspn.guide", 3, GUIDE_WIDTH, ConvGeom::same3(), Init::He, rng);
        let logits = Conv2d::new(store, "cspn.logits", GUIDE_WIDTH, TAPS, ConvGeom::same3(), Init::He, rng);
        store.get_mut(logits.bias).data_mut()[CENTER_TAP] = CENTER_BIAS;
        let temperature = store.add("cspn.temperature", Tensor::scalar(1.0));
        Self { guide, logits, temperature, iterations }
    }

    /// Per-pixel kernels `[H·W, 9]`: softmax of temperature-scaled logits.
    pub fn kernels(&self, tape: &mut Tape, store: &ParamStore, guidance: Var) -> Var {
        let h = self.guide.forward(tape, store, guidance);
        let h = tape.relu(h);
        let l = self.logits.forward(tape, store, h);
        let n = tape.value(l).rows();
        let l = tape.reshape(l, &[n, TAPS]);
        let tau = tape.param(store, self.temperature);
        let tau = tape.reshape(tau, &[1, 1]);
        let ones = tape.constant(Tensor::full([n, 1], 1.0));
        let tau = tape.matmul(ones, tau);
        let tau = tape.reshape(tau, &[n]);
        let scaled = tape.mul_col(l, tau);
        tape.softmax_rows(scaled)
    }

    /// `𝒫(stylized, guidance)` with the configured iteration count.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stylized: Var, guidance: Var) -> Var {
        let k = self.kernels(tape, store, guidance);
        propagate(tape, stylized, k, self.iterations)
    }
}

/// Neighbor index for tap `t` at `(y, x)` with replicated borders.
#[inline]
fn neighbor(y: usize, x: usize, t: usize, h: usize, w: usize) -> usize {
    let ny = (y as isize + (t / 3) as isize - 1).clamp(0, h as isize - 1) as usize;
    let nx = (x as isize + (t % 3) as isize - 1).clamp(0, w as isize - 1) as usize;
    ny * w + nx
}

/// One diffusion step `y(p) = Σ_t k[p, t] x(p + offset_t)` on `[H, W, C]`.
pub fn propagate_step(tape: &mut Tape, x: Var, kernels: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert_eq!(tape.shape(kernels), &[h * w, TAPS], "kernel shape");
    let (xv, kv) = (tape.value(x).data(), tape.value(kernels).data());
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let o = &mut out[p * c..(p + 1) * c];
            for t in 0..TAPS {
                let q = neighbor(y, xx, t, h, w);
                axpy(kv[p * TAPS + t], &xv[q * c..(q + 1) * c], o);
            }
        }
    }
    tape.record(
        &[x, kernels],
        Tensor::new(shape, out),
        Box::new(move |ctx| {
            let (xv, kv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![0.0; h * w * c];
            let mut gk = vec![0.0; h * w * TAPS];
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let gp = &g[p * c..(p + 1) * c];
                    for t in 0..TAPS {
                        let q = neighbor(y, xx, t, h, w);
                        gk[p * TAPS + t] = gp.iter().zip(&xv[q * c..(q + 1) * c]).map(|(a, b)| a * b).sum();
                        axpy(kv[p * TAPS + t], gp, &mut gx[q * c..(q + 1) * c]);
                    }
                }
            }
            vec![ctx.needs[0].then(|| Tensor::new([h, w, c], gx)), ctx.needs[1].then(|| Tensor::new([h * w, TAPS], gk))]
        }),
    )
}

/// `iterations` diffusion steps with fixed kernels.
pub fn propagate(tape: &mut Tape, x: Var, kernels: Var, iterations: usize) -> Var {
    (0..iterations).fold(x, |acc, _| propagate_step(tape, acc, kernels))
}

/// Tape-free propagation with explicit kernels `[H·W, 9]`.
pub fn propagate_with_kernels(image: &Tensor, kernels: &Tensor, iterations: usize) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let k = tape.constant(kernels.clone());
    let y = propagate(&mut tape, x, k, iterations);
    tape.value(y).clone()
}

/// Center-only kernels, under which propagation is the identity.
pub fn identity_kernels(pixels: usize) -> Tensor {
    Tensor::from_fn([pixels, TAPS], |i| if i % TAPS == CENTER_TAP { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernels_are_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform([7, 9, 3], 0.0, 1.0, &mut rng);
        for k in [0, 1, 3, 5] {
            assert_eq!(propagate_with_kernels(&img, &identity_kernels(63), k), img);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::full([6, 5, 3], 0.37);
        let mut k = Tensor::uniform([30, 9], 0.0, 1.0, &mut rng);
        for row in k.data_mut().chunks_mut(9) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = propagate_with_kernels(&img, &k, 3);
        assert!(out.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn uniform_kernel_box_blurs_an_impulse() {
        let mut img = Tensor::zeros([7, 7, 3]);
        img.data_mut()[(3 * 7 + 3) * 3 + 1] = 9.0;
        let out = propagate_with_kernels(&img, &Tensor::full([49, 9], 1.0 / 9.0), 1);
        for y in 0..7 {
            for x in 0..7 {
                let expect = if (2..=4).contains(&y) && (2..=4).contains(&x) { 1.0 } else { 0.0 };
                assert!((out.data()[(y * 7 + x) * 3 + 1] - expect).abs() < 1e-15);
                assert_eq!(out.data()[(y * 7 + x) * 3], 0.0);
            }
        }
    }

    #[test]
    fn predicted_kernels_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cspn = Cspn::new(&mut store, 3, &mut rng);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::randn([8, 8, 3], 1.0, &mut rng));
        let k = cspn.kernels(&mut tape, &store, g);
        for row in tape.value(k).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
