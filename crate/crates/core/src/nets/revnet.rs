//! Reversible feature network built from additive coupling blocks.
//!
//! Block `k` splits the 32 channels into a conditioning half `A` and an
//! updated half `B` through a fixed permutation `π_k`, then sets
//! `B ← B + s_k(A)` with `s_k = conv3×3(16→32) → ReLU → conv1×1(32→16)`.
//! Channels stay in place: the permutation only chooses which channels play
//! `A` and `B`, and alternating blocks swap the roles. The inverse subtracts
//! the same update in reverse block order, so inversion is exact up to
//! rounding for any weights.

use std::ops::{Add, Mul, Sub};

use rand::Rng;
use thiserror::Error;

use crate::nets::layers::{Conv2d, ConvGeom, Init};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const DEFAULT_BLOCKS: usize = 8;
const HALF: usize = CHANNELS / 2;
const HIDDEN: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum RevNetError {
    #[error("input contains a non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("expected {expected} channels, got shape {shape:?}")]
    Channels { expected: usize, shape: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Coupling {
    conv: Conv2d,
    mix: Conv2d,
    /// `perm[j]` is the channel placed at position `j`; the first half is `A`.
    perm: Vec<usize>,
    inv: Vec<usize>,
}

/// Channel roles for block `k`: a stride-5 shuffle offset by `11k`, with
/// the halves swapped on odd blocks.
fn block_permutation(k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..CHANNELS).map(|j| (5 * j + 11 * k) % CHANNELS).collect();
    if k % 2 == 1 {
        p.rotate_left(HALF);
    }
    p
}

#[derive(Clone, Debug)]
pub struct RevNet {
    blocks: Vec<Coupling>,
}

impl RevNet {
    /// Registers `revnet.block{k}.{conv,mix}`; `mix` starts at zero so the
    /// network begins as channel zero-padding.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_blocks: usize, rng: &mut R) -> Self {
        let blocks = (0..n_blocks)
            .map(|k| {
                let conv = Conv2d::new(
                    store,
                    &format!("revnet.block{k}.conv"),
                    HALF,
                    HIDDEN,
                    ConvGeom::same3(),
                    Init::He,
                    rng,
                );
                let mix = Conv2d::new(
                    store,
                    &format!("revnet.block{k}.mix"),
                    HIDDEN,
                    HALF,
                    ConvGeom { kernel: 1, stride: 1, pad: 0 },
                    Init::Zero,
                    rng,
                );
                let perm = block_permutation(k);
                let mut inv = vec![0; CHANNELS];
                for (j, &c) in perm.iter().enumerate() {
                    inv[c] = j;
                }
                Coupling { conv, mix, perm, inv }
            })
            .collect();
        Self { blocks }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn update(&self, k: usize, tape: &mut Tape, store: &ParamStore, a: Var) -> Var {
        let b = &self.blocks[k];
        let h = b.conv.forward(tape, store, a);
        let h = tape.relu(h);
        b.mix.forward(tape, store, h)
    }

    fn block(&self, k: usize, tape: &mut Tape, store: &ParamStore, x: Var, sign: f64) -> Var {
        let blk = &self.blocks[k];
        let xp = tape.permute_cols(x, &blk.perm);
        let a = tape.slice_cols(xp, 0, HALF);
        let b = tape.slice_cols(xp, HALF, CHANNELS);
        let u = self.update(k, tape, store, a);
        let b = if sign > 0.0 { tape.add(b, u) } else { tape.sub(b, u) };
        let y = tape.concat_cols(&[a, b]);
        tape.permute_cols(y, &blk.inv)
    }

    /// `[H, W, 32] -> [H, W, 32]` through all blocks.
    pub fn forward_features(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        (0..self.blocks.len()).fold(z, |x, k| self.block(k, tape, store, x, 1.0))
    }

    /// Exact inverse of [`RevNet::forward_features`].
    pub fn inverse_features(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        (0..self.blocks.len()).rev().fold(z, |x, k| self.block(k, tape, store, x, -1.0))
    }

    /// `ℛ_f`: zero-pads an `[H, W, 3]` image to 32 channels and runs the blocks.
    pub fn rev_forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var, RevNetError> {
        let v = tape.value(image);
        if v.cols() != IMAGE_CHANNELS || v.shape().len() != 3 {
            return Err(RevNetError::Channels { expected: IMAGE_CHANNELS, shape: v.shape().to_vec() });
        }
        if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
            return Err(RevNetError::NonFinite(i));
        }
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let pad = tape.constant(Tensor::zeros([h, w, CHANNELS - IMAGE_CHANNELS]));
        let z = tape.concat_cols(&[image, pad]);
        Ok(self.forward_features(tape, store, z))
    }

    /// `R_rev`: inverts the blocks and keeps the first 3 channels (unclamped).
    pub fn rev_inverse(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Var {
        let z = self.inverse_features(tape, store, features);
        tape.slice_cols(z, 0, IMAGE_CHANNELS)
    }

    /// Tape-free forward on `[H, W, 32]` data in any supported precision.
    pub fn forward_plain<T: Scalar>(&self, store: &ParamStore, z: &[T], h: usize, w: usize) -> Vec<T> {
        let mut x = z.to_vec();
        for k in 0..self.blocks.len() {
            self.block_plain(k, store, &mut x, h, w, true);
        }
        x
    }

    /// Tape-free inverse on `[H, W, 32]` data.
    pub fn inverse_plain<T: Scalar>(&self, store: &ParamStore, z: &[T], h: usize, w: usize) -> Vec<T> {
        let mut x = z.to_vec();
        for k in (0..self.blocks.len()).rev() {
            self.block_plain(k, store, &mut x, h, w, false);
        }
        x
    }

    fn block_plain<T: Scalar>(&self, k: usize, store: &ParamStore, x: &mut [T], h: usize, w: usize, fwd: bool) {
        let blk = &self.blocks[k];
        let n = h * w;
        let mut a = vec![T::from_f64(0.0); n * HALF];
        for p in 0..n {
            for j in 0..HALF {
                a[p * HALF + j] = x[p * CHANNELS + blk.perm[j]];
            }
        }
        let hid = conv_plain(&a, h, w, HALF, store.get(blk.conv.weight), store.get(blk.conv.bias), 3, true);
        let u = conv_plain(&hid, h, w, HIDDEN, store.get(blk.mix.weight), store.get(blk.mix.bias), 1, false);
        for p in 0..n {
            for j in 0..HALF {
                let c = &mut x[p * CHANNELS + blk.perm[HALF + j]];
                *c = if fwd { *c + u[p * HALF + j] } else { *c - u[p * HALF + j] };
            }
        }
    }
}

/// Arithmetic needed by the tape-free path.
pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + PartialOrd {
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Stride-1 "same" convolution with odd square kernel on `[H, W, Cin]`.
#[allow(clippy::too_many_arguments)]
fn conv_plain<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    relu: bool,
) -> Vec<T> {
    let cout = bias.numel();
    let wt: Vec<T> = weight.data().iter().map(|&v| T::from_f64(v)).collect();
    let zero = T::from_f64(0.0);
    let r = (k / 2) as isize;
    let mut out = vec![zero; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for (oc, b) in o.iter_mut().zip(bias.data()) {
                *oc = T::from_f64(*b);
            }
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as isize + ky as isize - r;
                    let ix = xx as isize + kx as isize - r;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    for (ci, &xv) in src.iter().enumerate() {
                        let wrow = &wt[((ky * k + kx) * cin + ci) * cout..][..cout];
                        for (oc, &wv) in o.iter_mut().zip(wrow) {
                            *oc = *oc + xv * wv;
                        }
                    }
                }
            }
            if relu {
                for oc in o.iter_mut() {
                    if *oc < zero {
                        *oc = zero;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(shape, std, &mut rng));
        }
    }

    #[test]
    fn permutations_are_bijections_with_alternating_roles() {
        for k in 0..8 {
            let mut p = block_permutation(k);
            p.sort_unstable();
            assert_eq!(p, (0..32).collect::<Vec<_>>());
        }
        assert_ne!(block_permutation(0)[..16], block_permutation(1)[..16]);
    }

    #[test]
    fn zero_initialized_blocks_zero_pad_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = RevNet::new(&mut store, DEFAULT_BLOCKS, &mut rng);
        let img = Tensor::uniform([5, 6, 3], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let y = net.rev_forward(&mut tape, &store, x).unwrap();
        let v = tape.value(y);
        for p in 0..30 {
            assert_eq!(&v.data()[p * 32..p * 32 + 3], &img.data()[p * 3..p * 3 + 3]);
            assert!(v.data()[p * 32 + 3..(p + 1) * 32].iter().all(|&z| z == 0.0));
        }
        let zeros = tape.constant(Tensor::zeros([5, 6, 32]));
        let back = net.rev_inverse(&mut tape, &store, zeros);
        assert!(tape.value(back).data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn random_weights_invert_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = RevNet::new(&mut store, DEFAULT_BLOCKS, &mut rng);
        randomize(&mut store, 0.2, 3);
        let z = Tensor::randn([8, 8, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let f = net.forward_features(&mut tape, &store, zv);
        assert!(tape.value(f).max_abs_diff(&z) > 1e-2);
        let back = net.inverse_features(&mut tape, &store, f);
        assert!(tape.value(back).max_abs_diff(&z) < 1e-10);

        let plain = net.forward_plain(&store, z.data(), 8, 8);
        assert!(tape.value(f).data().iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_precision_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = RevNet::new(&mut store, DEFAULT_BLOCKS, &mut rng);
        randomize(&mut store, 0.2, 5);
        let z: Vec<f32> = Tensor::randn([16, 16, 32], 1.0, &mut rng).data().iter().map(|&v| v as f32).collect();
        let f = net.forward_plain(&store, &z, 16, 16);
        let back = net.inverse_plain(&store, &f, 16, 16);
        let err = z.iter().zip(&back).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-4, "f32 round trip error {err}");
    }

    #[test]
    fn rejects_non_finite_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let net = RevNet::new(&mut store, 2, &mut rng);
        let mut img = Tensor::zeros([4, 4, 3]);
        img.data_mut()[7] = f64::INFINITY;
        let mut tape = Tape::new();
        let x = tape.constant(img);
        assert_eq!(net.rev_forward(&mut tape, &store, x).unwrap_err(), RevNetError::NonFinite(7));
    }
}
