//! Channel whitening of an image, used as CSPN guidance.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wct::{sym_matrix_fn, tape_covariance, SpectralFn, EIG_FLOOR};

/// `[H, W, 3] -> [H, W, 3]`: subtract the per-channel mean, then multiply by
/// the inverse square root of the channel covariance (eigenvalues floored).
pub fn whiten_image(tape: &mut Tape, image: Var) -> Var {
    let shape = tape.shape(image).to_vec();
    let c = *shape.last().unwrap();
    let n = tape.value(image).numel() / c;
    assert!(n >= 4, "whitening needs at least 4 pixels");
    let x = tape.reshape(image, &[n, c]);
    let (cov, mean) = tape_covariance(tape, x);
    let p = sym_matrix_fn(tape, cov, SpectralFn::InvSqrt, EIG_FLOOR);
    let centered = tape.sub_row(x, mean);
    let out = tape.matmul(centered, p);
    tape.reshape(out, &shape)
}

pub fn whiten(image: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let y = whiten_image(&mut tape, x);
    tape.value(y).clone()
}
