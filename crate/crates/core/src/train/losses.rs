//! Reconstruction, art and propagation losses.
//!
//! All norms are mean squared errors so the terms are independent of image
//! size. Encoder-based terms are summed over the three encoder stages.

use crate::nets::encoder::FrozenEncoder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added to channel variances before the square root.
pub const STD_EPS: f64 = 1e-5;

/// `λ_c‖C − I‖² + λ_f‖R_rev(F) − I‖²` (means over pixels and channels).
pub fn loss_embed(tape: &mut Tape, color: Var, recon: Var, gt: Var, lambda_color: f64, lambda_feat: f64) -> Var {
    let a = tape.mse(color, gt);
    let b = tape.mse(recon, gt);
    let a = tape.scale(a, lambda_color);
    let b = tape.scale(b, lambda_feat);
    tape.add(a, b)
}

/// Per-channel mean and standard deviation of an `[H, W, C]` activation.
pub fn channel_stats(tape: &mut Tape, x: Var) -> (Var, Var) {
    let s = tape.shape(x).to_vec();
    let c = *s.last().unwrap();
    let n = tape.value(x).numel() / c;
    let flat = tape.reshape(x, &[n, c]);
    let mean = tape.mean_rows(flat);
    let centered = tape.sub_row(flat, mean);
    let sq = tape.square(centered);
    let var = tape.mean_rows(sq);
    let var = tape.add_scalar(var, STD_EPS);
    (mean, tape.sqrt(var))
}

/// Plain-value channel statistics of every encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStats {
    pub means: Vec<Tensor>,
    pub stds: Vec<Tensor>,
}

impl EncoderStats {
    pub fn of(encoder: &FrozenEncoder, image: &Tensor) -> Self {
        let mut tape = Tape::with_trainable(|_| false);
        let x = tape.constant(image.clone());
        let feats = encoder.forward(&mut tape, x);
        let (mut means, mut stds) = (Vec::new(), Vec::new());
        for f in feats {
            let (m, s) = channel_stats(&mut tape, f);
            means.push(tape.value(m).clone());
            stds.push(tape.value(s).clone());
        }
        Self { means, stds }
    }
}

/// `(L_content, L_style)`: stage-wise feature MSE against `content` targets
/// and mean/std MSE against the style statistics.
pub fn loss_art(
    tape: &mut Tape,
    encoder: &FrozenEncoder,
    stylized: Var,
    content: &[Tensor],
    style: &EncoderStats,
) -> (Var, Var) {
    let feats = encoder.forward(tape, stylized);
    let mut lc = tape.constant(Tensor::scalar(0.0));
    let mut ls = tape.constant(Tensor::scalar(0.0));
    for (k, f) in feats.into_iter().enumerate() {
        let target = tape.constant(content[k].clone());
        let c = tape.mse(f, target);
        lc = tape.add(lc, c);
        let (m, s) = channel_stats(tape, f);
        let tm = tape.constant(style.means[k].clone());
        let ts = tape.constant(style.stds[k].clone());
        let dm = tape.mse(m, tm);
        let ds = tape.mse(s, ts);
        let d = tape.add(dm, ds);
        ls = tape.add(ls, d);
    }
    (lc, ls)
}

/// `Σ_stages ‖Φ(I_pro) − Φ(recon)‖²` with the recon features precomputed.
pub fn loss_pro(tape: &mut Tape, encoder: &FrozenEncoder, propagated: Var, recon_feats: &[Tensor]) -> Var {
    let feats = encoder.forward(tape, propagated);
    let mut l = tape.constant(Tensor::scalar(0.0));
    for (f, r) in feats.into_iter().zip(recon_feats) {
        let t = tape.constant(r.clone());
        let d = tape.mse(f, t);
        l = tape.add(l, d);
    }
    l
}
