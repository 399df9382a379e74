//! Warped-pair error metrics.

use thiserror::Error;

use crate::metrics::flow::{bilinear_corners, corner_weight, FlowField};
use crate::nets::encoder::FrozenEncoder;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels after masking")]
    EmptyValidSet,
    #[error("size mismatch: {0}")]
    Size(String),
}

/// Backward warp: `out(p) = image(p + flow(p))`, bilinear. `flow` lives on the
/// output grid. A pixel is masked out when its flow is invalid or any of the
/// four sampled neighbors falls outside the frame; masked pixels are zero.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<(Tensor, Vec<bool>), MetricsError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != flow.height || s[1] != flow.width {
        return Err(MetricsError::Size(format!("image {:?} vs flow {}x{}", s, flow.width, flow.height)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; h * w * c];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some([dx, dy]) = flow.get(x, y) else { continue };
            let u = x as f64 + 0.5 + dx as f64;
            let v = y as f64 + 0.5 + dy as f64;
            let Some((corners, fx, fy)) = bilinear_corners(u, v, w, h) else { continue };
            let px = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
            for (k, &i) in corners.iter().enumerate() {
                let wk = corner_weight(k, fx, fy);
                for (o, s) in px.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += wk * s;
                }
            }
            mask[y * w + x] = true;
        }
    }
    Ok((Tensor::new([h, w, c], out), mask))
}

/// RMSE between `warp(a, flow)` and `b` over the valid pixels. `flow` is on
/// `b`'s grid and points into `a`, i.e. `flow_oracle(view_b, view_a)`.
pub fn consistency_rmse(a: &Tensor, b: &Tensor, flow: &FlowField) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Size(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (warped, mask) = warp(a, flow)?;
    masked_rmse(&warped, b, &mask)
}

pub fn masked_rmse(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<f64, MetricsError> {
    let c = a.shape()[2];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in p * c..(p + 1) * c {
            let d = a.data()[k] - b.data()[k];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(MetricsError::EmptyValidSet);
    }
    Ok((sum / count as f64).sqrt())
}

/// Mean squared distance between per-pixel unit-normalized encoder
/// activations, averaged over the stages. Masked-out pixels of `a` are
/// replaced by `b` before encoding so they contribute nothing local.
pub fn feature_distance(encoder: &FrozenEncoder, a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> f64 {
    let mut a = a.clone();
    if let Some(mask) = mask {
        let c = a.shape()[2];
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
            a.data_mut()[p * c..(p + 1) * c].copy_from_slice(&b.data()[p * c..(p + 1) * c]);
        }
    }
    let fa = encoder.features(&a);
    let fb = encoder.features(b);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let c = *x.shape().last().unwrap();
        let pixels = x.numel() / c;
        let mut acc = 0.0;
        for (px, py) in x.data().chunks(c).zip(y.data().chunks(c)) {
            let nx = px.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            let ny = py.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            acc += px.iter().zip(py).map(|(u, v)| (u / nx - v / ny).powi(2)).sum::<f64>();
        }
        total += acc / pixels as f64;
    }
    total / fa.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Tensor {
        Tensor::from_fn([h, w, 1], |i| (i % w) as f64 + 10.0 * (i / w) as f64)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = ramp(8, 6);
        let (out, mask) = warp(&img, &FlowField::zero(8, 6)).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| m));
        assert_eq!(consistency_rmse(&img, &img, &FlowField::zero(8, 6)).unwrap(), 0.0);
    }

    #[test]
    fn integer_shift_on_ramp() {
        let (w, h) = (10, 4);
        let img = ramp(w, h);
        let mut flow = FlowField::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                flow.set(x, y, [3.0, 0.0]);
            }
        }
        let (out, mask) = warp(&img, &flow).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                assert_eq!(mask[i], x + 3 < w);
                if mask[i] {
                    assert_eq!(out.data()[i], img.data()[i + 3]);
                }
            }
        }
    }

    #[test]
    fn all_invalid_errors() {
        let img = ramp(4, 4);
        assert_eq!(consistency_rmse(&img, &img, &FlowField::invalid(4, 4)), Err(MetricsError::EmptyValidSet));
    }

    #[test]
    fn constant_offset() {
        let a = Tensor::full([5, 5, 3], 0.3);
        let b = Tensor::full([5, 5, 3], 0.4);
        let r = consistency_rmse(&a, &b, &FlowField::zero(5, 5)).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
    }

    #[test]
    fn feature_distance_of_identical_images_is_zero() {
        let enc = FrozenEncoder::new();
        let img = Tensor::from_fn([16, 16, 3], |i| ((i * 37) % 11) as f64 / 11.0);
        assert_eq!(feature_distance(&enc, &img, &img, None), 0.0);
        let other = img.map(|v| 1.0 - v);
        assert!(feature_distance(&enc, &img, &other, None) > 0.0);
    }
}
