//! Inference: style transforms from the predictors, stylized views, the
//! per-frame 2D baseline and the consistency protocol.

use serde::Serialize;

use crate::metrics::{consistency_rmse, feature_distance, warp, MetricsError};
use crate::model::Model;
use crate::nets::encoder::FrozenEncoder;
use crate::nets::whiten::whiten;
use crate::render::RasterMode;
use crate::scene::flow_oracle;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::wct::{apply_transform, closed_form_transform, StyleTransform, WctError};

/// Side of the square style images fed to `ℛ_f`.
pub const STYLE_SIZE: usize = 256;

/// Center-crops `image` to a square and resamples it bilinearly to
/// `size × size` (pixel centers aligned).
pub fn fit_style(image: &Tensor, size: usize) -> Tensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    if side == size {
        return Tensor::from_fn([size, size, c], |i| {
            let (y, x, ch) = (i / (size * c), i / c % size, i % c);
            image.data()[((y0 + y) * w + x0 + x) * c + ch]
        });
    }
    let scale = side as f64 / size as f64;
    let d = image.data();
    let at = |y: usize, x: usize, ch: usize| d[((y0 + y) * w + x0 + x) * c + ch];
    Tensor::from_fn([size, size, c], |i| {
        let i = [i / (size * c), i / c % size, i % c];
        let sy = ((i[0] as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let sx = ((i[1] as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let (ya, xa) = (sy.floor() as usize, sx.floor() as usize);
        let (yb, xb) = ((ya + 1).min(side - 1), (xa + 1).min(side - 1));
        let (fy, fx) = (sy - ya as f64, sx - xa as f64);
        let top = at(ya, xa, i[2]) * (1.0 - fx) + at(ya, xb, i[2]) * fx;
        let bot = at(yb, xa, i[2]) * (1.0 - fx) + at(yb, xb, i[2]) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn pixels(f: &Tensor) -> Tensor {
    let c = f.cols();
    Tensor::new([f.numel() / c, c], f.data().to_vec())
}

/// A style image prepared for the predictors: `ℛ_f(I_s)` at [`STYLE_SIZE`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStyle {
    pub encoded: Tensor,
    pub mean: Vec<f64>,
}

impl EncodedStyle {
    pub fn new(model: &Model, style: &Tensor) -> Self {
        let encoded = model.encode_image(style);
        let mean = pixels(&encoded).mean_rows();
        Self { encoded, mean }
    }
}

impl Model {
    /// `μ(G_E)`.
    pub fn feature_mean(&self) -> Vec<f64> {
        self.gaussian_features().mean_rows()
    }

    /// Predicted transform for a style: `T_c` from `cov(Φ_c(G_E))`, `T_s`
    /// from `cov(Φ_s(ℛ_f(I_s)))`, `μ_f = μ(G_E)` and `μ_s = μ(ℛ_f(I_s))`.
    pub fn style_transform(
        &self,
        style: &EncodedStyle,
    ) -> Result<StyleTransform, crate::nets::extractors::ExtractorError> {
        let (t_s, mu_s) = self.style_factor(style)?;
        Ok(self.with_style_factor(t_s, mu_s))
    }

    /// Content half of the predicted transform: `(T_c, μ_f)`.
    pub fn content_factor(&self) -> (Tensor, Vec<f64>) {
        let mut tape = Tape::with_trainable(|_| false);
        let g = tape.param(&self.store, self.gaussians.feature);
        let fc = self.phi_c.forward(&mut tape, &self.store, g);
        let (cc, _) = crate::wct::tape_covariance(&mut tape, fc);
        let t_c = self.predictor.whitening(&mut tape, &self.store, cc);
        (tape.value(t_c).clone(), self.feature_mean())
    }

    /// Style half of the predicted transform: `(T_s, μ_s)`.
    pub fn style_factor(
        &self,
        style: &EncodedStyle,
    ) -> Result<(Tensor, Vec<f64>), crate::nets::extractors::ExtractorError> {
        let mut tape = Tape::with_trainable(|_| false);
        let s = tape.constant(style.encoded.clone());
        let fs = self.phi_s.forward(&mut tape, &self.store, s)?;
        let (cs, _) = crate::wct::tape_covariance(&mut tape, fs);
        let t_s = self.predictor.coloring(&mut tape, &self.store, cs);
        Ok((tape.value(t_s).clone(), style.mean.clone()))
    }

    /// Completes a style factor with this model's content factor.
    pub fn with_style_factor(&self, t_s: Tensor, mu_s: Vec<f64>) -> StyleTransform {
        let (t_c, mu_f) = self.content_factor();
        StyleTransform { t_c, t_s, mu_f, mu_s }
    }

    /// Closed-form WCT between `G_E` and the style's encoded pixels.
    pub fn closed_form_style_transform(&self, style: &EncodedStyle) -> Result<StyleTransform, WctError> {
        closed_form_transform(self.gaussian_features(), &pixels(&style.encoded))
    }

    /// Feature map `F` of a view.
    pub fn render_features(&self, camera: usize, t: f64) -> Tensor {
        self.renderer(RasterMode::Tiled).render(&self.store, &self.meta.cameras[camera], t).feature
    }

    /// CSPN guidance for a reconstruction: its channel-whitened version.
    pub fn guidance(recon: &Tensor) -> Tensor {
        whiten(recon)
    }

    /// `𝒫(stylized, whiten(recon))`.
    pub fn propagate(&self, stylized: &Tensor, recon: &Tensor) -> Tensor {
        let mut tape = Tape::with_trainable(|_| false);
        let x = tape.constant(stylized.clone());
        let g = tape.constant(Self::guidance(recon));
        let y = self.cspn.forward(&mut tape, &self.store, x, g);
        tape.value(y).clone()
    }

    /// Stylizes the feature map of a rendered view.
    pub fn stylize_features(&self, features: &Tensor, transform: &StyleTransform, propagate: bool) -> Stylized {
        let trans = self.decode_features(&apply_transform(features, transform));
        let pro = propagate.then(|| self.propagate(&trans, &self.decode_features(features)));
        Stylized { trans, pro }
    }

    pub fn stylize_view(&self, camera: usize, t: f64, transform: &StyleTransform, propagate: bool) -> Stylized {
        self.stylize_features(&self.render_features(camera, t), transform, propagate)
    }

    /// Per-frame 2D WCT: closed form between this frame's feature pixels and
    /// the style's, with the frame's own mean.
    pub fn baseline_view(&self, camera: usize, t: f64, style: &EncodedStyle) -> Result<Tensor, WctError> {
        let f = self.render_features(camera, t);
        let tr = closed_form_transform(&pixels(&f), &pixels(&style.encoded))?;
        Ok(self.decode_features(&apply_transform(&f, &tr)))
    }
}

/// `Î_trans` and, when propagation ran, `Î_pro`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stylized {
    pub trans: Tensor,
    pub pro: Option<Tensor>,
}

impl Stylized {
    /// The final image: `Î_pro` when present.
    pub fn output(&self) -> &Tensor {
        self.pro.as_ref().unwrap_or(&self.trans)
    }
}

/// Clamps every value to `[0, 1]`.
pub fn clamp01(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Range {
    Short,
    Long,
    /// Neighboring cameras at one timestamp.
    Same,
}

impl Range {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "short" => Some(Self::Short),
            "long" => Some(Self::Long),
            "same" => Some(Self::Same),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Long => "long",
            Self::Same => "same",
        }
    }
}

/// One evaluated pair `(view_a, k_a) -> (view_b, k_b)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub method: String,
    pub range: Range,
    pub camera_a: usize,
    pub k_a: usize,
    pub camera_b: usize,
    pub k_b: usize,
    pub rmse: f64,
    pub feat_dist: f64,
    pub valid_fraction: f64,
}

/// Pairs `((camera_a, k_a), (camera_b, k_b))` over a ring of `cameras`
/// views and `timesteps` timestamps.
///
/// Short: `(i, k) -> (i+1, k+1)`. Long: `(i, k) -> (i+3, k+1)`, spanning four
/// adjacent views. Same: `(i, k) -> (i+1, k)`. Camera indices do not wrap.
pub fn protocol_pairs(range: Range, cameras: usize, timesteps: usize) -> Vec<((usize, usize), (usize, usize))> {
    let (dc, dk) = match range {
        Range::Short => (1, 1),
        Range::Long => (3, 1),
        Range::Same => (1, 0),
    };
    let mut out = Vec::new();
    for i in 0..cameras.saturating_sub(dc) {
        for k in 0..timesteps.saturating_sub(dk) {
            out.push(((i, k), (i + dc, k + dk)));
        }
    }
    out
}

/// Renders every (camera, timestamp) frame of a method; indexed
/// `camera * T + k`, values clamped to `[0, 1]`.
pub type Frames = Vec<Tensor>;

pub fn stylized_frames(model: &Model, transform: &StyleTransform, propagate: bool) -> Frames {
    let mut out = Vec::new();
    for c in 0..model.meta.cameras.len() {
        for &t in &model.meta.timestamps {
            out.push(clamp01(model.stylize_view(c, t, transform, propagate).output()));
        }
    }
    out
}

pub fn baseline_frames(model: &Model, style: &EncodedStyle) -> Result<Frames, WctError> {
    let mut out = Vec::new();
    for c in 0..model.meta.cameras.len() {
        for &t in &model.meta.timestamps {
            out.push(clamp01(&model.baseline_view(c, t, style)?));
        }
    }
    Ok(out)
}

/// Evaluates `frames` on every pair of `range` with the analytic flow.
pub fn eval_protocol(
    model: &Model,
    encoder: &FrozenEncoder,
    method: &str,
    frames: &[Tensor],
    range: Range,
) -> Result<Vec<ConsistencyReport>, MetricsError> {
    let meta = &model.meta;
    let nt = meta.timestamps.len();
    let mut out = Vec::new();
    for ((ca, ka), (cb, kb)) in protocol_pairs(range, meta.cameras.len(), nt) {
        let va = meta.view(ca, meta.timestamps[ka]);
        let vb = meta.view(cb, meta.timestamps[kb]);
        let flow = flow_oracle(meta, vb, va).map_err(|e| MetricsError::Size(e.to_string()))?;
        let (a, b) = (&frames[ca * nt + ka], &frames[cb * nt + kb]);
        let rmse = consistency_rmse(a, b, &flow)?;
        let (warped, mask) = warp(a, &flow)?;
        let feat_dist = feature_distance(encoder, &warped, b, Some(&mask));
        out.push(ConsistencyReport {
            method: method.to_string(),
            range,
            camera_a: ca,
            k_a: ka,
            camera_b: cb,
            k_b: kb,
            rmse,
            feat_dist,
            valid_fraction: mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64,
        });
    }
    Ok(out)
}

/// Mean RMSE and feature distance of a report list.
pub fn summarize(reports: &[ConsistencyReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (reports.iter().map(|r| r.rmse).sum::<f64>() / n, reports.iter().map(|r| r.feat_dist).sum::<f64>() / n)
}
