//! Differentiable software rasterizer and the color/feature decoding heads.

pub mod project;
pub mod raster;

use rand::Rng;

use crate::nets::layers::Mlp;
use crate::params::ParamStore;
use crate::scene::{Camera, DeformationField, DeformedVars, GaussianParams, FEATURE_DIM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use project::{evaluate_alpha, project, project_vars, RenderError, Splat2D};
pub use raster::{composite, RasterMode};

/// `ψ_c` (32→64→3, sigmoid applied by the caller) and `ψ_f` (residual
/// 32→64→32, identity at initialization).
#[derive(Clone, Debug)]
pub struct Heads {
    pub psi_c: Mlp,
    pub psi_f: Mlp,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            psi_c: Mlp::new(store, "psi_c", (FEATURE_DIM, 64, 3), false, rng),
            psi_f: Mlp::new(store, "psi_f", (FEATURE_DIM, 64, FEATURE_DIM), true, rng),
        }
    }

    /// `E[H, W, 32] -> (C[H, W, 3], F[H, W, 32])`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, embedding: Var) -> (Var, Var) {
        let s = tape.shape(embedding).to_vec();
        let (h, w) = (s[0], s[1]);
        let e = tape.reshape(embedding, &[h * w, FEATURE_DIM]);
        let c = self.psi_c.forward(tape, store, e);
        let c = tape.sigmoid(c);
        let f = self.psi_f.forward(tape, store, e);
        (tape.reshape(c, &[h, w, 3]), tape.reshape(f, &[h, w, FEATURE_DIM]))
    }
}

/// Tape handles of one rendered view.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `E`, `[H, W, 32]`.
    pub embedding: Var,
    /// Accumulated alpha `Σ α_i T_i`, `[H, W, 1]`.
    pub alpha: Var,
    /// `C`, `[H, W, 3]`.
    pub color: Var,
    /// `F`, `[H, W, 32]`.
    pub feature: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub embedding: Tensor,
    pub alpha: Tensor,
    pub color: Tensor,
    pub feature: Tensor,
}

impl RenderOutput {
    pub fn from_vars(tape: &Tape, v: &RenderVars) -> Self {
        Self {
            embedding: tape.value(v.embedding).clone(),
            alpha: tape.value(v.alpha).clone(),
            color: tape.value(v.color).clone(),
            feature: tape.value(v.feature).clone(),
        }
    }
}

/// Projects and composites deformed Gaussians into `(E, alpha)`.
pub fn rasterize(tape: &mut Tape, g: &DeformedVars, cam: &Camera, mode: RasterMode) -> (Var, Var) {
    let n = tape.shape(g.opacity_logit)[0];
    let splats = project_vars(tape, g.center, g.log_scale, g.rotation, cam);
    let opacity = tape.sigmoid(g.opacity_logit);
    let ones = tape.constant(Tensor::full([n, 1], 1.0));
    let feats = tape.concat_cols(&[g.feature, ones]);
    let out = composite(tape, splats, opacity, feats, cam.width, cam.height, mode);
    (tape.slice_cols(out, 0, FEATURE_DIM), tape.slice_cols(out, FEATURE_DIM, FEATURE_DIM + 1))
}

/// Everything needed to render a view of the embedded scene.
#[derive(Clone, Copy, Debug)]
pub struct Renderer<'a> {
    pub gaussians: &'a GaussianParams,
    /// `None` renders the canonical (static) scene.
    pub deformation: Option<&'a DeformationField>,
    pub heads: &'a Heads,
    pub mode: RasterMode,
}

impl Renderer<'_> {
    /// Deform, project, composite and decode on `tape`.
    pub fn render_vars(&self, tape: &mut Tape, store: &ParamStore, cam: &Camera, t: f64) -> RenderVars {
        let g = match self.deformation {
            Some(field) => DeformedVars::deformed(tape, store, self.gaussians, field, t),
            None => DeformedVars::canonical(tape, store, self.gaussians),
        };
        let (embedding, alpha) = rasterize(tape, &g, cam, self.mode);
        let (color, feature) = self.heads.decode(tape, store, embedding);
        RenderVars { embedding, alpha, color, feature }
    }

    pub fn render(&self, store: &ParamStore, cam: &Camera, t: f64) -> RenderOutput {
        let mut tape = Tape::with_trainable(|_| false);
        let v = self.render_vars(&mut tape, store, cam, t);
        RenderOutput::from_vars(&tape, &v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_embedding_decodes_to_gray() {
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros([4, 5, FEATURE_DIM]));
        let (c, f) = heads.decode(&mut tape, &store, e);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.5));
        assert_eq!(tape.value(f), tape.value(e));
    }

    #[test]
    fn feature_head_is_identity_at_init() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = Heads::new(&mut store, &mut rng);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::randn([3, 3, FEATURE_DIM], 1.0, &mut rng));
        let (_, f) = heads.decode(&mut tape, &store, e);
        assert_eq!(tape.value(f), tape.value(e));
    }
}
