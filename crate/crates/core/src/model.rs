//! All trainable state of one scene in a single [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::cspn::{Cspn, DEFAULT_ITERATIONS};
use crate::nets::extractors::{content_extractor, StyleExtractor};
use crate::nets::layers::Mlp;
use crate::nets::revnet::{RevNet, DEFAULT_BLOCKS};
use crate::params::{ParamId, ParamStore};
use crate::render::{Heads, RasterMode, Renderer};
use crate::scene::{
    DeformationConfig, DeformationField, Gaussian4D, GaussianParams, SceneBundle, SceneMeta, FEATURE_DIM,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::wct::TransformPredictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub deformation: DeformationConfig,
    pub revnet_blocks: usize,
    pub predictor_hidden: usize,
    pub cspn_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deformation: DeformationConfig::default(),
            revnet_blocks: DEFAULT_BLOCKS,
            predictor_hidden: 512,
            cspn_iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// Stage-1 parameter prefixes; everything else belongs to stage 2.
pub const STAGE1_PREFIXES: [&str; 5] = ["gaussians.", "deform.", "psi_c.", "psi_f.", "revnet."];
pub const STAGE2_PREFIXES: [&str; 5] = ["phi_c.", "phi_s.", "mlp_c.", "mlp_s.", "cspn."];

pub fn is_stage1(name: &str) -> bool {
    STAGE1_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub meta: SceneMeta,
    pub store: ParamStore,
    pub gaussians: GaussianParams,
    pub deformation: DeformationField,
    pub heads: Heads,
    pub revnet: RevNet,
    pub phi_c: Mlp,
    pub phi_s: StyleExtractor,
    pub predictor: TransformPredictor,
    pub cspn: Cspn,
}

impl Model {
    /// Takes the scene's initial Gaussians and deformation field and adds
    /// freshly initialized networks drawn from `seed`. The deformation
    /// layout always follows the scene.
    pub fn from_scene(bundle: &SceneBundle, config: ModelConfig, seed: u64) -> Self {
        let config = ModelConfig { deformation: bundle.deformation.config.clone(), ..config };
        let mut store = bundle.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = Heads::new(&mut store, &mut rng);
        let revnet = RevNet::new(&mut store, config.revnet_blocks, &mut rng);
        let phi_c = content_extractor(&mut store, &mut rng);
        let phi_s = StyleExtractor::new(&mut store, &mut rng);
        let predictor = TransformPredictor::new(&mut store, FEATURE_DIM, config.predictor_hidden, &mut rng);
        let cspn = Cspn::new(&mut store, config.cspn_iterations, &mut rng);
        let deformation = bundle.deformation.clone();
        Self {
            config,
            meta: bundle.meta.clone(),
            store,
            gaussians: bundle.gaussians,
            deformation,
            heads,
            revnet,
            phi_c,
            phi_s,
            predictor,
            cspn,
        }
    }

    /// A model with the right structure for `gaussians` Gaussians whose
    /// values are meant to be overwritten, e.g. by a checkpoint.
    pub fn skeleton(meta: SceneMeta, config: ModelConfig, gaussians: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blank = Gaussian4D {
            center: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            feature: [0.0; FEATURE_DIM],
        };
        let g = GaussianParams::register(&mut store, &vec![blank; gaussians]);
        let deformation = DeformationField::new(&mut store, config.deformation.clone(), meta.bounds, &mut rng);
        let heads = Heads::new(&mut store, &mut rng);
        let revnet = RevNet::new(&mut store, config.revnet_blocks, &mut rng);
        let phi_c = content_extractor(&mut store, &mut rng);
        let phi_s = StyleExtractor::new(&mut store, &mut rng);
        let predictor = TransformPredictor::new(&mut store, FEATURE_DIM, config.predictor_hidden, &mut rng);
        let cspn = Cspn::new(&mut store, config.cspn_iterations, &mut rng);
        Self { config, meta, store, gaussians: g, deformation, heads, revnet, phi_c, phi_s, predictor, cspn }
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussians.count(&self.store)
    }

    pub fn renderer(&self, mode: RasterMode) -> Renderer<'_> {
        Renderer { gaussians: &self.gaussians, deformation: Some(&self.deformation), heads: &self.heads, mode }
    }

    pub fn stage1_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, n, _)| is_stage1(n)).map(|(id, _, _)| id).collect()
    }

    pub fn stage2_ids(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, n, _)| !is_stage1(n)).map(|(id, _, _)| id).collect()
    }

    /// `ℛ_f` of an `[H, W, 3]` image, outside any tape.
    pub fn encode_image(&self, image: &Tensor) -> Tensor {
        let mut tape = Tape::with_trainable(|_| false);
        let x = tape.constant(image.clone());
        let y = self.revnet.rev_forward(&mut tape, &self.store, x).expect("finite image");
        tape.value(y).clone()
    }

    /// `R_rev` of an `[H, W, 32]` feature map (unclamped).
    pub fn decode_features(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::with_trainable(|_| false);
        let x = tape.constant(features.clone());
        let y = self.revnet.rev_inverse(&mut tape, &self.store, x);
        tape.value(y).clone()
    }

    /// Canonical per-Gaussian features `G_E`, `[N, 32]`.
    pub fn gaussian_features(&self) -> &Tensor {
        self.store.get(self.gaussians.feature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn skeleton_has_the_same_parameters() {
        let spec = SceneSpec { gaussians: 80, width: 32, height: 32, timesteps: 2, cameras: 2, ..SceneSpec::default() };
        let bundle = generate_scene(&spec, 4).unwrap();
        let m = Model::from_scene(&bundle, ModelConfig::default(), 1);
        let s = Model::skeleton(m.meta.clone(), m.config.clone(), 80);
        let names = |st: &ParamStore| {
            let mut v: Vec<(String, Vec<usize>)> =
                st.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
            v.sort();
            v
        };
        assert_eq!(names(&m.store), names(&s.store));
        assert_eq!(m.stage1_ids().len() + m.stage2_ids().len(), m.store.len());
        assert!(m.stage2_ids().iter().all(|&id| STAGE2_PREFIXES.iter().any(|p| m.store.name(id).starts_with(p))));
    }
}
