//! Dynamic scene data model: cameras, canonical Gaussians, the deformation
//! field, the procedural generator and its analytic flow oracle.

pub mod analytic;
pub mod deform;
pub mod flow;
pub mod generate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vec3::{self, M3, V3};

pub use analytic::{AnalyticScene, Motion, Shape, Surface, Texture};
pub use deform::{DeformationConfig, DeformationField};
pub use flow::flow_oracle;
pub use generate::{generate_scene, render_ground_truth, MotionKind, SceneSpec};

pub const FEATURE_DIM: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("resolution {width}x{height} outside the supported 16..=512 range")]
    Resolution { width: usize, height: usize },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("views belong to different scenes ({0:016x} vs {1:016x})")]
    DifferentBundles(u64, u64),
    #[error("camera {0} does not exist")]
    NoCamera(usize),
    #[error("invalid camera: {0}")]
    Camera(String),
}

/// Pinhole camera in OpenCV convention (x right, y down, z forward);
/// `X_cam = R X_world + T`, pixel centers at integer + 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: M3,
    pub translation: V3,
}

impl Camera {
    /// Camera at `eye` looking at `target`, world `+y` up, square pixels.
    pub fn look_at(eye: V3, target: V3, focal: f64, width: usize, height: usize) -> Self {
        let f = vec3::normalize(vec3::sub(target, eye));
        let r = vec3::normalize(vec3::cross(f, [0.0, 1.0, 0.0]));
        let d = vec3::cross(f, r);
        let rotation = [r, d, f];
        let translation = vec3::scale(vec3::mat_vec(&rotation, eye), -1.0);
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::Camera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (vec3::dot(r[i], r[j]) - want).abs() > 1e-9 {
                    return Err(SceneError::Camera("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: V3) -> V3 {
        vec3::add(vec3::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> V3 {
        vec3::scale(vec3::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    /// Continuous pixel coordinates of a world point, if in front of the camera.
    pub fn project(&self, p: V3) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        (c[2] > 1e-9).then(|| [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy])
    }

    /// World-space unit ray through continuous pixel position `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (V3, V3) {
        let dc = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        (self.center(), vec3::normalize(vec3::mat_t_vec(&self.rotation, dc)))
    }
}

/// Canonical per-Gaussian parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian4D {
    pub center: V3,
    pub log_scale: V3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub feature: [f64; FEATURE_DIM],
}

/// A Gaussian after deformation at some timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGaussian {
    pub center: V3,
    pub log_scale: V3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub feature: [f64; FEATURE_DIM],
}

/// Handles to the stacked Gaussian tensors in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub center: ParamId,
    pub log_scale: ParamId,
    pub rotation: ParamId,
    pub opacity_logit: ParamId,
    pub feature: ParamId,
}

pub const GAUSSIAN_NAMES: [&str; 5] =
    ["gaussians.center", "gaussians.log_scale", "gaussians.rotation", "gaussians.opacity_logit", "gaussians.feature"];

impl GaussianParams {
    pub fn register(store: &mut ParamStore, gaussians: &[Gaussian4D]) -> Self {
        let n = gaussians.len();
        let flat = |f: &dyn Fn(&Gaussian4D) -> Vec<f64>| gaussians.iter().flat_map(f).collect::<Vec<_>>();
        Self {
            center: store.add(GAUSSIAN_NAMES[0], Tensor::new([n, 3], flat(&|g| g.center.to_vec()))),
            log_scale: store.add(GAUSSIAN_NAMES[1], Tensor::new([n, 3], flat(&|g| g.log_scale.to_vec()))),
            rotation: store.add(GAUSSIAN_NAMES[2], Tensor::new([n, 4], flat(&|g| g.rotation.to_vec()))),
            opacity_logit: store.add(GAUSSIAN_NAMES[3], Tensor::new([n], flat(&|g| vec![g.opacity_logit]))),
            feature: store.add(GAUSSIAN_NAMES[4], Tensor::new([n, FEATURE_DIM], flat(&|g| g.feature.to_vec()))),
        }
    }

    pub fn find(store: &ParamStore) -> Option<Self> {
        Some(Self {
            center: store.find(GAUSSIAN_NAMES[0])?,
            log_scale: store.find(GAUSSIAN_NAMES[1])?,
            rotation: store.find(GAUSSIAN_NAMES[2])?,
            opacity_logit: store.find(GAUSSIAN_NAMES[3])?,
            feature: store.find(GAUSSIAN_NAMES[4])?,
        })
    }

    pub fn count(&self, store: &ParamStore) -> usize {
        store.get(self.opacity_logit).numel()
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.center, self.log_scale, self.rotation, self.opacity_logit, self.feature]
    }

    pub fn get(&self, store: &ParamStore, i: usize) -> Gaussian4D {
        let row3 = |id| {
            let r = store.get(id).row(i);
            [r[0], r[1], r[2]]
        };
        let q = store.get(self.rotation).row(i);
        let mut feature = [0.0; FEATURE_DIM];
        feature.copy_from_slice(store.get(self.feature).row(i));
        Gaussian4D {
            center: row3(self.center),
            log_scale: row3(self.log_scale),
            rotation: [q[0], q[1], q[2], q[3]],
            opacity_logit: store.get(self.opacity_logit).data()[i],
            feature,
        }
    }

    /// Renormalizes every quaternion to unit length.
    pub fn renormalize_rotations(&self, store: &mut ParamStore) {
        for q in store.get_mut(self.rotation).data_mut().chunks_mut(4) {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|x| *x /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }
}

/// Deformed Gaussian tensors on a tape (`[N, 3]`, `[N, 3]`, `[N, 4]`, `[N]`, `[N, 32]`).
#[derive(Clone, Copy, Debug)]
pub struct DeformedVars {
    pub center: Var,
    pub log_scale: Var,
    pub rotation: Var,
    pub opacity_logit: Var,
    pub feature: Var,
}

impl DeformedVars {
    /// Canonical parameters with normalized rotations and no deformation.
    pub fn canonical(tape: &mut Tape, store: &ParamStore, g: &GaussianParams) -> Self {
        let rotation = tape.param(store, g.rotation);
        Self {
            center: tape.param(store, g.center),
            log_scale: tape.param(store, g.log_scale),
            rotation: tape.normalize_rows(rotation),
            opacity_logit: tape.param(store, g.opacity_logit),
            feature: tape.param(store, g.feature),
        }
    }

    /// Canonical parameters displaced by the deformation field at `t`.
    pub fn deformed(tape: &mut Tape, store: &ParamStore, g: &GaussianParams, field: &DeformationField, t: f64) -> Self {
        let center = tape.param(store, g.center);
        let log_scale = tape.param(store, g.log_scale);
        let rotation = tape.param(store, g.rotation);
        let d = field.forward(tape, store, center, t);
        let rotation = tape.add(rotation, d.rotation);
        Self {
            center: tape.add(center, d.center),
            log_scale: tape.add(log_scale, d.log_scale),
            rotation: tape.normalize_rows(rotation),
            opacity_logit: tape.param(store, g.opacity_logit),
            feature: tape.param(store, g.feature),
        }
    }

    pub fn to_vec(&self, tape: &Tape) -> Vec<DeformedGaussian> {
        let (c, s, r, o, f) = (
            tape.value(self.center),
            tape.value(self.log_scale),
            tape.value(self.rotation),
            tape.value(self.opacity_logit),
            tape.value(self.feature),
        );
        (0..o.numel())
            .map(|i| {
                let mut feature = [0.0; FEATURE_DIM];
                feature.copy_from_slice(f.row(i));
                let (cr, sr, rr) = (c.row(i), s.row(i), r.row(i));
                DeformedGaussian {
                    center: [cr[0], cr[1], cr[2]],
                    log_scale: [sr[0], sr[1], sr[2]],
                    rotation: [rr[0], rr[1], rr[2], rr[3]],
                    opacity_logit: o.data()[i],
                    feature,
                }
            })
            .collect()
    }
}

/// Identifies one (camera, time) view of a particular scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewRef {
    pub scene: u64,
    pub camera: usize,
    pub t: f64,
}

/// Everything about a scene except its trainable state and images: enough
/// to render ground truth and answer flow queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: u64,
    pub analytic: AnalyticScene,
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
    /// Axis-aligned bounds `[min, max]` of all surfaces over `t ∈ [0, 1]`.
    pub bounds: [V3; 2],
}

impl SceneMeta {
    pub fn view(&self, camera: usize, t: f64) -> ViewRef {
        ViewRef { scene: self.id, camera, t }
    }

    /// Camera held out from training: the middle of the ring.
    pub fn holdout_camera(&self) -> usize {
        self.cameras.len() / 2
    }

    pub fn training_cameras(&self) -> Vec<usize> {
        let h = self.holdout_camera();
        (0..self.cameras.len()).filter(|&c| c != h || self.cameras.len() == 1).collect()
    }
}

/// A generated scene: metadata, ground truth and the initial parameters.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub seed: u64,
    pub meta: SceneMeta,
    /// Ground truth indexed `camera * timestamps.len() + k`, `[H, W, 3]` in `[0, 1]`.
    pub ground_truth: Vec<Tensor>,
    pub params: ParamStore,
    pub gaussians: GaussianParams,
    pub deformation: DeformationField,
}

impl SceneBundle {
    pub fn image(&self, camera: usize, k: usize) -> &Tensor {
        &self.ground_truth[camera * self.meta.timestamps.len() + k]
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussians.count(&self.params)
    }
}

/// Deformed Gaussians of `scene` at time `t`.
pub fn deform(scene: &SceneBundle, t: f64) -> Vec<DeformedGaussian> {
    let mut tape = Tape::with_trainable(|_| false);
    let d = DeformedVars::deformed(&mut tape, &scene.params, &scene.gaussians, &scene.deformation, t);
    d.to_vec(&tape)
}
