//! Procedural scene generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::scene::analytic::{AnalyticScene, Motion, Shape, Surface, Texture};
use crate::scene::deform::{DeformationConfig, DeformationField};
use crate::scene::{Camera, Gaussian4D, GaussianParams, SceneBundle, SceneError, SceneMeta, FEATURE_DIM};
use crate::tensor::Tensor;
use crate::vec3::{self, V3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Linear,
    Orbital,
}

/// Procedural scene parameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub spheres: usize,
    /// Adds a textured rectangle behind the spheres.
    pub backdrop: bool,
    pub motion: MotionKind,
    /// World units per unit time (linear) or arc speed (orbital).
    pub speed: f64,
    pub cameras: usize,
    /// Total angle spanned by the camera arc.
    pub arc_degrees: f64,
    pub camera_distance: f64,
    /// Focal length in units of image width.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    pub gaussians: usize,
    pub background: V3,
    pub supersample: usize,
    pub deformation: DeformationConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            spheres: 3,
            backdrop: false,
            motion: MotionKind::Linear,
            speed: 0.3,
            cameras: 6,
            arc_degrees: 40.0,
            camera_distance: 4.0,
            focal: 1.1,
            width: 64,
            height: 64,
            timesteps: 8,
            gaussians: 2000,
            background: [0.08, 0.08, 0.1],
            supersample: 3,
            deformation: DeformationConfig::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ok = |n: usize| (16..=512).contains(&n);
        if !ok(self.width) || !ok(self.height) {
            return Err(SceneError::Resolution { width: self.width, height: self.height });
        }
        let fail = |m: &str| Err(SceneError::Spec(m.to_string()));
        if self.cameras == 0 {
            return fail("at least one camera is required");
        }
        if self.timesteps == 0 {
            return fail("at least one timestep is required");
        }
        if self.spheres == 0 && !self.backdrop {
            return fail("scene has no surfaces");
        }
        if self.supersample == 0 {
            return fail("supersample must be positive");
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0 && self.speed >= 0.0) {
            return fail("focal, camera_distance must be positive and speed non-negative");
        }
        if self.deformation.resolutions.is_empty() || self.deformation.resolutions.iter().any(|&r| r == 0) {
            return fail("deformation resolutions must be positive");
        }
        Ok(())
    }

    /// Stable 64-bit identifier of `(spec, seed)`.
    pub fn scene_id(&self, seed: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(seed.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let mut t = Texture { base: [0.0; 3], amplitude: [0.0; 3], frequency: [0.0; 3], phase: [0.0; 3] };
    for k in 0..3 {
        t.base[k] = rng.random_range(0.3..0.7);
        t.amplitude[k] = rng.random_range(0.1..0.25);
        t.frequency[k] = rng.random_range(3.0..7.0);
        t.phase[k] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    t
}

fn build_surfaces(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let mut surfaces: Vec<Surface> = Vec::new();
    let mut attempts = 0;
    while surfaces.len() < spec.spheres {
        attempts += 1;
        let radius = rng.random_range(0.3..0.5);
        let anchor: V3 = [rng.random_range(-0.9..0.9), rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4)];
        let motion = match spec.motion {
            MotionKind::Static => Motion::Static,
            MotionKind::Linear => {
                let dir = vec3::normalize([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ]);
                Motion::Linear { velocity: vec3::scale(dir, spec.speed) }
            }
            MotionKind::Orbital => {
                let r = (anchor[0] * anchor[0] + anchor[2] * anchor[2]).sqrt().max(0.2);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Motion::Orbital { pivot: [0.0, anchor[1], 0.0], angular_speed: sign * spec.speed / r }
            }
        };
        let cand = Surface { shape: Shape::Sphere { radius }, anchor, motion, texture: random_texture(rng) };
        // Keep spheres apart over the whole time range (relaxed if crowded).
        let margin = if attempts < 500 { 0.05 } else { -1.0 };
        let clear = surfaces.iter().all(|s| {
            let Shape::Sphere { radius: r2 } = s.shape else { return true };
            (0..=16).all(|k| {
                let t = k as f64 / 16.0;
                vec3::norm(vec3::sub(cand.position(t), s.position(t))) > radius + r2 + margin
            })
        });
        if clear {
            surfaces.push(cand);
        }
    }
    if spec.backdrop {
        surfaces.push(Surface {
            shape: Shape::Rect { half_width: 3.0, half_height: 2.5 },
            anchor: [0.0, 0.0, 1.2],
            motion: Motion::Static,
            texture: random_texture(rng),
        });
    }
    surfaces
}

fn ring_cameras(spec: &SceneSpec) -> Vec<Camera> {
    let n = spec.cameras;
    (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let theta = (frac - 0.5) * spec.arc_degrees.to_radians();
            let eye = [spec.camera_distance * theta.sin(), -0.3, -spec.camera_distance * theta.cos()];
            Camera::look_at(eye, [0.0; 3], spec.focal * spec.width as f64, spec.width, spec.height)
        })
        .collect()
}

/// Uniform sample on a surface at time `t`, as a world point.
fn sample_surface(s: &Surface, t: f64, rng: &mut ChaCha8Rng) -> V3 {
    let c = s.position(t);
    match s.shape {
        Shape::Sphere { radius } => {
            let g: V3 = std::array::from_fn(|_| StandardNormal.sample(rng));
            vec3::add(c, vec3::scale(vec3::normalize(g), radius))
        }
        Shape::Rect { half_width, half_height } => {
            vec3::add(c, [rng.random_range(-half_width..half_width), rng.random_range(-half_height..half_height), 0.0])
        }
    }
}

fn initial_gaussians(scene: &AnalyticScene, count: usize, t: f64, rng: &mut ChaCha8Rng) -> Vec<Gaussian4D> {
    let total: f64 = scene.surfaces.iter().map(Surface::area).sum();
    let mut out = Vec::with_capacity(count);
    let mut assigned = 0;
    for (i, s) in scene.surfaces.iter().enumerate() {
        let n = if i + 1 == scene.surfaces.len() {
            count - assigned
        } else {
            ((count as f64) * s.area() / total).round() as usize
        };
        assigned += n;
        let spacing = (s.area() / n.max(1) as f64).sqrt();
        for _ in 0..n {
            let p = sample_surface(s, t, rng);
            let color = s.texture.color(vec3::sub(p, s.position(t)));
            let mut feature = [0.0; FEATURE_DIM];
            for (k, f) in feature.iter_mut().enumerate() {
                *f = if k < 3 {
                    color[k]
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    0.05 * z
                };
            }
            out.push(Gaussian4D {
                center: p,
                log_scale: [(0.6 * spacing).ln(); 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: 0.4,
                feature,
            });
        }
    }
    out
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// 8-bit ground truth of every view, indexed `camera * timestamps + k`.
pub fn render_ground_truth(meta: &SceneMeta, supersample: usize) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(meta.cameras.len() * meta.timestamps.len());
    for cam in &meta.cameras {
        for &t in &meta.timestamps {
            out.push(meta.analytic.render(cam, t, supersample).map(quantize));
        }
    }
    out
}

/// Builds a scene deterministically from `(spec, seed)`. Ground truth is
/// ray cast from the analytic surfaces and quantized to 8 bits.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneBundle, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = AnalyticScene { surfaces: build_surfaces(spec, &mut rng), background: spec.background };
    let cameras = ring_cameras(spec);
    let timestamps: Vec<f64> = if spec.timesteps == 1 {
        vec![0.0]
    } else {
        (0..spec.timesteps).map(|k| k as f64 / (spec.timesteps - 1) as f64).collect()
    };
    let [mut lo, mut hi] = analytic.bounds();
    for k in 0..3 {
        let pad = 0.1 * (hi[k] - lo[k]).max(0.5);
        lo[k] -= pad;
        hi[k] += pad;
    }
    let meta = SceneMeta { id: spec.scene_id(seed), analytic, cameras, timestamps, bounds: [lo, hi] };

    let ground_truth = render_ground_truth(&meta, spec.supersample);

    let canonical_t = 0.5 * (meta.timestamps[0] + meta.timestamps[meta.timestamps.len() - 1]);
    let gs = initial_gaussians(&meta.analytic, spec.gaussians, canonical_t, &mut rng);
    let mut params = ParamStore::new();
    let gaussians = GaussianParams::register(&mut params, &gs);
    let deformation = DeformationField::new(&mut params, spec.deformation.clone(), meta.bounds, &mut rng);
    Ok(SceneBundle { spec: spec.clone(), seed, meta, ground_truth, params, gaussians, deformation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { width: 24, height: 20, cameras: 3, timesteps: 3, gaussians: 200, ..SceneSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&small(), 7).unwrap();
        let b = generate_scene(&small(), 7).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.params, b.params);
        let c = generate_scene(&small(), 8).unwrap();
        assert_ne!(a.meta.id, c.meta.id);
    }

    #[test]
    fn static_scene_has_constant_ground_truth() {
        let spec = SceneSpec { speed: 0.0, ..small() };
        let s = generate_scene(&spec, 1).unwrap();
        for cam in 0..3 {
            for k in 1..3 {
                assert_eq!(s.image(cam, k), s.image(cam, 0));
            }
        }
    }

    #[test]
    fn rejects_bad_resolution() {
        let spec = SceneSpec { width: 8, ..small() };
        assert!(matches!(generate_scene(&spec, 0), Err(SceneError::Resolution { .. })));
        let spec = SceneSpec { height: 513, ..small() };
        assert!(matches!(generate_scene(&spec, 0), Err(SceneError::Resolution { .. })));
    }

    #[test]
    fn invariants_hold() {
        let s = generate_scene(&small(), 3).unwrap();
        assert!(s.meta.timestamps.windows(2).all(|w| w[0] < w[1]));
        for (i, img) in s.ground_truth.iter().enumerate() {
            let cam = &s.meta.cameras[i / 3];
            assert_eq!(img.shape(), &[cam.height, cam.width, 3]);
            cam.validate().unwrap();
        }
        assert_eq!(s.gaussian_count(), 200);
        // The objects are visible: not every pixel is background.
        let bg = s.spec.background.map(quantize);
        let img = s.image(1, 0);
        assert!(img.data().chunks(3).any(|p| p != bg));
    }
}
