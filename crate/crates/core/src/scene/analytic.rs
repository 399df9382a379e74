//! Analytic oracle scene: rigidly translating textured spheres and
//! fronto-parallel rectangles over a constant background, rendered by ray
//! casting. Surfaces are unlit, so a surface point keeps its color as it
//! moves, which is what makes warped-color comparisons meaningful.

use serde::{Deserialize, Serialize};

use crate::scene::Camera;
use crate::tensor::Tensor;
use crate::vec3::{self, V3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned rectangle in the plane `z = anchor.z`.
    Rect {
        half_width: f64,
        half_height: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    Linear {
        velocity: V3,
    },
    /// Revolution about the vertical axis through `pivot`, `angular_speed`
    /// radians per unit time. The object translates along the circle
    /// without spinning.
    Orbital {
        pivot: V3,
        angular_speed: f64,
    },
}

/// Per-channel `base + amplitude · sin(frequency · (ℓ · axis_c) + phase)`
/// evaluated at the object-local offset `ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: V3,
    pub amplitude: V3,
    pub frequency: V3,
    pub phase: V3,
}

const TEXTURE_AXES: [V3; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.577_350_269_189_625_8; 3]];

impl Texture {
    pub fn color(&self, local: V3) -> V3 {
        let mut c = [0.0; 3];
        for k in 0..3 {
            let s = (self.frequency[k] * vec3::dot(local, TEXTURE_AXES[k]) + self.phase[k]).sin();
            c[k] = (self.base[k] + self.amplitude[k] * s).clamp(0.0, 1.0);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub shape: Shape,
    /// Position at `t = 0`.
    pub anchor: V3,
    pub motion: Motion,
    pub texture: Texture,
}

impl Surface {
    pub fn position(&self, t: f64) -> V3 {
        match &self.motion {
            Motion::Static => self.anchor,
            Motion::Linear { velocity } => vec3::add(self.anchor, vec3::scale(*velocity, t)),
            Motion::Orbital { pivot, angular_speed } => {
                let r = vec3::rot_y(angular_speed * t);
                vec3::add(*pivot, vec3::mat_vec(&r, vec3::sub(self.anchor, *pivot)))
            }
        }
    }

    /// Nearest ray parameter `s > 0` of `origin + s·dir` hitting the surface at `t`.
    pub fn intersect(&self, origin: V3, dir: V3, t: f64) -> Option<f64> {
        let c = self.position(t);
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = vec3::sub(origin, c);
                let b = vec3::dot(dir, oc);
                let disc = b * b - (vec3::dot(oc, oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|&s| s > 1e-9)
            }
            Shape::Rect { half_width, half_height } => {
                if dir[2].abs() < 1e-12 {
                    return None;
                }
                let s = (c[2] - origin[2]) / dir[2];
                if s <= 1e-9 {
                    return None;
                }
                let p = vec3::add(origin, vec3::scale(dir, s));
                ((p[0] - c[0]).abs() <= half_width && (p[1] - c[1]).abs() <= half_height).then_some(s)
            }
        }
    }

    /// Surface area, used to distribute initial Gaussians.
    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Rect { half_width, half_height } => 4.0 * half_width * half_height,
        }
    }

    /// Axis-aligned half extent around the position.
    pub fn half_extent(&self) -> V3 {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Rect { half_width, half_height } => [half_width, half_height, 0.0],
        }
    }
}

/// First intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub surface: usize,
    pub distance: f64,
    /// Hit point relative to the surface position at the query time.
    pub local: V3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub surfaces: Vec<Surface>,
    pub background: V3,
}

impl AnalyticScene {
    pub fn trace(&self, origin: V3, dir: V3, t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some(d) = s.intersect(origin, dir, t) {
                if best.is_none_or(|b| d < b.distance) {
                    let p = vec3::add(origin, vec3::scale(dir, d));
                    best = Some(Hit { surface: i, distance: d, local: vec3::sub(p, s.position(t)) });
                }
            }
        }
        best
    }

    pub fn shade(&self, hit: Option<Hit>) -> V3 {
        match hit {
            Some(h) => self.surfaces[h.surface].texture.color(h.local),
            None => self.background,
        }
    }

    /// Ray-cast image with `ss × ss` supersampling per pixel, `[H, W, 3]`.
    pub fn render(&self, cam: &Camera, t: f64, ss: usize) -> Tensor {
        let (w, h) = (cam.width, cam.height);
        let mut out = vec![0.0; w * h * 3];
        let inv = 1.0 / (ss * ss) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let (o, d) = cam.ray(u, v);
                        acc = vec3::add(acc, self.shade(self.trace(o, d, t)));
                    }
                }
                out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&vec3::scale(acc, inv));
            }
        }
        Tensor::new([h, w, 3], out)
    }

    /// Bounds `[min, max]` of all surfaces over `t ∈ [0, 1]`, sampled densely.
    pub fn bounds(&self) -> [V3; 2] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.surfaces {
            let e = s.half_extent();
            for k in 0..=64 {
                let p = s.position(k as f64 / 64.0);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a] - e[a]);
                    hi[a] = hi[a].max(p[a] + e[a]);
                }
            }
        }
        if self.surfaces.is_empty() {
            return [[-1.0; 3], [1.0; 3]];
        }
        [lo, hi]
    }
}
