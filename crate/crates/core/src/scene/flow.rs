//! Exact correspondences between two views of an analytic scene.

use crate::metrics::FlowField;
use crate::scene::{SceneError, SceneMeta, ViewRef};
use crate::vec3;

/// Flow from `from` to `to`: for every pixel of `from`, the displacement
/// `p_to - p_from` of the visible surface point (pixel centers at +0.5).
/// Pixels are invalid on background, when the point leaves the target frame,
/// or when it is hidden in the target view.
pub fn flow_oracle(meta: &SceneMeta, from: ViewRef, to: ViewRef) -> Result<FlowField, SceneError> {
    for v in [from, to] {
        if v.scene != meta.id {
            return Err(SceneError::DifferentBundles(v.scene, meta.id));
        }
        if v.camera >= meta.cameras.len() {
            return Err(SceneError::NoCamera(v.camera));
        }
    }
    let (ca, cb) = (&meta.cameras[from.camera], &meta.cameras[to.camera]);
    let (w, h) = (ca.width, ca.height);
    let mut flow = FlowField::invalid(w, h);
    let scene = &meta.analytic;
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let (o, d) = ca.ray(p[0], p[1]);
            let Some(hit) = scene.trace(o, d, from.t) else { continue };
            let world = vec3::add(scene.surfaces[hit.surface].position(to.t), hit.local);
            let Some(q) = cb.project(world) else { continue };
            if q[0] < 0.0 || q[1] < 0.0 || q[0] >= cb.width as f64 || q[1] >= cb.height as f64 {
                continue;
            }
            let (ob, db) = cb.ray(q[0], q[1]);
            let expected = vec3::norm(vec3::sub(world, ob));
            let visible = scene.trace(ob, db, to.t).is_some_and(|hb| {
                hb.surface == hit.surface && (hb.distance - expected).abs() <= 1e-6 * (1.0 + expected)
            });
            if visible {
                flow.set(x, y, [q[0] - p[0], q[1] - p[1]]);
            }
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::analytic::{AnalyticScene, Motion, Shape, Surface, Texture};
    use crate::scene::generate::{generate_scene, SceneSpec};
    use crate::scene::Camera;
    use crate::vec3::identity;

    fn texture() -> Texture {
        Texture { base: [0.5; 3], amplitude: [0.2; 3], frequency: [4.0; 3], phase: [0.0; 3] }
    }

    #[test]
    fn identity_view_has_zero_flow() {
        let s = generate_scene(
            &SceneSpec {
                width: 32,
                height: 32,
                cameras: 2,
                timesteps: 2,
                gaussians: 10,
                backdrop: true,
                ..SceneSpec::default()
            },
            0,
        )
        .unwrap();
        let v = s.meta.view(1, 0.0);
        let f = flow_oracle(&s.meta, v, v).unwrap();
        let cam = &s.meta.cameras[1];
        for y in 0..32 {
            for x in 0..32 {
                let (o, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                let hit = s.meta.analytic.trace(o, d, 0.0).is_some();
                assert_eq!(f.get(x, y).is_some(), hit, "pixel ({x}, {y})");
            }
        }
        assert!(f.valid_fraction() > 0.5);
        assert!(f.dx.iter().chain(&f.dy).all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn stereo_disparity_on_fronto_parallel_plane() {
        let (fx, baseline, depth) = (40.0, 0.2, 5.0);
        let cam = |x: f64| Camera {
            fx,
            fy: fx,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            rotation: identity(),
            translation: [-x, 0.0, 0.0],
        };
        let meta = SceneMeta {
            id: 1,
            analytic: AnalyticScene {
                surfaces: vec![Surface {
                    shape: Shape::Rect { half_width: 50.0, half_height: 50.0 },
                    anchor: [0.0, 0.0, depth],
                    motion: Motion::Static,
                    texture: texture(),
                }],
                background: [0.0; 3],
            },
            cameras: vec![cam(0.0), cam(baseline)],
            timestamps: vec![0.0],
            bounds: [[-1.0; 3], [1.0; 3]],
        };
        let f = flow_oracle(&meta, meta.view(0, 0.0), meta.view(1, 0.0)).unwrap();
        let expect = -fx * baseline / depth;
        let mut n = 0;
        for i in 0..32 * 32 {
            if f.valid[i] {
                n += 1;
                assert!((f.dx[i] as f64 - expect).abs() < 1e-4);
                assert!(f.dy[i].abs() < 1e-4);
            }
        }
        // Only the columns shifted out of frame are invalid.
        assert_eq!(n, 32 * (32 - 2));
    }

    #[test]
    fn moving_sphere_flow_matches_projected_velocity() {
        let cam = Camera {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            rotation: identity(),
            translation: [0.0; 3],
        };
        let v = [0.3, -0.1, 0.0];
        let meta = SceneMeta {
            id: 2,
            analytic: AnalyticScene {
                surfaces: vec![Surface {
                    shape: Shape::Sphere { radius: 0.5 },
                    anchor: [0.0, 0.0, 4.0],
                    motion: Motion::Linear { velocity: v },
                    texture: texture(),
                }],
                background: [0.0; 3],
            },
            cameras: vec![cam.clone()],
            timestamps: vec![0.0, 0.25],
            bounds: [[-1.0; 3], [1.0; 3]],
        };
        let f = flow_oracle(&meta, meta.view(0, 0.0), meta.view(0, 0.25)).unwrap();
        // Surface points move with the sphere; at the front pole (depth 3.5)
        // the image displacement is fx * v * dt / z.
        let i = 31 * 64 + 31;
        assert!(f.valid[i]);
        let p0 = cam.project([0.0, 0.0, 3.5]).unwrap();
        let p1 = cam.project([0.3 * 0.25, -0.1 * 0.25, 3.5]).unwrap();
        assert!((f.dx[i] as f64 - (p1[0] - p0[0])).abs() < 0.05);
        assert!((f.dy[i] as f64 - (p1[1] - p0[1])).abs() < 0.05);
        assert!(!f.valid[0], "background is invalid");
    }

    #[test]
    fn round_trip_returns_to_origin() {
        let spec = SceneSpec {
            width: 48,
            height: 48,
            cameras: 4,
            timesteps: 4,
            gaussians: 10,
            spheres: 2,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, 5).unwrap();
        let (a, b) = (s.meta.view(0, s.meta.timestamps[1]), s.meta.view(1, s.meta.timestamps[2]));
        let fab = flow_oracle(&s.meta, a, b).unwrap();
        let fba = flow_oracle(&s.meta, b, a).unwrap();
        let mut checked = 0;
        for y in 0..48 {
            for x in 0..48 {
                let Some(d) = fab.get(x, y) else { continue };
                let q = [x as f64 + 0.5 + d[0] as f64, y as f64 + 0.5 + d[1] as f64];
                let Some(back) = fba.sample(q[0], q[1]) else { continue };
                let err =
                    ((q[0] + back[0] - x as f64 - 0.5).powi(2) + (q[1] + back[1] - y as f64 - 0.5).powi(2)).sqrt();
                assert!(err < 0.5, "pixel ({x},{y}) returns {err} px away");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn views_from_other_scenes_are_rejected() {
        let s = generate_scene(
            &SceneSpec { width: 16, height: 16, cameras: 1, timesteps: 1, gaussians: 4, ..SceneSpec::default() },
            0,
        )
        .unwrap();
        let foreign = ViewRef { scene: s.meta.id ^ 1, camera: 0, t: 0.0 };
        assert!(matches!(flow_oracle(&s.meta, foreign, s.meta.view(0, 0.0)), Err(SceneError::DifferentBundles(..))));
    }
}
