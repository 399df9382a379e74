//! Linearized (EWA) projection of 3D Gaussians to screen-space splats.

use thiserror::Error;

use crate::scene::{Camera, DeformedGaussian};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const Z_NEAR: f64 = 0.01;
/// Added to both diagonal entries of every projected covariance (px²).
pub const COV_EPS: f64 = 0.3;
/// Chi-square quantile of the 99% mass ellipse in 2D.
const CHI2_99: f64 = 9.21;

/// Column layout of the `[N, 6]` splat tensor.
pub const MEAN_X: usize = 0;
pub const MEAN_Y: usize = 1;
pub const COV_XX: usize = 2;
pub const COV_XY: usize = 3;
pub const COV_YY: usize = 4;
pub const DEPTH: usize = 5;
pub const SPLAT_COLS: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("splat covariance is not invertible (det = {0})")]
    SingularCovariance(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub gaussian_index: usize,
}

impl Splat2D {
    pub fn from_row(row: &[f64], gaussian_index: usize) -> Self {
        Self {
            mean2d: [row[MEAN_X], row[MEAN_Y]],
            cov2d: [[row[COV_XX], row[COV_XY]], [row[COV_XY], row[COV_YY]]],
            depth: row[DEPTH],
            gaussian_index,
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        max_eigenvalue(self.cov2d[0][0], self.cov2d[0][1], self.cov2d[1][1])
    }
}

pub(crate) fn max_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mid = 0.5 * (a + c);
    mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

/// Whether a projected row survives culling: in front of the near plane and
/// with its 99% ellipse (bounded by the major-axis circle) touching the frame.
pub fn is_visible(row: &[f64], width: usize, height: usize) -> bool {
    if !(row[DEPTH] > Z_NEAR) || !row.iter().all(|v| v.is_finite()) {
        return false;
    }
    let r = (CHI2_99 * max_eigenvalue(row[COV_XX], row[COV_XY], row[COV_YY])).sqrt();
    let (x, y) = (row[MEAN_X], row[MEAN_Y]);
    x + r > 0.0 && x - r < width as f64 && y + r > 0.0 && y - r < height as f64
}

/// Projects `center[N, 3]`, `log_scale[N, 3]` and unit `rotation[N, 4]`
/// (`w, x, y, z`) into an `[N, 6]` splat tensor. Depth is clamped to
/// [`Z_NEAR`] inside the Jacobian so culled rows stay finite.
pub fn project_vars(tape: &mut Tape, center: Var, log_scale: Var, rotation: Var, cam: &Camera) -> Var {
    let n = tape.shape(center)[0];
    let r = cam.rotation;
    let rt = tape.constant(Tensor::new([3, 3], (0..9).map(|i| r[i % 3][i / 3]).collect()));
    let trans = tape.constant(Tensor::new([3], cam.translation.to_vec()));
    let pc = tape.matmul(center, rt);
    let pc = tape.add_row(pc, trans);
    let (x, y, z) = (tape.col(pc, 0), tape.col(pc, 1), tape.col(pc, 2));
    let zc = tape.clamp(z, Z_NEAR, f64::INFINITY);
    let ones = tape.constant(Tensor::full([n], 1.0));
    let iz = tape.div(ones, zc);
    let u = tape.mul(x, iz);
    let v = tape.mul(y, iz);
    let mx = tape.scale(u, cam.fx);
    let mx = tape.add_scalar(mx, cam.cx);
    let my = tape.scale(v, cam.fy);
    let my = tape.add_scalar(my, cam.cy);

    let rs = quat_to_matrix(tape, rotation);
    let s = tape.exp(log_scale);
    let mut rows0 = Vec::with_capacity(3);
    let mut rows1 = Vec::with_capacity(3);
    for j in 0..3 {
        // Column j of R_s diag(s), rotated into the camera frame.
        let sj = tape.col(s, j);
        let colj = tape.stack_cols(&[rs[j], rs[3 + j], rs[6 + j]]);
        let colj = tape.mul_col(colj, sj);
        let aj = tape.matmul(colj, rt);
        let (a0, a1, a2) = (tape.col(aj, 0), tape.col(aj, 1), tape.col(aj, 2));
        // J a with J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]].
        let ua2 = tape.mul(u, a2);
        let e0 = tape.sub(a0, ua2);
        let e0 = tape.mul(e0, iz);
        rows0.push(tape.scale(e0, cam.fx));
        let va2 = tape.mul(v, a2);
        let e1 = tape.sub(a1, va2);
        let e1 = tape.mul(e1, iz);
        rows1.push(tape.scale(e1, cam.fy));
    }
    let dot = |tape: &mut Tape, a: &[Var], b: &[Var]| {
        let mut acc = tape.mul(a[0], b[0]);
        for k in 1..3 {
            let t = tape.mul(a[k], b[k]);
            acc = tape.add(acc, t);
        }
        acc
    };
    let cxx = dot(tape, &rows0, &rows0);
    let cxx = tape.add_scalar(cxx, COV_EPS);
    let cxy = dot(tape, &rows0, &rows1);
    let cyy = dot(tape, &rows1, &rows1);
    let cyy = tape.add_scalar(cyy, COV_EPS);
    let depth = tape.detach(z);
    tape.stack_cols(&[mx, my, cxx, cxy, cyy, depth])
}

/// Row-major entries of the rotation matrix of each unit quaternion row.
fn quat_to_matrix(tape: &mut Tape, q: Var) -> Vec<Var> {
    let (w, x, y, z) = (tape.col(q, 0), tape.col(q, 1), tape.col(q, 2), tape.col(q, 3));
    let n = tape.shape(w)[0];
    let one = tape.constant(Tensor::full([n], 1.0));
    let mut prod = |a: Var, b: Var| tape.mul(a, b);
    let (xx, yy, zz) = (prod(x, x), prod(y, y), prod(z, z));
    let (xy, xz, yz) = (prod(x, y), prod(x, z), prod(y, z));
    let (wx, wy, wz) = (prod(w, x), prod(w, y), prod(w, z));
    let mut diag = |a: Var, b: Var| {
        let s = tape.add(a, b);
        let s = tape.scale(s, 2.0);
        tape.sub(one, s)
    };
    let (d0, d1, d2) = (diag(yy, zz), diag(xx, zz), diag(xx, yy));
    let mut off = |a: Var, b: Var, sign: f64| {
        let b = tape.scale(b, sign);
        let s = tape.add(a, b);
        tape.scale(s, 2.0)
    };
    vec![
        d0,
        off(xy, wz, -1.0),
        off(xz, wy, 1.0),
        off(xy, wz, 1.0),
        d1,
        off(yz, wx, -1.0),
        off(xz, wy, -1.0),
        off(yz, wx, 1.0),
        d2,
    ]
}

/// Projects a single Gaussian, `None` when culled.
pub fn project(g: &DeformedGaussian, cam: &Camera) -> Option<Splat2D> {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new([1, 3], g.center.to_vec()));
    let s = tape.constant(Tensor::new([1, 3], g.log_scale.to_vec()));
    let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = tape.constant(Tensor::new([1, 4], g.rotation.iter().map(|v| v / n).collect()));
    let out = project_vars(&mut tape, c, s, r, cam);
    let row = tape.value(out).row(0);
    is_visible(row, cam.width, cam.height).then(|| Splat2D::from_row(row, 0))
}

/// Inverse `(a, b, c)` of the symmetric matrix `[[a, b], [b, c]]` and its
/// determinant, if positive definite.
pub(crate) fn conic(cxx: f64, cxy: f64, cyy: f64) -> Option<([f64; 3], f64)> {
    let det = cxx * cyy - cxy * cxy;
    (det > 0.0 && det.is_finite()).then(|| ([cyy / det, -cxy / det, cxx / det], det))
}

/// `min(σ exp(−½ dᵀ Σ⁻¹ d), 0.999)`, zero below 1/255.
pub fn evaluate_alpha(s: &Splat2D, opacity: f64, p: [f64; 2]) -> Result<f64, RenderError> {
    let [[cxx, cxy], [_, cyy]] = s.cov2d;
    let ([a, b, c], _) = conic(cxx, cxy, cyy).ok_or(RenderError::SingularCovariance(cxx * cyy - cxy * cxy))?;
    let (dx, dy) = (p[0] - s.mean2d[0], p[1] - s.mean2d[1]);
    let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let alpha = (opacity * (-0.5 * m).exp()).min(super::raster::ALPHA_MAX);
    Ok(if alpha < super::raster::ALPHA_MIN { 0.0 } else { alpha })
}
