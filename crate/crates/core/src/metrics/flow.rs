//! Dense flow fields and backward warping.

/// Per-pixel displacement with a validity mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, dx: vec![0.0; n], dy: vec![0.0; n], valid: vec![false; n] }
    }

    pub fn zero(width: usize, height: usize) -> Self {
        Self { valid: vec![true; width * height], ..Self::invalid(width, height) }
    }

    pub fn set(&mut self, x: usize, y: usize, d: [f64; 2]) {
        let i = y * self.width + x;
        self.dx[i] = d[0] as f32;
        self.dy[i] = d[1] as f32;
        self.valid[i] = true;
    }

    pub fn get(&self, x: usize, y: usize) -> Option<[f32; 2]> {
        let i = y * self.width + x;
        self.valid[i].then(|| [self.dx[i], self.dy[i]])
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Bilinear flow at continuous position `(u, v)` (pixel centers at +0.5);
    /// `None` unless all four neighbors are valid.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let (corners, fx, fy) = bilinear_corners(u, v, self.width, self.height)?;
        let mut out = [0.0; 2];
        for (k, &i) in corners.iter().enumerate() {
            if !self.valid[i] {
                return None;
            }
            let w = corner_weight(k, fx, fy);
            out[0] += w * self.dx[i] as f64;
            out[1] += w * self.dy[i] as f64;
        }
        Some(out)
    }
}

/// Indices of the four pixels around continuous position `(u, v)` and the
/// fractional offsets, or `None` if any neighbor lies outside the frame.
pub(crate) fn bilinear_corners(u: f64, v: f64, w: usize, h: usize) -> Option<([usize; 4], f64, f64)> {
    let (x, y) = (u - 0.5, v - 0.5);
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    // A neighbor with zero weight may sit just outside the frame.
    let x1 = if fx == 0.0 { x0 } else { x0 + 1 };
    let y1 = if fy == 0.0 { y0 } else { y0 + 1 };
    if x0 < 0 || y0 < 0 || x1 >= w as i64 || y1 >= h as i64 {
        return None;
    }
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    Some(([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], fx, fy))
}

#[inline]
pub(crate) fn corner_weight(k: usize, fx: f64, fy: f64) -> f64 {
    match k {
        0 => (1.0 - fx) * (1.0 - fy),
        1 => fx * (1.0 - fy),
        2 => (1.0 - fx) * fy,
        _ => fx * fy,
    }
}
