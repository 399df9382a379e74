use g4ds::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Procedural style `k`: stripes, checkers, rings or blobs (by `k % 4`) in a
/// random palette with shading and noise.
pub fn style_image(k: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
    let palette: Vec<[f64; 3]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    let freq = rng.random_range(3.0..12.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let blobs: Vec<([f64; 2], f64)> = (0..6)
        .map(|_| ([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)], rng.random_range(0.05..0.2)))
        .collect();
    let noise = Tensor::uniform([size, size], -0.08, 0.08, &mut rng);
    Tensor::from_fn([size, size, 3], |i| {
        let (y, x, c) = (i / (size * 3), i / 3 % size, i % 3);
        let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        let along = u * angle.cos() + v * angle.sin();
        let band = match k % 4 {
            0 => (along * freq).floor() as i64,
            1 => ((u * freq).floor() + (v * freq).floor()) as i64,
            2 => (((u - 0.5).hypot(v - 0.5)) * freq * 2.0).floor() as i64,
            _ => blobs.iter().filter(|(p, r)| (u - p[0]).hypot(v - p[1]) < *r).count() as i64,
        };
        let base = palette[band.rem_euclid(4) as usize][c];
        let shade = 0.15 * (along * freq * std::f64::consts::TAU).sin();
        (base + shade + noise.data()[y * size + x]).clamp(0.0, 1.0)
    })
}
