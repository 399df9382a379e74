//! Content and style feature extractors feeding the transform predictors.

use rand::Rng;
use thiserror::Error;

use crate::nets::layers::{Conv2d, ConvGeom, Init, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const MIN_STYLE_SIZE: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractorError {
    #[error("style input is {height}x{width}, smaller than the {MIN_STYLE_SIZE}x{MIN_STYLE_SIZE} minimum")]
    TooSmall { width: usize, height: usize },
}

/// `Φ_c`: residual per-Gaussian MLP 32→64→32, identity at initialization.
pub fn content_extractor<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Mlp {
    Mlp::new(store, "phi_c", (32, 64, 32), true, rng)
}

/// `Φ_s`: three 32→32 convolutions with strides 2, 2, 1.
#[derive(Clone, Debug)]
pub struct StyleExtractor {
    convs: Vec<Conv2d>,
}

impl StyleExtractor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Self {
        let geoms = [ConvGeom::down3(), ConvGeom::down3(), ConvGeom::same3()];
        let convs = geoms
            .iter()
            .enumerate()
            .map(|(i, &g)| Conv2d::new(store, &format!("phi_s.conv{i}"), 32, 32, g, Init::He, rng))
            .collect();
        Self { convs }
    }

    /// `[H, W, 32] -> [H'·W', 32]` sample rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ExtractorError> {
        let s = tape.shape(x);
        let (height, width) = (s[0], s[1]);
        if height < MIN_STYLE_SIZE || width < MIN_STYLE_SIZE {
            return Err(ExtractorError::TooSmall { width, height });
        }
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, store, h);
            if i + 1 < self.convs.len() {
                h = tape.relu(h);
            }
        }
        let n = tape.value(h).rows();
        Ok(tape.reshape(h, &[n, 32]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_output_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let phi = StyleExtractor::new(&mut store, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([64, 64, 32]));
        let y = phi.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[256, 32]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_small_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let phi = StyleExtractor::new(&mut store, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([63, 80, 32]));
        assert_eq!(phi.forward(&mut tape, &store, x).unwrap_err(), ExtractorError::TooSmall { width: 80, height: 63 });
    }

    #[test]
    fn shift_by_stride_shifts_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let phi = StyleExtractor::new(&mut store, &mut rng);
        let base = Tensor::randn([72, 64, 32], 1.0, &mut rng);
        // Shift down by 4 rows (one output row after two stride-2 layers).
        let shifted = Tensor::from_fn([68, 64, 32], |i| base.data()[i + 4 * 64 * 32]);
        let crop = Tensor::from_fn([68, 64, 32], |i| base.data()[i]);
        let mut tape = Tape::new();
        let a = tape.constant(crop);
        let b = tape.constant(shifted);
        let ya = phi.forward(&mut tape, &store, a).unwrap();
        let yb = phi.forward(&mut tape, &store, b).unwrap();
        let (ya, yb) = (tape.value(ya).clone(), tape.value(yb).clone());
        let (ho, wo) = (17, 16);
        let mut worst = 0.0f64;
        for y in 2..ho - 3 {
            for x in 2..wo - 2 {
                for c in 0..32 {
                    let va = ya.data()[((y + 1) * wo + x) * 32 + c];
                    let vb = yb.data()[(y * wo + x) * 32 + c];
                    worst = worst.max((va - vb).abs());
                }
            }
        }
        assert!(worst < 1e-12, "interior mismatch {worst}");
    }

    #[test]
    fn content_extractor_is_row_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let phi = content_extractor(&mut store, &mut rng);
        let g = Tensor::randn([70, 32], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(g.clone());
        let y = phi.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y), &g);
    }
}
