//! Frozen random convolutional pyramid used by the content, style and
//! propagation losses and by the feature-distance metric.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::nets::layers::{ConvGeom, FixedConv};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ENCODER_SEED: u64 = 0x5EED;
pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    stages: Vec<FixedConv>,
}

impl Default for FrozenEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrozenEncoder {
    /// Three stride-2 3×3 convolutions (3→16→32→64) with He-normal weights
    /// drawn from a ChaCha8 stream seeded with [`ENCODER_SEED`].
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let mut cin = 3;
        let stages = STAGE_WIDTHS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let weight = Tensor::randn([3, 3, cin, cout], std, &mut rng);
                cin = cout;
                FixedConv { weight, bias: Tensor::zeros([cout]), geom: ConvGeom::down3() }
            })
            .collect();
        Self { stages }
    }

    /// Post-ReLU activations of each stage for an `[H, W, 3]` image.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut x = image;
        self.stages
            .iter()
            .map(|s| {
                let y = s.forward(tape, x);
                x = tape.relu(y);
                x
            })
            .collect()
    }

    pub fn features(&self, image: &Tensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let outs = self.forward(&mut tape, x);
        outs.into_iter().map(|v| tape.value(v).clone()).collect()
    }

    /// SHA-256 over the little-endian bytes of every weight and bias.
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stages {
            for v in s.weight.data().iter().chain(s.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_reproducible() {
        let a = FrozenEncoder::new();
        assert_eq!(a, FrozenEncoder::new());
        assert_eq!(a.weight_digest(), FROZEN_DIGEST);
    }

    const FROZEN_DIGEST: &str = "a2c493344c3acb784f04fd59cb102b6d77d9909e59e73af2c7f7be568931e780";

    #[test]
    fn stage_shapes() {
        let enc = FrozenEncoder::new();
        let f = enc.features(&Tensor::zeros([64, 64, 3]));
        let shapes: Vec<_> = f.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 16], vec![16, 16, 32], vec![8, 8, 64]]);
    }
}
