//! Training the transform predictors directly on covariance pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::optim::Adam;
use crate::wct::{closed_form_factors, covariance_gap, TransformPredictor, WctError};

/// Random SPD matrices `s · (I + εG)(I + εG)ᵀ` with `G` entries drawn from
/// `N(0, 1/d)`, `ε` uniform in `[0, max_perturbation]` and `ln s` uniform in
/// `[−ln max_scale, ln max_scale]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceFamily {
    pub dim: usize,
    pub max_perturbation: f64,
    pub max_scale: f64,
}

impl Default for CovarianceFamily {
    fn default() -> Self {
        Self { dim: 32, max_perturbation: 0.4, max_scale: 2.0 }
    }
}

impl CovarianceFamily {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let d = self.dim;
        let eps = rng.random_range(0.0..=self.max_perturbation);
        let ls = self.max_scale.ln();
        let s = rng.random_range(-ls..=ls).exp();
        let a = Tensor::eye(d).add(&Tensor::randn([d, d], eps / (d as f64).sqrt(), rng));
        a.matmul(&a.transpose()).scale(s)
    }

    pub fn pairs(&self, n: usize, seed: u64) -> Vec<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (self.sample(&mut rng), self.sample(&mut rng))).collect()
    }
}

/// Optimizer settings for [`train_on_covariances`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorTraining {
    pub steps: usize,
    /// Fresh pairs per step.
    pub batch: usize,
    /// Learning rate, decayed exponentially from `lr` to `lr_final`.
    pub lr: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for PredictorTraining {
    fn default() -> Self {
        Self { steps: 1500, batch: 64, lr: 1e-3, lr_final: 1e-4, seed: 0 }
    }
}

impl PredictorTraining {
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.saturating_sub(1).max(1) as f64;
        self.lr * (self.lr_final / self.lr).powf(frac)
    }
}

/// Trains `predictor` with Adam, each step on `batch` fresh pairs,
/// minimizing the covariance loss of `T_s T_c`. Returns the per-step loss.
pub fn train_on_covariances(
    store: &mut ParamStore,
    predictor: &TransformPredictor,
    family: &CovarianceFamily,
    cfg: &PredictorTraining,
) -> Vec<f64> {
    let (steps, batch) = (cfg.steps, cfg.batch.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = cfg.lr_at(step);
        let mut tape = Tape::with_trainable(|n| n.starts_with("mlp_c.") || n.starts_with("mlp_s."));
        let mut cc = Vec::with_capacity(batch);
        let mut cs = Vec::with_capacity(batch);
        for _ in 0..batch {
            cc.push(tape.constant(family.sample(&mut rng)));
            cs.push(tape.constant(family.sample(&mut rng)));
        }
        let t_c = predictor.whitening_batch(&mut tape, store, &cc);
        let t_s = predictor.coloring_batch(&mut tape, store, &cs);
        let mut total = tape.constant(Tensor::scalar(0.0));
        for i in 0..batch {
            let t = tape.matmul(t_s[i], t_c[i]);
            let l = crate::wct::tape_transformed_covariance_loss(&mut tape, t, cc[i], cs[i]);
            total = tape.add(total, l);
        }
        let total = tape.scale(total, 1.0 / batch as f64);
        losses.push(tape.value(total).item());
        let grads = tape.backward(total);
        for (id, g) in grads.param_grads() {
            opt.step(store, id, &g, lr);
        }
    }
    losses
}

fn pair_loss(
    tape: &mut Tape,
    store: &ParamStore,
    predictor: &TransformPredictor,
    cc: crate::tape::Var,
    cs: crate::tape::Var,
) -> crate::tape::Var {
    let t_c = predictor.whitening(tape, store, cc);
    let t_s = predictor.coloring(tape, store, cs);
    let t = tape.matmul(t_s, t_c);
    crate::wct::tape_transformed_covariance_loss(tape, t, cc, cs)
}

/// Mean losses on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorEval {
    pub predictor: f64,
    /// `T = I`.
    pub baseline: f64,
    pub closed_form: f64,
    /// Pairs where the predictor beat the closed form (should be none).
    pub below_closed_form: usize,
}

pub fn evaluate_on_covariances(
    store: &ParamStore,
    predictor: &TransformPredictor,
    pairs: &[(Tensor, Tensor)],
) -> Result<PredictorEval, WctError> {
    let mut e = PredictorEval { predictor: 0.0, baseline: 0.0, closed_form: 0.0, below_closed_form: 0 };
    for (cc, cs) in pairs {
        let mut tape = Tape::with_trainable(|_| false);
        let (a, b) = (tape.constant(cc.clone()), tape.constant(cs.clone()));
        let p = pair_loss(&mut tape, store, predictor, a, b);
        let p = tape.value(p).item();
        let (t_c, t_s) = closed_form_factors(cc, cs)?;
        let t = t_s.matmul(&t_c);
        let cf = covariance_gap(&t.matmul(cc).matmul(&t.transpose()), cs);
        e.predictor += p;
        e.closed_form += cf;
        e.baseline += covariance_gap(cc, cs);
        if p < cf {
            e.below_closed_form += 1;
        }
    }
    let n = pairs.len().max(1) as f64;
    e.predictor /= n;
    e.baseline /= n;
    e.closed_form /= n;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_predictor_equals_baseline() {
        let mut store = ParamStore::new();
        let p = TransformPredictor::new(&mut store, 4, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let fam = CovarianceFamily { dim: 4, ..CovarianceFamily::default() };
        let e = evaluate_on_covariances(&store, &p, &fam.pairs(5, 1)).unwrap();
        assert!((e.predictor - e.baseline).abs() < 1e-12);
        assert!(e.closed_form < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss_on_small_matrices() {
        let mut store = ParamStore::new();
        let p = TransformPredictor::new(&mut store, 4, 32, &mut ChaCha8Rng::seed_from_u64(0));
        let fam = CovarianceFamily { dim: 4, ..CovarianceFamily::default() };
        let cfg = PredictorTraining { steps: 300, batch: 4, lr: 1e-3, lr_final: 1e-3, seed: 3 };
        train_on_covariances(&mut store, &p, &fam, &cfg);
        let e = evaluate_on_covariances(&store, &p, &fam.pairs(20, 99)).unwrap();
        assert!(e.predictor < 0.5 * e.baseline, "{e:?}");
        assert_eq!(e.below_closed_form, 0);
    }
}
