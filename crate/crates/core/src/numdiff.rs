//! Central finite differences against tape gradients.
//!
//! Every check reduces the output to a scalar with a fixed random projection
//! `L = Σ w ⊙ y`, so all output entries contribute to the compared gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `max` over inputs of `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` on the sampled entries.
    pub max_rel_error: f64,
    pub entries: usize,
    /// Entries dropped because the function is not smooth within one step
    /// (e.g. a ReLU kink or a compositing threshold crossed by the probe).
    pub skipped: usize,
}

impl GradCheck {
    /// Error below `tol` with at most a quarter of the entries skipped.
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol && 4 * self.skipped <= self.entries
    }
}

/// Central difference of `f` at step [`STEP`], or `None` when it disagrees
/// with the half-step difference by more than smooth truncation and
/// rounding allow.
fn central(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let (p1, m1) = (f(STEP), f(-STEP));
    let (p2, m2) = (f(0.5 * STEP), f(-0.5 * STEP));
    let c1 = (p1 - m1) / (2.0 * STEP);
    let c2 = (p2 - m2) / STEP;
    let scale = p1.abs().max(m1.abs()).max(p2.abs()).max(m2.abs());
    let tol = 1e-6 * c1.abs().max(c2.abs()) + 1e-12 * scale / STEP;
    ((c1 - c2).abs() <= tol).then_some(c1)
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Var {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv);
    tape.sum(p)
}

/// At most `max` coordinates, taken from the nonzero entries of `analytic`
/// first so that sparse gradients are still exercised.
fn picks(analytic: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = analytic.len();
    if n <= max {
        return (0..n).collect();
    }
    let nonzero: Vec<usize> = (0..n).filter(|&i| analytic[i] != 0.0).collect();
    let mut v: Vec<usize> = if nonzero.len() >= max {
        sample(rng, nonzero.len(), max).into_iter().map(|k| nonzero[k]).collect()
    } else {
        let zero: Vec<usize> = (0..n).filter(|&i| analytic[i] == 0.0).collect();
        let fill = sample(rng, zero.len(), (max - nonzero.len()).min(zero.len())).into_iter().map(|k| zero[k]);
        nonzero.iter().copied().chain(fill).collect()
    };
    v.sort_unstable();
    v
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks `build` with respect to each tensor in `inputs`, sampling at most
/// `max_entries` coordinates per input.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    max_entries: usize,
    seed: u64,
) -> GradCheck {
    let eval = |vals: &[Tensor], grads: bool| -> (f64, Vec<Tensor>, Vec<usize>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            vals.iter().map(|t| if grads { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }).collect();
        let y = build(&mut tape, &vars);
        let shape = tape.shape(y).to_vec();
        let w = projection(&shape, seed);
        let l = project(&mut tape, y, &w);
        let value = tape.value(l).item();
        if !grads {
            return (value, Vec::new(), shape);
        }
        let g = tape.backward(l);
        let gs = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (value, gs, shape)
    };
    let (_, analytic, _) = eval(inputs, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut entries, mut skipped) = (0.0f64, 0, 0);
    for i in 0..inputs.len() {
        let idx = picks(analytic[i].data(), max_entries, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        let mut vals = inputs.to_vec();
        for &j in &idx {
            let orig = inputs[i].data()[j];
            let d = central(|h| {
                vals[i].data_mut()[j] = orig + h;
                eval(&vals, false).0
            });
            vals[i].data_mut()[j] = orig;
            match d {
                Some(d) => {
                    n.push(d);
                    a.push(analytic[i].data()[j]);
                }
                None => skipped += 1,
            }
        }
        entries += idx.len();
        worst = worst.max(rel_error(&a, &n));
    }
    GradCheck { name: name.to_string(), max_rel_error: worst, entries, skipped }
}

/// Checks `build` with respect to parameters `ids` of `store`.
pub fn check_params(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Tape, &ParamStore) -> Var,
    max_entries: usize,
    seed: u64,
) -> GradCheck {
    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::with_trainable(|_| false);
        let y = build(&mut tape, s);
        let w = projection(tape.shape(y), seed);
        let l = project(&mut tape, y, &w);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let y = build(&mut tape, store);
    let w = projection(tape.shape(y), seed);
    let l = project(&mut tape, y, &w);
    let grads = tape.backward(l);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut entries, mut skipped) = (0.0f64, 0, 0);
    let mut work = store.clone();
    for &id in ids {
        let analytic = grads.param_grad(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
        let idx = picks(analytic.data(), max_entries, &mut rng);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = store.get(id).data()[j];
            let d = central(|h| {
                work.get_mut(id).data_mut()[j] = orig + h;
                eval(&work)
            });
            work.get_mut(id).data_mut()[j] = orig;
            match d {
                Some(d) => {
                    n.push(d);
                    a.push(analytic.data()[j]);
                }
                None => skipped += 1,
            }
        }
        entries += idx.len();
        worst = worst.max(rel_error(&a, &n));
    }
    GradCheck { name: name.to_string(), max_rel_error: worst, entries, skipped }
}
