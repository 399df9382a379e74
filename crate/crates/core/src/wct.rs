//! Whitening/coloring style transform.
//!
//! Content features are whitened by `T_c = W_c Λ_c^{-1/2} W_cᵀ` and colored by
//! `T_s = W_s Λ_s^{1/2} W_sᵀ`, so `T = T_s T_c` maps the content covariance
//! onto the style covariance. The same pair can be predicted from the
//! flattened covariances by two MLPs ([`TransformPredictor`]), which is what
//! makes stylization a single linear map shared by every view and timestamp.

use rand::Rng;
use thiserror::Error;

use crate::nets::layers::{Activation, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Eigenvalue floor applied wherever a covariance is inverted or rooted.
pub const EIG_FLOOR: f64 = 1e-5;
/// Feature width of the embedded Gaussians.
pub const FEATURE_DIM: usize = 32;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum WctError {
    #[error("Jacobi eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("expected a square matrix, got shape {0:?}")]
    NotSquare(Vec<usize>),
    #[error("interpolation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("interpolation weight {0} is negative")]
    NegativeWeight(f64),
    #[error("interpolation needs at least one transform")]
    Empty,
    #[error("transforms disagree on the content mean")]
    MeanMismatch,
}

/// `(1/N) X̄ᵀ X̄` for `samples[N, d]` centered at `mean`.
pub fn covariance(samples: &Tensor, mean: &[f64]) -> Tensor {
    let (n, d) = (samples.rows(), samples.cols());
    assert_eq!(mean.len(), d);
    let mut acc = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (x, m)) in centered.iter_mut().zip(samples.row(i).iter().zip(mean)) {
            *c = x - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in 0..d {
                acc[a * d + b] += ca * centered[b];
            }
        }
    }
    acc.iter_mut().for_each(|x| *x /= n as f64);
    Tensor::new([d, d], acc)
}

/// Symmetric eigendecomposition `M = W diag(values) Wᵀ`.
///
/// Columns of `vectors` are eigenvectors; values are sorted descending and
/// each eigenvector's first non-negligible component is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomposition {
    pub vectors: Tensor,
    pub values: Vec<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `W diag(f(λ)) Wᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let d = self.dim();
        let w = self.vectors.data();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let s: f64 = (0..d).map(|k| w[i * d + k] * fl[k] * w[j * d + k]).sum();
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        Tensor::new([d, d], out)
    }

    pub fn reconstruct(&self) -> Tensor {
        self.map(|l| l)
    }
}

/// Eigendecomposition with eigenvalues floored at [`EIG_FLOOR`].
pub fn eigh(m: &Tensor) -> Result<EigenDecomposition, WctError> {
    eigh_with_floor(m, Some(EIG_FLOOR))
}

/// Cyclic Jacobi eigensolver. The input is symmetrized first; iteration
/// stops once the off-diagonal Frobenius norm drops below
/// `1e-12 * max(1, ‖M‖_F)`.
pub fn eigh_with_floor(m: &Tensor, floor: Option<f64>) -> Result<EigenDecomposition, WctError> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(WctError::NotSquare(s.to_vec()));
    }
    if !m.all_finite() {
        return Err(WctError::NonFinite);
    }
    let d = s[0];
    let src = m.data();
    let mut a: Vec<f64> = (0..d * d).map(|k| 0.5 * (src[k] + src[(k % d) * d + k / d])).collect();
    let mut v = Tensor::eye(d).into_data();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) < JACOBI_TOL * scale;
    let mut sweep = 0;
    while !converged {
        if sweep == JACOBI_MAX_SWEEPS {
            return Err(WctError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweep += 1;
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) < JACOBI_TOL * scale;
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]).then(i.cmp(&j)));
    let mut vectors = vec![0.0; d * d];
    let mut values = Vec::with_capacity(d);
    for (col, &k) in order.iter().enumerate() {
        let mut lambda = a[k * d + k];
        if let Some(f) = floor {
            lambda = lambda.max(f);
        }
        values.push(lambda);
        let lead = (0..d).map(|i| v[i * d + k]).find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            vectors[i * d + col] = sign * v[i * d + k];
        }
    }
    Ok(EigenDecomposition { vectors: Tensor::new([d, d], vectors), values })
}

/// Spectral function applied through [`sym_matrix_fn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralFn {
    Sqrt,
    InvSqrt,
}

impl SpectralFn {
    fn eval(self, x: f64) -> f64 {
        match self {
            SpectralFn::Sqrt => x.sqrt(),
            SpectralFn::InvSqrt => 1.0 / x.sqrt(),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            SpectralFn::Sqrt => 0.5 / x.sqrt(),
            SpectralFn::InvSqrt => -0.5 / (x * x.sqrt()),
        }
    }
}

/// Differentiable `f(M)` for symmetric `M`, with eigenvalues floored at
/// `floor` before `f` is applied (the floor has zero derivative).
pub fn sym_matrix_fn(tape: &mut Tape, m: Var, f: SpectralFn, floor: f64) -> Var {
    let eig = eigh_with_floor(tape.value(m), None).expect("sym_matrix_fn on non-finite matrix");
    let value = eig.map(|l| f.eval(l.max(floor)));
    let d = eig.dim();
    tape.record(
        &[m],
        value,
        Box::new(move |c| {
            let lam = &eig.values;
            let g = c.grad.data();
            // Daleckii-Krein: dF = W (L ∘ (Wᵀ dM W)) Wᵀ with divided differences L.
            let gs: Vec<f64> = (0..d * d).map(|k| 0.5 * (g[k] + g[(k % d) * d + k / d])).collect();
            let gs = Tensor::new([d, d], gs);
            let wt = eig.vectors.transpose();
            let mut b = wt.matmul(&gs).matmul(&eig.vectors);
            let ft = |x: f64| f.eval(x.max(floor));
            let dft = |x: f64| if x > floor { f.deriv(x) } else { 0.0 };
            let tol = 1e-10 * lam.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for i in 0..d {
                for j in 0..d {
                    let l = if (lam[i] - lam[j]).abs() > tol {
                        (ft(lam[i]) - ft(lam[j])) / (lam[i] - lam[j])
                    } else {
                        dft(0.5 * (lam[i] + lam[j]))
                    };
                    b.data_mut()[i * d + j] *= l;
                }
            }
            let out = eig.vectors.matmul(&b).matmul(&wt);
            vec![Some(out)]
        }),
    )
}

/// Differentiable `(1/N) X̄ᵀ X̄` for `x[N, d]`; returns `(cov[d, d], mean[d])`.
pub fn tape_covariance(tape: &mut Tape, x: Var) -> (Var, Var) {
    let n = tape.value(x).rows() as f64;
    let mean = tape.mean_rows(x);
    let centered = tape.sub_row(x, mean);
    let ct = tape.transpose(centered);
    let gram = tape.matmul(ct, centered);
    (tape.scale(gram, 1.0 / n), mean)
}

/// Linear style state: `F_cs = T_s T_c (F − μ_f) + μ_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTransform {
    pub t_c: Tensor,
    pub t_s: Tensor,
    pub mu_f: Vec<f64>,
    pub mu_s: Vec<f64>,
}

impl StyleTransform {
    pub fn identity(dim: usize) -> Self {
        Self { t_c: Tensor::eye(dim), t_s: Tensor::eye(dim), mu_f: vec![0.0; dim], mu_s: vec![0.0; dim] }
    }

    /// The combined matrix `T = T_s T_c`.
    pub fn matrix(&self) -> Tensor {
        self.t_s.matmul(&self.t_c)
    }

    pub fn is_finite(&self) -> bool {
        self.t_c.all_finite()
            && self.t_s.all_finite()
            && self.mu_f.iter().all(|x| x.is_finite())
            && self.mu_s.iter().all(|x| x.is_finite())
    }
}

/// Closed-form whitening/coloring between two sample sets.
pub fn closed_form_transform(f_c: &Tensor, f_s: &Tensor) -> Result<StyleTransform, WctError> {
    let mu_c = f_c.mean_rows();
    let mu_s = f_s.mean_rows();
    let (t_c, t_s) = closed_form_factors(&covariance(f_c, &mu_c), &covariance(f_s, &mu_s))?;
    Ok(StyleTransform { t_c, t_s, mu_f: mu_c, mu_s })
}

/// `(T_c, T_s)` from the two covariances.
pub fn closed_form_factors(cov_c: &Tensor, cov_s: &Tensor) -> Result<(Tensor, Tensor), WctError> {
    let ec = eigh(cov_c)?;
    let es = eigh(cov_s)?;
    Ok((ec.map(|l| 1.0 / l.sqrt()), es.map(f64::sqrt)))
}

/// `(1/N_f) ‖A − B‖²_F` between two covariance (Gram) matrices.
pub fn covariance_gap(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.cols() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d
}

/// Covariance-matching loss between centered stylized and style features
/// (`[N, d]` and `[M, d]`), normalizing each Gram by its sample count.
pub fn covariance_loss(f_cs_bar: &Tensor, f_s_bar: &Tensor) -> f64 {
    let zc = vec![0.0; f_cs_bar.cols()];
    let zs = vec![0.0; f_s_bar.cols()];
    covariance_gap(&covariance(f_cs_bar, &zc), &covariance(f_s_bar, &zs))
}

/// Differentiable covariance-matching loss for `T cov_c Tᵀ` against `cov_s`.
pub fn tape_transformed_covariance_loss(tape: &mut Tape, t: Var, cov_c: Var, cov_s: Var) -> Var {
    let tt = tape.transpose(t);
    let tc = tape.matmul(t, cov_c);
    let moved = tape.matmul(tc, tt);
    let diff = tape.sub(moved, cov_s);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    let d = tape.value(t).cols() as f64;
    tape.scale(s, 1.0 / d)
}

/// Applies a transform to every row of `f[.., d]` (any leading shape).
pub fn apply_transform(f: &Tensor, tr: &StyleTransform) -> Tensor {
    let d = f.cols();
    let m = tr.matrix();
    let mt = m.data();
    let mut out = vec![0.0; f.numel()];
    let mut centered = vec![0.0; d];
    for (orow, frow) in out.chunks_mut(d).zip(f.data().chunks(d)) {
        for k in 0..d {
            centered[k] = frow[k] - tr.mu_f[k];
        }
        for i in 0..d {
            let s: f64 = (0..d).map(|k| mt[i * d + k] * centered[k]).sum();
            orow[i] = s + tr.mu_s[i];
        }
    }
    Tensor::new(f.shape().to_vec(), out)
}

/// Differentiable [`apply_transform`]: `(F − μ_f) Tᵀ + μ_s`.
pub fn tape_apply_transform(tape: &mut Tape, f: Var, t: Var, mu_f: Var, mu_s: Var) -> Var {
    let shape = tape.shape(f).to_vec();
    let d = *shape.last().unwrap();
    let rows = tape.value(f).numel() / d;
    let flat = tape.reshape(f, &[rows, d]);
    let centered = tape.sub_row(flat, mu_f);
    let tt = tape.transpose(t);
    let moved = tape.matmul(centered, tt);
    let out = tape.add_row(moved, mu_s);
    tape.reshape(out, &shape)
}

/// Convex blend of transforms that share `μ_f`. The result stores the
/// blended combined matrix in `t_s` with `t_c = I`.
pub fn interpolate_styles(transforms: &[(StyleTransform, f64)]) -> Result<StyleTransform, WctError> {
    let (first, _) = transforms.first().ok_or(WctError::Empty)?;
    let total: f64 = transforms.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(WctError::WeightSum(total));
    }
    if let Some(&(_, w)) = transforms.iter().find(|(_, w)| *w < 0.0) {
        return Err(WctError::NegativeWeight(w));
    }
    if transforms.iter().any(|(t, _)| t.mu_f != first.mu_f) {
        return Err(WctError::MeanMismatch);
    }
    let d = first.mu_f.len();
    let mut m = Tensor::zeros([d, d]);
    let mut mu_s = vec![0.0; d];
    for (t, w) in transforms {
        m.add_assign(&t.matrix().scale(*w));
        for (a, b) in mu_s.iter_mut().zip(&t.mu_s) {
            *a += w * b;
        }
    }
    Ok(StyleTransform { t_c: Tensor::eye(d), t_s: m, mu_f: first.mu_f.clone(), mu_s })
}

/// Fixed input map of the predictors: `C / σ − I + ln(σ) I` with
/// `σ = tr(C) / d`. Invertible; separates the overall scale (one input
/// direction) from the shape of the covariance.
pub fn normalize_covariance(tape: &mut Tape, cov: Var) -> Var {
    let d = tape.shape(cov)[0];
    let eye = tape.constant(Tensor::eye(d));
    let diag = tape.mul(cov, eye);
    let tr = tape.sum(diag);
    let sigma = tape.scale(tr, 1.0 / d as f64);
    let sigma = tape.clamp(sigma, SCALE_FLOOR, f64::INFINITY);
    let sigma = tape.reshape(sigma, &[1]);
    let one = tape.constant(Tensor::new([1], vec![1.0]));
    let inv = tape.div(one, sigma);
    let log = tape.ln(sigma);
    let flat = tape.reshape(cov, &[1, d * d]);
    let shape = tape.mul_col(flat, inv);
    let eye_flat = tape.constant(Tensor::eye(d).reshape([1, d * d]));
    let centered = tape.sub(shape, eye_flat);
    let scale = tape.mul_col(eye_flat, log);
    let x = tape.add(centered, scale);
    tape.reshape(x, &[d, d])
}

/// Lower bound on `tr(C) / d` inside [`normalize_covariance`].
pub const SCALE_FLOOR: f64 = 1e-8;

/// MLP pair predicting `T_c` and `T_s` from flattened covariances.
///
/// Each MLP is `d² -> hidden -> d²` with a zero output layer and the identity
/// added, so an untrained predictor returns `T_c = T_s = I`.
#[derive(Clone, Debug)]
pub struct TransformPredictor {
    pub mlp_c: Mlp,
    pub mlp_s: Mlp,
    pub dim: usize,
}

impl TransformPredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let io = dim * dim;
        Self {
            mlp_c: Mlp::zero_output(store, "mlp_c", (io, hidden, io), Activation::Tanh, rng),
            mlp_s: Mlp::zero_output(store, "mlp_s", (io, hidden, io), Activation::Tanh, rng),
            dim,
        }
    }

    /// One MLP pass over a batch of covariances.
    fn predict(&self, tape: &mut Tape, store: &ParamStore, mlp: &Mlp, covs: &[Var]) -> Vec<Var> {
        let (d, n) = (self.dim, covs.len());
        let rows: Vec<Var> = covs
            .iter()
            .map(|&c| {
                let x = normalize_covariance(tape, c);
                tape.reshape(x, &[1, d * d])
            })
            .collect();
        let flat = tape.concat_cols(&rows);
        let batch = tape.reshape(flat, &[n, d * d]);
        let out = mlp.forward(tape, store, batch);
        let out = tape.reshape(out, &[1, n * d * d]);
        let eye = tape.constant(Tensor::eye(d));
        (0..n)
            .map(|i| {
                let o = tape.slice_cols(out, i * d * d, (i + 1) * d * d);
                let o = tape.reshape(o, &[d, d]);
                tape.add(eye, o)
            })
            .collect()
    }

    /// `T_c = I + MLP_c(π(cov_c))`.
    pub fn whitening(&self, tape: &mut Tape, store: &ParamStore, cov_c: Var) -> Var {
        self.predict(tape, store, &self.mlp_c, &[cov_c])[0]
    }

    /// `T_s = I + MLP_s(π(cov_s))`.
    pub fn coloring(&self, tape: &mut Tape, store: &ParamStore, cov_s: Var) -> Var {
        self.predict(tape, store, &self.mlp_s, &[cov_s])[0]
    }

    /// [`TransformPredictor::whitening`] for several covariances in one pass.
    pub fn whitening_batch(&self, tape: &mut Tape, store: &ParamStore, covs: &[Var]) -> Vec<Var> {
        self.predict(tape, store, &self.mlp_c, covs)
    }

    pub fn coloring_batch(&self, tape: &mut Tape, store: &ParamStore, covs: &[Var]) -> Vec<Var> {
        self.predict(tape, store, &self.mlp_s, covs)
    }

    /// Predicted transform for sample sets `f_c[N, d]` and `f_s[M, d]`;
    /// the means are those of the inputs.
    pub fn predict_transform(&self, store: &ParamStore, f_c: &Tensor, f_s: &Tensor) -> StyleTransform {
        let mut tape = Tape::new();
        let mu_f = f_c.mean_rows();
        let mu_s = f_s.mean_rows();
        let cc = tape.constant(covariance(f_c, &mu_f));
        let cs = tape.constant(covariance(f_s, &mu_s));
        let t_c = self.whitening(&mut tape, store, cc);
        let t_s = self.coloring(&mut tape, store, cs);
        StyleTransform { t_c: tape.value(t_c).clone(), t_s: tape.value(t_s).clone(), mu_f, mu_s }
    }
}
