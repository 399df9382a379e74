//! Dense and convolutional building blocks.

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{axpy, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::He => Tensor::randn([fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros([fan_in, fan_out]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    /// `x[rows, fan_in] -> [rows, fan_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Two-layer perceptron `in -> hidden -> out` with an activation between.
///
/// With `residual`, the output is `x + mlp(x)` and the last layer starts at
/// zero, so the block is the identity at initialization.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub residual: bool,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        residual: bool,
        rng: &mut R,
    ) -> Self {
        let (i, h, o) = dims;
        assert!(!residual || i == o, "residual MLP needs matching widths");
        let hidden = Linear::new(store, &format!("{name}.l0"), i, h, Init::He, rng);
        let out_init = if residual { Init::Zero } else { Init::He };
        let out = Linear::new(store, &format!("{name}.l1"), h, o, out_init, rng);
        Self { hidden, out, residual, activation: Activation::Relu }
    }

    /// Non-residual MLP whose output layer starts at zero.
    pub fn zero_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let (i, h, o) = dims;
        let hidden = Linear::new(store, &format!("{name}.l0"), i, h, Init::He, rng);
        let out = Linear::new(store, &format!("{name}.l1"), h, o, Init::Zero, rng);
        Self { hidden, out, residual: false, activation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.forward(tape, store, x);
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Tanh => tape.tanh(h),
        };
        let y = self.out.forward(tape, store, h);
        if self.residual {
            tape.add(x, y)
        } else {
            y
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same3() -> Self {
        Self { kernel: 3, stride: 1, pad: 1 }
    }

    pub fn down3() -> Self {
        Self { kernel: 3, stride: 2, pad: 1 }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Channel-last convolution `x[H, W, Cin] * w[k, k, Cin, Cout] + b[Cout]`.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
    let (xs, ws) = (tape.shape(x).to_vec(), tape.shape(w).to_vec());
    assert_eq!(xs.len(), 3, "conv2d input must be [H, W, C], got {xs:?}");
    assert_eq!(ws, [geom.kernel, geom.kernel, xs[2], ws[3]], "conv2d weight shape");
    let dims = ConvDims::new(xs[0], xs[1], xs[2], ws[3], geom);
    let out = conv_forward(tape.value(x).data(), tape.value(w).data(), tape.value(b).data(), &dims);
    tape.record(
        &[x, w, b],
        Tensor::new([dims.ho, dims.wo, dims.cout], out),
        Box::new(move |c| {
            let (xv, wv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let gx = c.needs[0].then(|| Tensor::new(c.inputs[0].shape().to_vec(), conv_grad_input(g, wv, &dims)));
            let gw = c.needs[1].then(|| Tensor::new(c.inputs[1].shape().to_vec(), conv_grad_weight(g, xv, &dims)));
            let gb = c.needs[2].then(|| {
                let mut acc = vec![0.0; dims.cout];
                for px in g.chunks(dims.cout) {
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += v;
                    }
                }
                Tensor::new([dims.cout], acc)
            });
            vec![gx, gw, gb]
        }),
    )
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn new(h: usize, w: usize, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self { h, w, cin, cout, ho: geom.out_size(h), wo: geom.out_size(w), geom }
    }

    /// Input pixel feeding output `(oy, ox)` through tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.geom.stride + ky) as isize - self.geom.pad as isize;
        let ix = (ox * self.geom.stride + kx) as isize - self.geom.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.geom.kernel;
    let mut out = vec![0.0; d.ho * d.wo * d.cout];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let o = &mut out[(oy * d.wo + ox) * d.cout..(oy * d.wo + ox + 1) * d.cout];
            o.copy_from_slice(b);
            for ky in 0..k {
                for kx in 0..k {
                    let Some((iy, ix)) = d.src(oy, ox, ky, kx) else { continue };
                    let xp = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let wt = &w[(ky * k + kx) * d.cin * d.cout..];
                    for (ci, &xv) in xp.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, &wt[ci * d.cout..(ci + 1) * d.cout], o);
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.geom.kernel;
    // w transposed per tap to [k, k, Cout, Cin] so the inner loop is an axpy.
    let mut wt = vec![0.0; w.len()];
    for tap in 0..k * k {
        for ci in 0..d.cin {
            for co in 0..d.cout {
                wt[tap * d.cin * d.cout + co * d.cin + ci] = w[tap * d.cin * d.cout + ci * d.cout + co];
            }
        }
    }
    let mut gx = vec![0.0; d.h * d.w * d.cin];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let gp = &g[(oy * d.wo + ox) * d.cout..(oy * d.wo + ox + 1) * d.cout];
            for ky in 0..k {
                for kx in 0..k {
                    let Some((iy, ix)) = d.src(oy, ox, ky, kx) else { continue };
                    let dst = &mut gx[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let wtap = &wt[(ky * k + kx) * d.cin * d.cout..];
                    for (co, &gv) in gp.iter().enumerate() {
                        if gv != 0.0 {
                            axpy(gv, &wtap[co * d.cin..(co + 1) * d.cin], dst);
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_grad_weight(g: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.geom.kernel;
    let mut gw = vec![0.0; k * k * d.cin * d.cout];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let gp = &g[(oy * d.wo + ox) * d.cout..(oy * d.wo + ox + 1) * d.cout];
            for ky in 0..k {
                for kx in 0..k {
                    let Some((iy, ix)) = d.src(oy, ox, ky, kx) else { continue };
                    let xp = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let tap = &mut gw[(ky * k + kx) * d.cin * d.cout..(ky * k + kx + 1) * d.cin * d.cout];
                    for (ci, &xv) in xp.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, gp, &mut tap[ci * d.cout..(ci + 1) * d.cout]);
                        }
                    }
                }
            }
        }
    }
    gw
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let w = match init {
            Init::He => Tensor::randn([k, k, cin, cout], (2.0 / (k * k * cin) as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros([k, k, cin, cout]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        conv2d(tape, x, w, b, self.geom)
    }
}

/// A convolution whose weights never enter a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeom,
}

impl FixedConv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        conv2d(tape, x, w, b, self.geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeom) -> Tensor {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = w.shape()[3];
        let (ho, wo) = (g.out_size(h), g.out_size(wd));
        Tensor::from_fn([ho, wo, cout], |i| {
            let co = i % cout;
            let ox = (i / cout) % wo;
            let oy = i / (cout * wo);
            let mut s = b.data()[co];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        let xv = x.data()[(iy as usize * wd + ix as usize) * cin + ci];
                        let wv = w.data()[((ky * g.kernel + kx) * cin + ci) * cout + co];
                        s += xv * wv;
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for geom in [ConvGeom::same3(), ConvGeom::down3(), ConvGeom { kernel: 1, stride: 1, pad: 0 }] {
            let x = Tensor::randn([7, 6, 3], 1.0, &mut rng);
            let w = Tensor::randn([geom.kernel, geom.kernel, 3, 4], 1.0, &mut rng);
            let b = Tensor::randn([4], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = conv2d(&mut tape, xv, wv, bv, geom);
            assert!(tape.value(y).max_abs_diff(&naive(&x, &w, &b, geom)) < 1e-12);
        }
    }

    #[test]
    fn residual_mlp_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", (5, 8, 5), true, &mut rng);
        let x = Tensor::randn([4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &store, xv);
        assert_eq!(tape.value(y), &x);
    }
}
