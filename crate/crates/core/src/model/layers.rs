//! Forward / backward kernels for the dense layers used by the encoder and
//! the heads. Every `*_backward` accumulates parameter gradients into a
//! [`Grads`] buffer and returns the gradient with respect to its input.

use rand::Rng;

use super::params::{Grads, Init, ParamId, ParamStore};
use crate::tensor::{accumulate_col_sums, add_row_bias, gelu, gelu_grad, gemm, matmul, Mat, MatMut, MatRef, Real};

pub const LN_EPS: f64 = 1e-5;
/// Embedding tables; dense weights use `1/sqrt(fan_in)` instead.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = ps.add(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal((fan_in as f64).sqrt().recip()), true, rng);
        let b = ps.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, false, rng);
        Self { w, b, fan_in, fan_out }
    }

    fn weight<'a, T: Real>(&self, ps: &'a ParamStore<T>) -> MatRef<'a, T> {
        MatRef::new(ps.get(self.w), self.fan_in, self.fan_out, self.fan_out as isize, 1)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x.view(), self.weight(ps));
        add_row_bias(&mut y, ps.get(self.b));
        y
    }

    /// Parameter gradients only.
    pub fn backward_params<T: Real>(&self, x: &Mat<T>, dy: &Mat<T>, grads: &mut Grads<T>) {
        let (rows, cols) = (self.fan_in, self.fan_out);
        gemm(
            T::one(),
            x.view().t(),
            dy.view(),
            T::one(),
            MatMut::new(grads.get_mut(self.w), rows, cols, cols as isize, 1),
        );
        accumulate_col_sums(dy, grads.get_mut(self.b));
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>, dy: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        self.backward_params(x, dy, grads);
        matmul(dy.view(), self.weight(ps).t())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            gain: ps.add(&format!("{name}.gain"), &[dim], Init::Ones, false, rng),
            bias: ps.add(&format!("{name}.bias"), &[dim], Init::Zeros, false, rng),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let d = x.cols;
        let n = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let (g, b) = (ps.get(self.gain), ps.get(self.bias));
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            for ((o, &xv), (&gv, &bv)) in y.row_mut(r).iter_mut().zip(xhat.row(r)).zip(g.iter().zip(b)) {
                *o = xv * gv + bv;
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &LnCache<T>, dy: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let d = dy.cols;
        let n = T::of(d as f64);
        let g = ps.get(self.gain);
        let mut dgain = vec![T::zero(); d];
        let mut dbias = vec![T::zero(); d];
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            let mut sum = T::zero();
            let mut sum_x = T::zero();
            for j in 0..d {
                dgain[j] += dyr[j] * xh[j];
                dbias[j] += dyr[j];
                dxhat[j] = dyr[j] * g[j];
                sum += dxhat[j];
                sum_x += dxhat[j] * xh[j];
            }
            let mean = sum / n;
            let mean_x = sum_x / n;
            let rs = cache.rstd[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[j] - mean - xh[j] * mean_x);
            }
        }
        for (a, v) in grads.get_mut(self.gain).iter_mut().zip(dgain) {
            *a += v;
        }
        for (a, v) in grads.get_mut(self.bias).iter_mut().zip(dbias) {
            *a += v;
        }
        dx
    }
}

pub fn gelu_forward<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect())
}

pub fn gelu_backward<T: Real>(pre: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat::from_vec(
        dy.rows,
        dy.cols,
        pre.data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &d)| d * gelu_grad(x))
            .collect(),
    )
}

/// `LayerNorm(GeLU(x W + b))`.
#[derive(Clone, Copy, Debug)]
pub struct DenseGeluNorm {
    pub fc: Linear,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DenseGeluNormCache<T> {
    x: Mat<T>,
    pre: Mat<T>,
    ln: LnCache<T>,
}

impl DenseGeluNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(ps, &format!("{name}.dense"), fan_in, fan_out, rng),
            ln: LayerNorm::new(ps, &format!("{name}.norm"), fan_out, rng),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: Mat<T>) -> (Mat<T>, DenseGeluNormCache<T>) {
        let pre = self.fc.forward(ps, &x);
        let (y, ln) = self.ln.forward(ps, &gelu_forward(&pre));
        (y, DenseGeluNormCache { x, pre, ln })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &DenseGeluNormCache<T>, dy: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let dact = self.ln.backward(ps, &cache.ln, dy, grads);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc.backward(ps, &cache.x, &dpre, grads)
    }
}

/// Inverted dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Real>(x: &mut Mat<T>, mask: Option<&Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
}
