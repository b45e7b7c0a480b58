//! Pre-LN transformer blocks with key-padding attention masks.

use rand::Rng;

use super::layers::{apply_mask, dropout_mask, gelu_backward, gelu_forward, LayerNorm, Linear, LnCache};
use super::params::{Grads, ParamStore};
use crate::tensor::{gemm, softmax_in_place, Mat, MatMut, MatRef, Real};

/// Sequence geometry of a batch: `[CLS] patches [SEP] tokens [SEP] pads`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub n_patches: usize,
    pub title_len: usize,
    pub title_lens: Vec<usize>,
}

impl Layout {
    pub fn seq_len(&self) -> usize {
        3 + self.n_patches + self.title_len
    }

    /// Row of slot `s` of example `b` in the flattened `[batch·S, H]` matrix.
    #[inline]
    pub fn row(&self, b: usize, s: usize) -> usize {
        b * self.seq_len() + s
    }

    #[inline]
    pub fn patch_slot(&self, i: usize) -> usize {
        1 + i
    }

    #[inline]
    pub fn first_sep_slot(&self) -> usize {
        1 + self.n_patches
    }

    #[inline]
    pub fn token_slot(&self, j: usize) -> usize {
        2 + self.n_patches + j
    }

    #[inline]
    pub fn last_sep_slot(&self, b: usize) -> usize {
        2 + self.n_patches + self.title_lens[b]
    }

    /// Whether slot `s` of example `b` holds a real (non-padding) element.
    #[inline]
    pub fn is_valid(&self, b: usize, s: usize) -> bool {
        s <= self.last_sep_slot(b)
    }

    /// Token-type segment of a slot: 0 for the image half, 1 for the text half.
    #[inline]
    pub fn segment(&self, s: usize) -> usize {
        usize::from(s > self.first_sep_slot())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Mat<T>,
    qkv: Mat<T>,
    /// `batch × heads × S × S` attention probabilities.
    probs: Vec<T>,
    ctx: Mat<T>,
    drop_attn: Option<Vec<T>>,
    ln2: LnCache<T>,
    b: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
    drop_ffn: Option<Vec<T>>,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, hidden: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.attn_norm"), hidden, rng),
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), hidden, 3 * hidden, rng),
            proj: Linear::new(ps, &format!("{name}.attn.out"), hidden, hidden, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ffn_norm"), hidden, rng),
            fc1: Linear::new(ps, &format!("{name}.ffn.fc1"), hidden, ffn, rng),
            fc2: Linear::new(ps, &format!("{name}.ffn.fc2"), ffn, hidden, rng),
        }
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        ps: &ParamStore<T>,
        x: &Mat<T>,
        layout: &Layout,
        heads: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> (Mat<T>, BlockCache<T>) {
        let (a, ln1) = self.ln1.forward(ps, x);
        let qkv = self.qkv.forward(ps, &a);
        let (ctx, probs) = attention_forward(&qkv, layout, heads);
        let mut attn_out = self.proj.forward(ps, &ctx);
        let (drop_attn, drop_ffn) = match dropout {
            Some((p, rng)) if p > 0.0 => {
                let m1 = dropout_mask(attn_out.data.len(), p, rng);
                let m2 = dropout_mask(attn_out.data.len(), p, rng);
                (Some(m1), Some(m2))
            }
            _ => (None, None),
        };
        apply_mask(&mut attn_out, drop_attn.as_ref());
        let mut x1 = x.clone();
        for (o, &v) in x1.data.iter_mut().zip(&attn_out.data) {
            *o += v;
        }

        let (b, ln2) = self.ln2.forward(ps, &x1);
        let pre = self.fc1.forward(ps, &b);
        let act = gelu_forward(&pre);
        let mut ffn_out = self.fc2.forward(ps, &act);
        apply_mask(&mut ffn_out, drop_ffn.as_ref());
        for (o, &v) in x1.data.iter_mut().zip(&ffn_out.data) {
            *o += v;
        }
        (
            x1,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                ctx,
                drop_attn,
                ln2,
                b,
                pre,
                act,
                drop_ffn,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Mat<T>,
        layout: &Layout,
        heads: usize,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let mut dffn = dy.clone();
        apply_mask(&mut dffn, cache.drop_ffn.as_ref());
        let dact = self.fc2.backward(ps, &cache.act, &dffn, grads);
        let dpre = gelu_backward(&cache.pre, &dact);
        let db = self.fc1.backward(ps, &cache.b, &dpre, grads);
        let mut dx1 = self.ln2.backward(ps, &cache.ln2, &db, grads);
        for (o, &v) in dx1.data.iter_mut().zip(&dy.data) {
            *o += v;
        }

        let mut dattn = dx1.clone();
        apply_mask(&mut dattn, cache.drop_attn.as_ref());
        let dctx = self.proj.backward(ps, &cache.ctx, &dattn, grads);
        let dqkv = attention_backward(&cache.qkv, &cache.probs, &dctx, layout, heads);
        let da = self.qkv.backward(ps, &cache.a, &dqkv, grads);
        let mut dx = self.ln1.backward(ps, &cache.ln1, &da, grads);
        for (o, &v) in dx.data.iter_mut().zip(&dx1.data) {
            *o += v;
        }
        dx
    }
}

impl<T> BlockCache<T> {
    /// Attention probabilities, laid out `[b][head][query][key]`.
    pub fn attention_probs(&self) -> &[T] {
        &self.probs
    }
}

/// Multi-head scaled dot-product attention over a fused `[n, 3H]` QKV matrix.
fn attention_forward<T: Real>(qkv: &Mat<T>, layout: &Layout, heads: usize) -> (Mat<T>, Vec<T>) {
    let s = layout.seq_len();
    let hidden = qkv.cols / 3;
    let dh = hidden / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let rs = qkv.cols as isize;
    let mut ctx = Mat::zeros(qkv.rows, hidden);
    let mut probs = vec![T::zero(); layout.batch * heads * s * s];
    for b in 0..layout.batch {
        let base = b * s * qkv.cols;
        for h in 0..heads {
            let q = MatRef::new(&qkv.data[base + h * dh..], s, dh, rs, 1);
            let k = MatRef::new(&qkv.data[base + hidden + h * dh..], s, dh, rs, 1);
            let v = MatRef::new(&qkv.data[base + 2 * hidden + h * dh..], s, dh, rs, 1);
            let off = (b * heads + h) * s * s;
            let p = &mut probs[off..off + s * s];
            gemm(scale, q, k.t(), T::zero(), MatMut::new(p, s, s, s as isize, 1));
            for row in p.chunks_exact_mut(s) {
                for (key, x) in row.iter_mut().enumerate() {
                    if !layout.is_valid(b, key) {
                        *x = T::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            let out = MatMut::new(&mut ctx.data[b * s * hidden + h * dh..], s, dh, hidden as isize, 1);
            gemm(T::one(), MatRef::new(p, s, s, s as isize, 1), v, T::zero(), out);
        }
    }
    (ctx, probs)
}

fn attention_backward<T: Real>(qkv: &Mat<T>, probs: &[T], dctx: &Mat<T>, layout: &Layout, heads: usize) -> Mat<T> {
    let s = layout.seq_len();
    let hidden = qkv.cols / 3;
    let dh = hidden / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let rs = qkv.cols as isize;
    let mut dqkv = Mat::zeros(qkv.rows, qkv.cols);
    let mut dp = vec![T::zero(); s * s];
    for b in 0..layout.batch {
        let base = b * s * qkv.cols;
        for h in 0..heads {
            let q = MatRef::new(&qkv.data[base + h * dh..], s, dh, rs, 1);
            let k = MatRef::new(&qkv.data[base + hidden + h * dh..], s, dh, rs, 1);
            let v = MatRef::new(&qkv.data[base + 2 * hidden + h * dh..], s, dh, rs, 1);
            let off = (b * heads + h) * s * s;
            let p = &probs[off..off + s * s];
            let p_ref = MatRef::new(p, s, s, s as isize, 1);
            let dc = MatRef::new(&dctx.data[b * s * hidden + h * dh..], s, dh, hidden as isize, 1);

            // dV = Pᵀ dC
            gemm(
                T::one(),
                p_ref.t(),
                dc,
                T::zero(),
                MatMut::new(&mut dqkv.data[base + 2 * hidden + h * dh..], s, dh, rs, 1),
            );
            // dP = dC Vᵀ, then through the softmax.
            gemm(T::one(), dc, v.t(), T::zero(), MatMut::new(&mut dp, s, s, s as isize, 1));
            for (dr, pr) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                let dot: T = dr.iter().zip(pr).map(|(&d, &pp)| d * pp).sum();
                for (d, &pp) in dr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            let ds = MatRef::new(&dp, s, s, s as isize, 1);
            gemm(
                T::one(),
                ds,
                k,
                T::zero(),
                MatMut::new(&mut dqkv.data[base + h * dh..], s, dh, rs, 1),
            );
            gemm(
                T::one(),
                ds.t(),
                q,
                T::zero(),
                MatMut::new(&mut dqkv.data[base + hidden + h * dh..], s, dh, rs, 1),
            );
        }
    }
    dqkv
}
