//! Pretraining and classification heads.
//!
//! The MLM and GMLM heads project onto the token embedding table (tied
//! weights) plus a shared vocabulary bias. The global heads see only the
//! `[CLS]` state and the position embedding of the slot being rebuilt.

use super::layers::{DenseGeluNorm, DenseGeluNormCache, Linear};
use super::params::Grads;
use super::Model;
use crate::tensor::{accumulate_col_sums, add_row_bias, gemm, matmul, Mat, MatMut, MatRef, Real};

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    transform: DenseGeluNormCache<T>,
    pub(crate) out: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct GlobalCache<T> {
    slots: Vec<usize>,
    layer0: DenseGeluNormCache<T>,
    layer1: DenseGeluNormCache<T>,
    out: Mat<T>,
}

impl<T: Real> Model<T> {
    fn token_table(&self) -> MatRef<'_, T> {
        let (v, h) = (self.config.vocab_size, self.config.hidden);
        MatRef::new(self.params.get(self.m.tok_emb), v, h, h as isize, 1)
    }

    /// `t · Eᵀ + b` over the token table `E`.
    fn vocab_logits(&self, t: &Mat<T>) -> Mat<T> {
        let mut logits = matmul(t.view(), self.token_table().t());
        add_row_bias(&mut logits, self.params.get(self.m.mlm_bias));
        logits
    }

    fn vocab_backward(&self, t: &Mat<T>, dlogits: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let (v, h) = (self.config.vocab_size, self.config.hidden);
        accumulate_col_sums(dlogits, grads.get_mut(self.m.mlm_bias));
        gemm(
            T::one(),
            dlogits.view().t(),
            t.view(),
            T::one(),
            MatMut::new(grads.get_mut(self.m.tok_emb), v, h, h as isize, 1),
        );
        matmul(dlogits.view(), self.token_table())
    }

    pub fn itm_logits(&self, h_cls: &Mat<T>) -> Mat<T> {
        self.m.itm.forward(&self.params, h_cls)
    }

    pub fn itm_backward(&self, h_cls: &Mat<T>, dlogits: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        self.m.itm.backward(&self.params, h_cls, dlogits, grads)
    }

    fn classifier(&self) -> &Linear {
        self.m
            .classifier
            .as_ref()
            .expect("model has no classification head; call with_classifier first")
    }

    pub fn classifier_logits(&self, h_cls: &Mat<T>) -> Mat<T> {
        self.classifier().forward(&self.params, h_cls)
    }

    pub fn classifier_backward(&self, h_cls: &Mat<T>, dlogits: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        self.classifier().backward(&self.params, h_cls, dlogits, grads)
    }

    /// Vocabulary logits for hidden states at masked token slots.
    pub fn mlm_logits(&self, h: Mat<T>) -> (Mat<T>, HeadCache<T>) {
        let (out, transform) = self.m.mlm_transform.forward(&self.params, h);
        (self.vocab_logits(&out), HeadCache { transform, out })
    }

    pub fn mlm_backward(&self, cache: &HeadCache<T>, dlogits: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let dout = self.vocab_backward(&cache.out, dlogits, grads);
        self.m.mlm_transform.backward(&self.params, &cache.transform, &dout, grads)
    }

    /// Patch reconstructions for hidden states at masked patch slots.
    pub fn mim_predict(&self, h: &Mat<T>) -> Mat<T> {
        self.m.mim.forward(&self.params, h)
    }

    pub fn mim_backward(&self, h: &Mat<T>, dpred: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        self.m.mim.backward(&self.params, h, dpred, grads)
    }

    /// Two-layer global network over `[h_cls ; pos(slot)]`.
    fn global_forward(&self, net: &[DenseGeluNorm; 2], h_cls: &Mat<T>, slots: &[usize]) -> GlobalCache<T> {
        assert_eq!(h_cls.rows, slots.len());
        let h = self.config.hidden;
        let pos = self.params.get(self.m.pos_emb);
        let mut x = Mat::zeros(slots.len(), 2 * h);
        for (r, &s) in slots.iter().enumerate() {
            let row = x.row_mut(r);
            row[..h].copy_from_slice(h_cls.row(r));
            row[h..].copy_from_slice(&pos[s * h..(s + 1) * h]);
        }
        let (y0, layer0) = net[0].forward(&self.params, x);
        let (out, layer1) = net[1].forward(&self.params, y0);
        GlobalCache {
            slots: slots.to_vec(),
            layer0,
            layer1,
            out,
        }
    }

    /// Returns the gradient for the `[CLS]` rows; position-embedding
    /// gradients are accumulated directly.
    fn global_backward(&self, net: &[DenseGeluNorm; 2], cache: &GlobalCache<T>, dout: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let h = self.config.hidden;
        let dy0 = net[1].backward(&self.params, &cache.layer1, dout, grads);
        let dx = net[0].backward(&self.params, &cache.layer0, &dy0, grads);
        let mut dcls = Mat::zeros(dx.rows, h);
        let dpos = grads.get_mut(self.m.pos_emb);
        for (r, &s) in cache.slots.iter().enumerate() {
            let row = dx.row(r);
            dcls.row_mut(r).copy_from_slice(&row[..h]);
            for (o, &v) in dpos[s * h..(s + 1) * h].iter_mut().zip(&row[h..]) {
                *o += v;
            }
        }
        dcls
    }

    /// Vocabulary logits predicted from `[CLS]` for the given token slots.
    pub fn gmlm_logits(&self, h_cls: &Mat<T>, slots: &[usize]) -> (Mat<T>, GlobalCache<T>) {
        let cache = self.global_forward(&self.m.gmlm, h_cls, slots);
        (self.vocab_logits(&cache.out), cache)
    }

    pub fn gmlm_backward(&self, cache: &GlobalCache<T>, dlogits: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let dout = self.vocab_backward(&cache.out, dlogits, grads);
        self.global_backward(&self.m.gmlm, cache, &dout, grads)
    }

    /// Patch reconstructions predicted from `[CLS]` for the given patch slots.
    pub fn gmim_predict(&self, h_cls: &Mat<T>, slots: &[usize]) -> (Mat<T>, GlobalCache<T>) {
        let cache = self.global_forward(&self.m.gmim, h_cls, slots);
        (self.m.gmim_out.forward(&self.params, &cache.out), cache)
    }

    pub fn gmim_backward(&self, cache: &GlobalCache<T>, dpred: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let dout = self.m.gmim_out.backward(&self.params, &cache.out, dpred, grads);
        self.global_backward(&self.m.gmim, cache, &dout, grads)
    }
}
