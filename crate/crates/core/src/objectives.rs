//! The five pretraining losses and their weighted total.
//!
//! Loss values are accumulated in `f64`; gradients come back in the model's
//! scalar type. Masked-position losses are normalised by the number of
//! masked positions in the whole batch and are 0 when there are none.

use serde::{Deserialize, Serialize};

use crate::masking::TrainingBatch;
use crate::model::params::Grads;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{log_sum_exp, Mat, Real};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itm: f64,
    pub mlm: f64,
    pub gmlm: f64,
    pub mim: f64,
    pub gmim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itm: 1.0,
            mlm: 0.1,
            gmlm: 0.1,
            mim: 0.01,
            gmim: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            itm: 0.0,
            mlm: 0.0,
            gmlm: 0.0,
            mim: 0.0,
            gmim: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.itm, self.mlm, self.gmlm, self.mim, self.gmim];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(crate::Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-component losses of one batch (or an average over batches).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub itm: f64,
    pub mlm: f64,
    pub gmlm: f64,
    pub mim: f64,
    pub gmim: f64,
    pub total: f64,
    pub masked_tokens: usize,
    pub masked_patches: usize,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.itm, self.mlm, self.gmlm, self.mim, self.gmim]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// `Σ λ_i · L_i`.
pub fn total_loss(components: [f64; 5], w: &LossWeights) -> f64 {
    let [itm, mlm, gmlm, mim, gmim] = components;
    w.itm * itm + w.mlm * mlm + w.gmlm * gmlm + w.mim * mim + w.gmim * gmim
}

/// Mean softmax cross-entropy of `logits` rows against `targets`, with the
/// gradient of that mean.
pub fn cross_entropy<T: Real>(logits: &Mat<T>, targets: &[usize]) -> (f64, Mat<T>) {
    assert_eq!(logits.rows, targets.len());
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    if targets.is_empty() {
        return (0.0, grad);
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        loss += (lse - row[t]).f64();
        for (g, &x) in grad.row_mut(r).iter_mut().zip(row) {
            *g = (x - lse).exp() / T::of(n);
        }
        grad.row_mut(r)[t] -= T::of(1.0 / n);
    }
    (loss / n, grad)
}

/// Per-element squared error averaged over all rows, with its gradient.
pub fn mean_squared_error<T: Real>(pred: &Mat<T>, target: &[f32]) -> (f64, Mat<T>) {
    assert_eq!(pred.data.len(), target.len());
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    if pred.data.is_empty() {
        return (0.0, grad);
    }
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(target) {
        let d = p.f64() - t as f64;
        loss += d * d;
        *g = T::of(2.0 * d / n);
    }
    (loss / n, grad)
}

pub fn itm_loss<T: Real>(logits: &Mat<T>, labels: &[u8]) -> (f64, Mat<T>) {
    let t: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    cross_entropy(logits, &t)
}

pub fn mlm_loss<T: Real>(logits: &Mat<T>, target_ids: &[u32]) -> (f64, Mat<T>) {
    let t: Vec<usize> = target_ids.iter().map(|&l| l as usize).collect();
    cross_entropy(logits, &t)
}

pub fn gmlm_loss<T: Real>(logits: &Mat<T>, target_ids: &[u32]) -> (f64, Mat<T>) {
    mlm_loss(logits, target_ids)
}

pub fn mim_loss<T: Real>(recon: &Mat<T>, target: &[f32]) -> (f64, Mat<T>) {
    mean_squared_error(recon, target)
}

pub fn gmim_loss<T: Real>(recon: &Mat<T>, target: &[f32]) -> (f64, Mat<T>) {
    mean_squared_error(recon, target)
}

/// Result of one forward (and optionally backward) pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub report: LossReport,
    /// Correct ITM predictions in the batch.
    pub itm_correct: usize,
    pub grads: Option<Grads<T>>,
    /// Gradient of the weighted total with respect to the final hidden
    /// states, `[batch · S, H]`; present with `grads`.
    pub d_hidden: Option<Mat<T>>,
}

fn scaled<T: Real>(mut m: Mat<T>, s: f64) -> Mat<T> {
    let s = T::of(s);
    m.data.iter_mut().for_each(|x| *x *= s);
    m
}

fn scatter_add<T: Real>(dst: &mut Mat<T>, rows: &[usize], src: &Mat<T>) {
    for (r, &i) in rows.iter().enumerate() {
        for (o, &v) in dst.row_mut(i).iter_mut().zip(src.row(r)) {
            *o += v;
        }
    }
}

/// Weighted pretraining loss of `batch`. Dropout is active when `rng` is
/// given; gradients are computed when `with_grads` is set.
pub fn pretraining_step<T: Real>(
    model: &Model<T>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    rng: Option<&mut Rng>,
    with_grads: bool,
) -> Result<StepOutput<T>> {
    let fwd = model.forward(batch, rng)?;
    let layout = &fwd.layout;
    let h = &fwd.hidden;
    let cls_rows: Vec<usize> = (0..layout.batch).map(|b| layout.row(b, 0)).collect();
    let h_cls = h.gather_rows(&cls_rows);

    let itm_logits = model.itm_logits(&h_cls);
    let (itm, d_itm) = itm_loss(&itm_logits, &batch.itm_labels);
    let itm_correct = (0..layout.batch)
        .filter(|&b| {
            let r = itm_logits.row(b);
            usize::from(r[1] > r[0]) == usize::from(batch.itm_labels[b])
        })
        .count();

    let tok_rows: Vec<usize> = batch
        .token_targets
        .iter()
        .map(|t| layout.row(t.example, layout.token_slot(t.position)))
        .collect();
    let tok_slots: Vec<usize> = batch.token_targets.iter().map(|t| layout.token_slot(t.position)).collect();
    let tok_cls: Vec<usize> = batch.token_targets.iter().map(|t| layout.row(t.example, 0)).collect();
    let tok_ids: Vec<u32> = batch.token_targets.iter().map(|t| t.id).collect();
    let patch_rows: Vec<usize> = batch
        .patch_targets
        .iter()
        .map(|t| layout.row(t.example, layout.patch_slot(t.position)))
        .collect();
    let patch_slots: Vec<usize> = batch.patch_targets.iter().map(|t| layout.patch_slot(t.position)).collect();
    let patch_cls: Vec<usize> = batch.patch_targets.iter().map(|t| layout.row(t.example, 0)).collect();

    let mut report = LossReport {
        itm,
        masked_tokens: tok_ids.len(),
        masked_patches: patch_rows.len(),
        ..LossReport::default()
    };
    let mut d_hidden = with_grads.then(|| Mat::zeros(h.rows, h.cols));
    let mut grads = with_grads.then(|| model.params.zeros_like());
    if let (Some(dh), Some(g)) = (d_hidden.as_mut(), grads.as_mut()) {
        let d = model.itm_backward(&h_cls, &scaled(d_itm, weights.itm), g);
        scatter_add(dh, &cls_rows, &d);
    }

    if !tok_ids.is_empty() {
        let h_tok = h.gather_rows(&tok_rows);
        let (logits, cache) = model.mlm_logits(h_tok);
        let (mlm, d_mlm) = mlm_loss(&logits, &tok_ids);
        report.mlm = mlm;
        let hc = h.gather_rows(&tok_cls);
        let (glogits, gcache) = model.gmlm_logits(&hc, &tok_slots);
        let (gmlm, d_gmlm) = gmlm_loss(&glogits, &tok_ids);
        report.gmlm = gmlm;
        if let (Some(dh), Some(g)) = (d_hidden.as_mut(), grads.as_mut()) {
            let d = model.mlm_backward(&cache, &scaled(d_mlm, weights.mlm), g);
            scatter_add(dh, &tok_rows, &d);
            let d = model.gmlm_backward(&gcache, &scaled(d_gmlm, weights.gmlm), g);
            scatter_add(dh, &tok_cls, &d);
        }
    }

    if !patch_rows.is_empty() {
        let h_patch = h.gather_rows(&patch_rows);
        let recon = model.mim_predict(&h_patch);
        let (mim, d_mim) = mim_loss(&recon, &batch.patch_target_values);
        report.mim = mim;
        let hc = h.gather_rows(&patch_cls);
        let (grecon, gcache) = model.gmim_predict(&hc, &patch_slots);
        let (gmim, d_gmim) = gmim_loss(&grecon, &batch.patch_target_values);
        report.gmim = gmim;
        if let (Some(dh), Some(g)) = (d_hidden.as_mut(), grads.as_mut()) {
            let d = model.mim_backward(&h_patch, &scaled(d_mim, weights.mim), g);
            scatter_add(dh, &patch_rows, &d);
            let d = model.gmim_backward(&gcache, &scaled(d_gmim, weights.gmim), g);
            scatter_add(dh, &patch_cls, &d);
        }
    }

    report.total = total_loss(report.components(), weights);
    if let (Some(dh), Some(g)) = (d_hidden.as_ref(), grads.as_mut()) {
        model.backward(&fwd, dh, g);
    }
    Ok(StepOutput {
        report,
        itm_correct,
        grads,
        d_hidden,
    })
}
