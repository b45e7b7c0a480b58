//! Pretraining and leaf-category fine-tuning loops.

pub mod data;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use data::{eval_batches, prepare, PreparedRecord};
pub use optim::{clip_grad_norm, lr_at, lr_schedule, select_checkpoint, AdamW, OptimConfig};

use crate::data_synth::ProductRecord;
use crate::masking::{make_batch, TrainingBatch};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::objectives::{cross_entropy, pretraining_step, LossReport, LossWeights};
use crate::retrieval::acc_at_k;
use crate::rng::{derive_seed, stream};
use crate::tensor::Mat;
use crate::text::{Vocab, PAD_ID};
use crate::{Error, Result};
use data::{pretrain_example, ExampleRngs, Sampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub weights: LossWeights,
    /// Steps actually run; the schedule still spans `optim.total_steps`.
    pub max_steps: usize,
    pub eval_every: usize,
    pub log_every: usize,
    /// Restrict masked-reconstruction losses to matched pairs.
    pub matched_only: bool,
}

impl PretrainConfig {
    pub fn desk() -> Self {
        let optim = OptimConfig::desk();
        Self {
            max_steps: optim.total_steps,
            optim,
            weights: LossWeights::default(),
            eval_every: 250,
            log_every: 50,
            matched_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        if self.max_steps == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("max_steps, eval_every and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// One training log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub itm: f64,
    pub mlm: f64,
    pub gmlm: f64,
    pub mim: f64,
    pub gmim: f64,
    pub total: f64,
}

/// Validation result at one evaluated checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: LossReport,
    pub itm_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Weights at the checkpoint with the lowest validation loss.
    pub model: Model<f32>,
    pub best_step: usize,
    pub evals: Vec<EvalRecord>,
    /// Per-step training losses.
    pub train_log: Vec<TrainRecord>,
}

impl PretrainOutcome {
    pub fn best_eval(&self) -> &EvalRecord {
        self.evals
            .iter()
            .find(|e| e.step == self.best_step)
            .expect("best step was evaluated")
    }
}

/// Validation examples with masks and ITM pairs fixed by `seed`, so every
/// evaluation sees identical inputs.
pub fn validation_batches(set: &[PreparedRecord], cfg: &ModelConfig, batch_size: usize, seed: u64) -> Result<Vec<TrainingBatch>> {
    let mut rngs = ExampleRngs::new(seed, "valid-");
    let examples = (0..set.len())
        .map(|i| pretrain_example(set, i, cfg, &mut rngs, false))
        .collect::<Result<Vec<_>>>()?;
    examples
        .chunks(batch_size.max(1))
        .map(|c| make_batch(c, cfg.max_title_len, PAD_ID))
        .collect()
}

/// Example-weighted validation loss and ITM accuracy, without dropout.
pub fn evaluate(model: &Model<f32>, batches: &[TrainingBatch], weights: &LossWeights, matched_only: bool) -> Result<(LossReport, f64)> {
    let mut acc = LossReport::default();
    let (mut tok_w, mut patch_w, mut n, mut correct) = (0.0, 0.0, 0usize, 0usize);
    for b in batches {
        let owned;
        let b = if matched_only {
            owned = b.matched_only();
            &owned
        } else {
            b
        };
        let out = pretraining_step(model, b, weights, None, false)?;
        let r = out.report;
        acc.itm += r.itm * b.size as f64;
        acc.mlm += r.mlm * r.masked_tokens as f64;
        acc.gmlm += r.gmlm * r.masked_tokens as f64;
        acc.mim += r.mim * r.masked_patches as f64;
        acc.gmim += r.gmim * r.masked_patches as f64;
        acc.masked_tokens += r.masked_tokens;
        acc.masked_patches += r.masked_patches;
        tok_w += r.masked_tokens as f64;
        patch_w += r.masked_patches as f64;
        n += b.size;
        correct += out.itm_correct;
    }
    let div = |x: f64, d: f64| if d > 0.0 { x / d } else { 0.0 };
    acc.itm = div(acc.itm, n as f64);
    acc.mlm = div(acc.mlm, tok_w);
    acc.gmlm = div(acc.gmlm, tok_w);
    acc.mim = div(acc.mim, patch_w);
    acc.gmim = div(acc.gmim, patch_w);
    acc.total = crate::objectives::total_loss(acc.components(), weights);
    Ok((acc, div(correct as f64, n as f64)))
}

fn write_line(out: &mut Option<BufWriter<File>>, path: &Path, line: &str) -> Result<()> {
    if let Some(w) = out.as_mut() {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Masked multi-objective pretraining. When `out_dir` is given, writes
/// `train_log.jsonl` and `best.ckpt` there.
pub fn pretrain(
    train: &[ProductRecord],
    valid: &[ProductRecord],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if model_cfg.vocab_size != vocab.size() {
        return Err(Error::InvalidConfig(format!(
            "model vocabulary {} differs from tokenizer vocabulary {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    let train_set = prepare(train, vocab, model_cfg);
    let valid_set = prepare(valid, vocab, model_cfg);
    let valid_batches = validation_batches(&valid_set, model_cfg, cfg.optim.batch_size, derive_seed(seed, "valid"))?;

    let mut model = Model::<f32>::new(model_cfg.clone(), derive_seed(seed, "init"))?;
    let mut opt = AdamW::from_config(&model.params, &cfg.optim);
    let mut sampler = Sampler::new(train_set.len(), stream(seed, "order"));
    let mut rngs = ExampleRngs::new(seed, "train-");
    let mut dropout = stream(seed, "dropout");

    let log_path = out_dir.map(|d| d.join("train_log.jsonl"));
    let partial_log = log_path.as_deref().map(crate::partial_path);
    let mut log = match &partial_log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let log_p = partial_log.clone().unwrap_or_default();

    let mut train_log = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.optim.batch_size);
        let examples = idx
            .iter()
            .map(|&i| pretrain_example(&train_set, i, model_cfg, &mut rngs, true))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = make_batch(&examples, model_cfg.max_title_len, PAD_ID)?;
        if cfg.matched_only {
            batch = batch.matched_only();
        }
        let out = pretraining_step(&model, &batch, &cfg.weights, Some(&mut dropout), true)?;
        let r = out.report;
        let mut grads = out.grads.expect("gradients requested");
        if !r.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step });
        }
        if let Some(c) = cfg.optim.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step, &cfg.optim);
        opt.step(&mut model.params, &grads, lr);
        let rec = TrainRecord {
            step,
            lr,
            itm: r.itm,
            mlm: r.mlm,
            gmlm: r.gmlm,
            mim: r.mim,
            gmim: r.gmim,
            total: r.total,
        };
        train_log.push(rec);
        if step % cfg.log_every == 0 {
            log::info!("step {step} lr {lr:.2e} total {:.4} itm {:.4}", r.total, r.itm);
            write_line(&mut log, &log_p, &serde_json::to_string(&rec).expect("serializable"))?;
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (loss, itm_accuracy) = evaluate(&model, &valid_batches, &cfg.weights, cfg.matched_only)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let e = EvalRecord { step, loss, itm_accuracy };
            log::info!("valid step {step} total {:.4} itm acc {:.4}", loss.total, itm_accuracy);
            let mut line = serde_json::to_value(e).expect("serializable");
            line["split"] = "valid".into();
            write_line(&mut log, &log_p, &line.to_string())?;
            evals.push(e);
            let losses: Vec<f64> = evals.iter().map(|e| e.loss.total).collect();
            if select_checkpoint(&losses) == Some(evals.len() - 1) {
                if let Some(d) = out_dir {
                    save_checkpoint(&model, &d.join("best.ckpt"))?;
                }
                best = Some((step, loss.total, model.clone()));
            }
        }
    }
    if let (Some(mut w), Some(p), Some(final_p)) = (log, partial_log, log_path) {
        w.flush().map_err(|e| Error::io(&p, e))?;
        drop(w);
        fs::rename(&p, &final_p).map_err(|e| Error::io(&final_p, e))?;
    }
    let (best_step, _, model) = best.expect("at least one evaluation ran");
    Ok(PretrainOutcome {
        model,
        best_step,
        evals,
        train_log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl FinetuneConfig {
    /// Full-scale fine-tuning settings.
    pub fn full() -> Self {
        Self {
            lr: 1e-5,
            warmup_ratio: 0.06,
            batch_size: 64,
            max_epochs: 10,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    /// Desk-scale settings.
    pub fn desk() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid fine-tuning settings: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc1: f64,
    pub valid_acc5: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Weights after the epoch with the best validation Acc@1.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Classifier logits for each record, in order.
pub fn predict_logits(model: &Model<f32>, records: &[PreparedRecord], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for batch in eval_batches(records, &model.config, batch_size) {
        let batch = batch?;
        let fwd = model.forward(&batch, None)?;
        let rows: Vec<usize> = (0..batch.size).map(|b| fwd.layout.row(b, 0)).collect();
        let logits = model.classifier_logits(&fwd.hidden.gather_rows(&rows));
        out.extend((0..logits.rows).map(|r| logits.row(r).to_vec()));
    }
    Ok(out)
}

/// Adds a linear head over `[CLS]` and trains the whole network with
/// cross-entropy on leaf labels.
pub fn finetune_classifier(
    pretrained: &Model<f32>,
    train: &[ProductRecord],
    valid: &[ProductRecord],
    vocab: &Vocab,
    n_classes: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if let Some(r) = train.iter().chain(valid).find(|r| r.leaf_category as usize >= n_classes) {
        return Err(Error::InvalidConfig(format!(
            "record {} has leaf {} outside {n_classes} classes",
            r.id, r.leaf_category
        )));
    }
    let mcfg = pretrained.config.clone();
    let train_set = prepare(train, vocab, &mcfg);
    let valid_set = prepare(valid, vocab, &mcfg);
    let valid_labels: Vec<usize> = valid_set.iter().map(|r| r.leaf as usize).collect();
    let mut model = pretrained.clone().with_classifier(n_classes, derive_seed(seed, "classifier"))?;
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;
    let warmup = ((cfg.warmup_ratio * total as f64).round() as usize).max(1);
    let mut sampler = Sampler::new(train_set.len(), stream(seed, "finetune-order"));
    let mut aug = stream(seed, "finetune-augment");
    let mut dropout = stream(seed, "finetune-dropout");

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut remaining = train_set.len();
        while remaining > 0 {
            let size = remaining.min(cfg.batch_size);
            remaining -= size;
            step += 1;
            let idx = sampler.next_batch(size);
            let examples = idx
                .iter()
                .map(|&i| {
                    let r = &train_set[i];
                    let p = data::image_patches(&r.image, &mcfg, &mut aug, true)?;
                    Ok(crate::masking::TrainingExample::unmasked(r.tokens.clone(), p, mcfg.patch_dim()))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].leaf as usize).collect();
            let batch = make_batch(&examples, mcfg.max_title_len, PAD_ID)?;
            let fwd = model.forward(&batch, Some(&mut dropout))?;
            let rows: Vec<usize> = (0..batch.size).map(|b| fwd.layout.row(b, 0)).collect();
            let h_cls = fwd.hidden.gather_rows(&rows);
            let logits = model.classifier_logits(&h_cls);
            let (loss, dlogits) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            loss_sum += loss * size as f64;
            let mut grads = model.params.zeros_like();
            let dcls = model.classifier_backward(&h_cls, &dlogits, &mut grads);
            let mut dh = Mat::zeros(fwd.hidden.rows, fwd.hidden.cols);
            for (r, &i) in rows.iter().enumerate() {
                dh.row_mut(i).copy_from_slice(dcls.row(r));
            }
            model.backward(&fwd, &dh, &mut grads);
            opt.step(&mut model.params, &grads, lr_schedule(step, cfg.lr, warmup, total));
        }
        let logits = predict_logits(&model, &valid_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            valid_acc1: acc_at_k(&logits, &valid_labels, 1),
            valid_acc5: acc_at_k(&logits, &valid_labels, 5),
        };
        log::info!(
            "epoch {epoch} loss {:.4} valid acc@1 {:.4} acc@5 {:.4}",
            rec.train_loss,
            rec.valid_acc1,
            rec.valid_acc5
        );
        history.push(rec);
        if best.as_ref().is_none_or(|b| rec.valid_acc1 > b.1) {
            best = Some((epoch, rec.valid_acc1, model.clone()));
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        model,
        best_epoch,
        history,
    })
}
