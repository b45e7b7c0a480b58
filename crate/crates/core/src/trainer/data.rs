//! Turning catalog records into model-ready examples.

use rand::seq::SliceRandom;

use crate::data_synth::ProductRecord;
use crate::image::{augment, patchify, RgbImage};
use crate::masking::{make_batch, sample_itm_pair, TrainingBatch, TrainingExample};
use crate::model::ModelConfig;
use crate::rng::{stream, Rng};
use crate::text::{Vocab, PAD_ID};
use crate::Result;

/// A record with its title already tokenized.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub image: RgbImage,
    pub leaf: u32,
}

pub fn prepare(records: &[ProductRecord], vocab: &Vocab, cfg: &ModelConfig) -> Vec<PreparedRecord> {
    records
        .iter()
        .map(|r| PreparedRecord {
            id: r.id.clone(),
            tokens: vocab.encode(&r.title, cfg.max_title_len),
            image: r.image.clone(),
            leaf: r.leaf_category,
        })
        .collect()
}

/// Patches of `image` after the given augmentation mode.
pub fn image_patches(image: &RgbImage, cfg: &ModelConfig, rng: &mut Rng, train_mode: bool) -> Result<Vec<f32>> {
    Ok(patchify(&augment(image, rng, train_mode, cfg.image_side), cfg.patch_size)?.patches)
}

/// Unmasked, unaugmented example for embedding and evaluation.
pub fn eval_example(rec: &PreparedRecord, cfg: &ModelConfig) -> Result<TrainingExample> {
    let mut unused = stream(0, "unused");
    let patches = image_patches(&rec.image, cfg, &mut unused, false)?;
    Ok(TrainingExample::unmasked(rec.tokens.clone(), patches, cfg.patch_dim()))
}

/// Batches of unmasked evaluation examples in record order.
pub fn eval_batches<'a>(
    records: &'a [PreparedRecord],
    cfg: &'a ModelConfig,
    batch_size: usize,
) -> impl Iterator<Item = Result<TrainingBatch>> + 'a {
    records.chunks(batch_size.max(1)).map(move |chunk| {
        let ex = chunk.iter().map(|r| eval_example(r, cfg)).collect::<Result<Vec<_>>>()?;
        make_batch(&ex, cfg.max_title_len, PAD_ID)
    })
}

/// Independent random streams used while building pretraining batches.
#[derive(Clone, Debug)]
pub struct ExampleRngs {
    pub itm: Rng,
    pub augment: Rng,
    pub mask: Rng,
}

impl ExampleRngs {
    pub fn new(seed: u64, prefix: &str) -> Self {
        Self {
            itm: stream(seed, &format!("{prefix}itm")),
            augment: stream(seed, &format!("{prefix}augment")),
            mask: stream(seed, &format!("{prefix}mask")),
        }
    }
}

/// One masked ITM example anchored on record `idx`: the image of `idx`
/// paired with its own title (label 1) or another record's title (label 0).
pub fn pretrain_example(
    set: &[PreparedRecord],
    idx: usize,
    cfg: &ModelConfig,
    rngs: &mut ExampleRngs,
    train_mode: bool,
) -> Result<TrainingExample> {
    let (title_idx, label) = sample_itm_pair(idx, set.len(), &mut rngs.itm)?;
    let patches = image_patches(&set[idx].image, cfg, &mut rngs.augment, train_mode)?;
    Ok(TrainingExample::masked(
        &set[title_idx].tokens,
        &patches,
        cfg.patch_dim(),
        cfg.vocab_size,
        label,
        &mut rngs.mask,
    ))
}

/// Epoch-wise shuffled index stream.
#[derive(Clone, Debug)]
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}
