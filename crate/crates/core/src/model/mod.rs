//! Single-stream image–text transformer with hand-written backpropagation.
//!
//! The encoder consumes `[CLS] patch_1..patch_N [SEP] tok_1..tok_T [SEP]`
//! and produces one hidden state per slot. Pretraining heads live in
//! [`heads`]; embeddings for retrieval come from [`Model::embed`].

mod checkpoint;
mod encoder;
mod heads;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{Block, BlockCache, Layout};
pub use heads::{GlobalCache, HeadCache};
use layers::{apply_mask, dropout_mask, DenseGeluNorm, LayerNorm, Linear, LnCache, INIT_STD};
use params::{Grads, Init, ParamId, ParamStore};

use crate::masking::TrainingBatch;
use crate::rng::Rng;
use crate::tensor::{Mat, Real};
use crate::text::{CLS_ID, PAD_ID, SEP_ID};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_title_len: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub dropout: f64,
    /// Width of the optional classification head; 0 when absent.
    #[serde(default)]
    pub n_classes: usize,
}

impl ModelConfig {
    /// BERT-base geometry over 224-pixel images.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size,
            max_title_len: crate::text::MAX_TITLE_LEN,
            image_side: 224,
            patch_size: 16,
            dropout: 0.1,
            n_classes: 0,
        }
    }

    /// Geometry that trains on a single CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_dim: 512,
            image_side: 64,
            dropout: 0.0,
            ..Self::base(vocab_size)
        }
    }

    /// Smallest useful model, for tests and gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn_dim: 32,
            image_side: 32,
            max_title_len: 8,
            ..Self::base(vocab_size)
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Number of position-embedding rows: the longest possible sequence.
    pub fn max_seq_len(&self) -> usize {
        3 + self.n_patches() + self.max_title_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) || self.image_side == 0 {
            return bad(format!(
                "image side {} is not a positive multiple of patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.vocab_size <= crate::text::NUM_SPECIALS as usize {
            return bad(format!("vocabulary of {} has no room beyond specials", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Parameter handles for every sub-module.
#[derive(Clone, Debug)]
pub(crate) struct Modules {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub type_emb: ParamId,
    pub patch_proj: Linear,
    pub mask_bias: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub itm: Linear,
    pub mlm_transform: DenseGeluNorm,
    pub mlm_bias: ParamId,
    pub mim: Linear,
    pub gmlm: [DenseGeluNorm; 2],
    pub gmim: [DenseGeluNorm; 2],
    pub gmim_out: Linear,
    pub classifier: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) m: Modules,
}

/// Cached activations of one encoder pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// Final hidden states, `[batch · S, H]`.
    pub hidden: Mat<T>,
    pub layout: Layout,
    patches: Mat<T>,
    placeholder: Vec<bool>,
    token_ids: Vec<u32>,
    drop_emb: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
}

impl<T> Forward<T> {
    pub fn block_caches(&self) -> &[BlockCache<T>] {
        &self.blocks
    }
}

/// Pooled embeddings of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriple {
    /// Hidden state at `[CLS]`.
    pub global: Vec<f32>,
    /// Mean hidden state over title tokens.
    pub text: Vec<f32>,
    /// Mean hidden state over image patches.
    pub vision: Vec<f32>,
}

fn register<T: Real>(cfg: &ModelConfig, ps: &mut ParamStore<T>, rng: &mut Rng) -> Modules {
    let h = cfg.hidden;
    let normal = Init::Normal(INIT_STD);
    let tok_emb = ps.add("embed.token", &[cfg.vocab_size, h], Init::Normal(INIT_STD), true, rng);
    let pos_emb = ps.add("embed.position", &[cfg.max_seq_len(), h], Init::Normal(INIT_STD), true, rng);
    let type_emb = ps.add("embed.segment", &[2, h], Init::Normal(INIT_STD), true, rng);
    let patch_proj = Linear::new(ps, "embed.patch", cfg.patch_dim(), h, rng);
    let mask_bias = ps.add("embed.mask_bias", &[h], normal, false, rng);
    let blocks = (0..cfg.layers)
        .map(|l| Block::new(ps, &format!("layer{l}"), h, cfg.ffn_dim, rng))
        .collect();
    let final_ln = LayerNorm::new(ps, "final_norm", h, rng);
    let itm = Linear::new(ps, "head.itm", h, 2, rng);
    let mlm_transform = DenseGeluNorm::new(ps, "head.mlm", h, h, rng);
    let mlm_bias = ps.add("head.mlm.vocab_bias", &[cfg.vocab_size], Init::Zeros, false, rng);
    let mim = Linear::new(ps, "head.mim", h, cfg.patch_dim(), rng);
    let gmlm = [
        DenseGeluNorm::new(ps, "head.gmlm.0", 2 * h, h, rng),
        DenseGeluNorm::new(ps, "head.gmlm.1", h, h, rng),
    ];
    let gmim = [
        DenseGeluNorm::new(ps, "head.gmim.0", 2 * h, h, rng),
        DenseGeluNorm::new(ps, "head.gmim.1", h, h, rng),
    ];
    let gmim_out = Linear::new(ps, "head.gmim.out", h, cfg.patch_dim(), rng);
    let classifier = (cfg.n_classes > 0).then(|| Linear::new(ps, "head.classifier", h, cfg.n_classes, rng));
    Modules {
        tok_emb,
        pos_emb,
        type_emb,
        patch_proj,
        mask_bias,
        blocks,
        final_ln,
        itm,
        mlm_transform,
        mlm_bias,
        mim,
        gmlm,
        gmim,
        gmim_out,
        classifier,
    }
}

impl<T: Real> Model<T> {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = register(&config, &mut params, &mut rng);
        Ok(Self { config, params, m })
    }

    /// Wraps existing parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, mut params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", fresh.params.len(), params.len()),
            ));
        }
        for (want, got) in fresh.params.iter().zip(params.iter_mut()) {
            got.decay = want.decay;
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} {:?} does not match {} {:?}", got.name, got.shape, want.name, want.shape),
                ));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            m: self.m.clone(),
        }
    }

    /// Adds a freshly initialised classification head, replacing any
    /// existing one.
    pub fn with_classifier(mut self, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidConfig(format!("classifier needs at least 2 classes, got {n_classes}")));
        }
        let old = std::mem::take(&mut self.params);
        let keep: Vec<_> = old.iter().filter(|p| !p.name.starts_with("head.classifier")).cloned().collect();
        self.config.n_classes = n_classes;
        let mut rng = Rng::seed_from_u64(seed);
        let mut fresh = ParamStore::new();
        self.m = register(&self.config, &mut fresh, &mut rng);
        for (p, k) in fresh.iter_mut().zip(keep) {
            debug_assert_eq!(p.name, k.name);
            *p = k;
        }
        self.params = fresh;
        Ok(self)
    }

    pub fn n_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, batch: &TrainingBatch) -> Result<()> {
        let c = &self.config;
        if batch.n_patches != c.n_patches() || batch.patch_dim != c.patch_dim() {
            return Err(Error::InvalidConfig(format!(
                "batch has {} patches of dim {}, model expects {} of dim {}",
                batch.n_patches,
                batch.patch_dim,
                c.n_patches(),
                c.patch_dim()
            )));
        }
        if batch.title_len > c.max_title_len {
            return Err(Error::InvalidConfig(format!(
                "title length {} exceeds maximum {}",
                batch.title_len, c.max_title_len
            )));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::InvalidConfig(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Runs the encoder. Dropout is active only when `rng` is given.
    pub fn forward(&self, batch: &TrainingBatch, mut rng: Option<&mut Rng>) -> Result<Forward<T>> {
        self.check_batch(batch)?;
        let layout = Layout {
            batch: batch.size,
            n_patches: batch.n_patches,
            title_len: batch.title_len,
            title_lens: batch.title_lens.clone(),
        };
        let h = self.config.hidden;
        let s = layout.seq_len();
        let ps = &self.params;
        let patches = Mat::from_vec(
            batch.size * batch.n_patches,
            batch.patch_dim,
            batch.patches.iter().map(|&v| T::of(v as f64)).collect(),
        );
        let proj = self.m.patch_proj.forward(ps, &patches);
        let (tok, pos, typ, mb) = (
            ps.get(self.m.tok_emb),
            ps.get(self.m.pos_emb),
            ps.get(self.m.type_emb),
            ps.get(self.m.mask_bias),
        );
        let mut x = Mat::zeros(batch.size * s, h);
        for b in 0..batch.size {
            for slot in 0..s {
                let row = x.row_mut(layout.row(b, slot));
                let add = |row: &mut [T], src: &[T]| row.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                if (1..=layout.n_patches).contains(&slot) {
                    let i = slot - 1;
                    add(row, proj.row(b * layout.n_patches + i));
                    if batch.placeholder[b * layout.n_patches + i] {
                        add(row, mb);
                    }
                } else {
                    let id = slot_token(batch, &layout, b, slot) as usize;
                    add(row, &tok[id * h..(id + 1) * h]);
                }
                add(row, &pos[slot * h..(slot + 1) * h]);
                let seg = layout.segment(slot);
                add(row, &typ[seg * h..(seg + 1) * h]);
            }
        }
        let p = self.config.dropout;
        let drop_emb = match rng.as_deref_mut() {
            Some(r) if p > 0.0 => Some(dropout_mask(x.data.len(), p, r)),
            _ => None,
        };
        apply_mask(&mut x, drop_emb.as_ref());

        let mut blocks = Vec::with_capacity(self.m.blocks.len());
        for blk in &self.m.blocks {
            let (y, cache) = blk.forward(ps, &x, &layout, self.config.heads, rng.as_deref_mut().map(|r| (p, r)));
            blocks.push(cache);
            x = y;
        }
        let (hidden, final_ln) = self.m.final_ln.forward(ps, &x);
        Ok(Forward {
            hidden,
            layout,
            patches,
            placeholder: batch.placeholder.clone(),
            token_ids: batch.token_ids.clone(),
            drop_emb,
            blocks,
            final_ln,
        })
    }

    /// Backpropagates `d_hidden` (same shape as `fwd.hidden`) through the
    /// encoder and embeddings.
    pub fn backward(&self, fwd: &Forward<T>, d_hidden: &Mat<T>, grads: &mut Grads<T>) {
        let ps = &self.params;
        let layout = &fwd.layout;
        let h = self.config.hidden;
        let s = layout.seq_len();
        let mut dx = self.m.final_ln.backward(ps, &fwd.final_ln, d_hidden, grads);
        for (blk, cache) in self.m.blocks.iter().zip(&fwd.blocks).rev() {
            dx = blk.backward(ps, cache, &dx, layout, self.config.heads, grads);
        }
        apply_mask(&mut dx, fwd.drop_emb.as_ref());

        let np = layout.n_patches;
        let mut dproj = Mat::zeros(layout.batch * np, h);
        let add = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
        for b in 0..layout.batch {
            for slot in 0..s {
                let g = dx.row(layout.row(b, slot));
                add(&mut grads.get_mut(self.m.pos_emb)[slot * h..(slot + 1) * h], g);
                let seg = layout.segment(slot);
                add(&mut grads.get_mut(self.m.type_emb)[seg * h..(seg + 1) * h], g);
                if (1..=np).contains(&slot) {
                    let i = slot - 1;
                    dproj.row_mut(b * np + i).copy_from_slice(g);
                    if fwd.placeholder[b * np + i] {
                        add(grads.get_mut(self.m.mask_bias), g);
                    }
                } else {
                    let id = slot_token_raw(&fwd.token_ids, layout, b, slot) as usize;
                    add(&mut grads.get_mut(self.m.tok_emb)[id * h..(id + 1) * h], g);
                }
            }
        }
        self.m.patch_proj.backward_params(&fwd.patches, &dproj, grads);
    }

    /// Pooled embeddings for unmasked pairs, evaluated without dropout.
    pub fn embed(&self, batch: &TrainingBatch) -> Result<Vec<EmbeddingTriple>> {
        let fwd = self.forward(batch, None)?;
        let layout = &fwd.layout;
        let h = self.config.hidden;
        let mean = |slots: &mut dyn Iterator<Item = usize>, b: usize| {
            let mut acc = vec![0.0f64; h];
            let mut n = 0usize;
            for s in slots {
                for (a, &v) in acc.iter_mut().zip(fwd.hidden.row(layout.row(b, s))) {
                    *a += v.f64();
                }
                n += 1;
            }
            acc.iter().map(|&a| if n == 0 { 0.0 } else { (a / n as f64) as f32 }).collect::<Vec<f32>>()
        };
        Ok((0..layout.batch)
            .map(|b| EmbeddingTriple {
                global: fwd.hidden.row(layout.row(b, 0)).iter().map(|v| v.f64() as f32).collect(),
                text: mean(&mut (0..layout.title_lens[b]).map(|j| layout.token_slot(j)), b),
                vision: mean(&mut (0..layout.n_patches).map(|i| layout.patch_slot(i)), b),
            })
            .collect())
    }
}

fn slot_token(batch: &TrainingBatch, layout: &Layout, b: usize, slot: usize) -> u32 {
    slot_token_raw(&batch.token_ids, layout, b, slot)
}

/// Token-table row used at a non-patch slot.
fn slot_token_raw(token_ids: &[u32], layout: &Layout, b: usize, slot: usize) -> u32 {
    if slot == 0 {
        CLS_ID
    } else if slot == layout.first_sep_slot() || slot == layout.last_sep_slot(b) {
        SEP_ID
    } else if slot > layout.last_sep_slot(b) {
        PAD_ID
    } else {
        token_ids[b * layout.title_len + slot - layout.token_slot(0)]
    }
}
