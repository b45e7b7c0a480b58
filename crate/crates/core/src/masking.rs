//! Pretraining example assembly: image-text pair sampling, token and patch
//! masking, and batch packing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::text::{MASK_ID, NUM_SPECIALS};

pub const SELECT_PROB: f64 = 0.15;
/// Share of selected tokens replaced by `[MASK]`; half the remainder becomes
/// a random token and the other half is left unchanged.
pub const TOKEN_MASK_SHARE: f64 = 0.8;
pub const TOKEN_RANDOM_SHARE: f64 = 0.1;
/// Share of selected patches replaced by the zero placeholder.
pub const PATCH_MASK_SHARE: f64 = 0.8;
pub const ITM_POSITIVE_PROB: f64 = 0.5;

/// What happened to one selected token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAction {
    Masked,
    Randomized,
    Kept,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchAction {
    Zeroed,
    Kept,
}

/// Picks the title for an image-text pair: with probability 0.5 the
/// record's own title (label 1), otherwise the title of a uniformly random
/// other record (label 0). Returns `(title record index, label)`.
pub fn sample_itm_pair<R: Rng + ?Sized>(record: usize, catalog_len: usize, rng: &mut R) -> Result<(usize, u8)> {
    if catalog_len < 2 {
        return Err(Error::Degenerate(
            "image-text matching needs at least two records to draw a mismatched title".into(),
        ));
    }
    if rng.random_bool(ITM_POSITIVE_PROB) {
        return Ok((record, 1));
    }
    let mut other = rng.random_range(0..catalog_len - 1);
    if other >= record {
        other += 1;
    }
    Ok((other, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub ids: Vec<u32>,
    /// `(position, original id)`, ascending by position.
    pub targets: Vec<(usize, u32)>,
    pub actions: Vec<TokenAction>,
}

/// Token masking: every position is selected independently with
/// probability 0.15; a selected token becomes `[MASK]` (80%), a uniformly
/// random non-special token (10%) or stays (10%).
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[u32], vocab_size: usize, rng: &mut R) -> MaskedTokens {
    debug_assert!(ids.iter().all(|&i| i >= NUM_SPECIALS), "special ids in title");
    let mut out = MaskedTokens {
        ids: ids.to_vec(),
        targets: Vec::new(),
        actions: Vec::new(),
    };
    for (pos, &id) in ids.iter().enumerate() {
        if rng.random::<f64>() >= SELECT_PROB {
            continue;
        }
        let r = rng.random::<f64>();
        let action = if r < TOKEN_MASK_SHARE {
            out.ids[pos] = MASK_ID;
            TokenAction::Masked
        } else if r < TOKEN_MASK_SHARE + TOKEN_RANDOM_SHARE {
            out.ids[pos] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
            TokenAction::Randomized
        } else {
            TokenAction::Kept
        };
        out.targets.push((pos, id));
        out.actions.push(action);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatches {
    pub patches: Vec<f32>,
    /// Positions holding the zero placeholder.
    pub placeholders: Vec<usize>,
    /// `(position, original patch)`, ascending by position.
    pub targets: Vec<(usize, Vec<f32>)>,
    pub actions: Vec<PatchAction>,
}

/// Patch masking: each patch is selected with probability 0.15; selected
/// patches are zeroed (80%) or kept (20%).
pub fn mask_patches<R: Rng + ?Sized>(patches: &[f32], patch_dim: usize, rng: &mut R) -> MaskedPatches {
    assert_eq!(patches.len() % patch_dim, 0);
    let mut out = MaskedPatches {
        patches: patches.to_vec(),
        placeholders: Vec::new(),
        targets: Vec::new(),
        actions: Vec::new(),
    };
    for (pos, original) in patches.chunks_exact(patch_dim).enumerate() {
        if rng.random::<f64>() >= SELECT_PROB {
            continue;
        }
        let action = if rng.random::<f64>() < PATCH_MASK_SHARE {
            out.patches[pos * patch_dim..(pos + 1) * patch_dim].fill(0.0);
            out.placeholders.push(pos);
            PatchAction::Zeroed
        } else {
            PatchAction::Kept
        };
        out.targets.push((pos, original.to_vec()));
        out.actions.push(action);
    }
    out
}

/// One image-title pair ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub token_ids: Vec<u32>,
    pub token_targets: Vec<(usize, u32)>,
    pub patches: Vec<f32>,
    pub patch_dim: usize,
    pub placeholders: Vec<usize>,
    pub patch_targets: Vec<(usize, Vec<f32>)>,
    /// 1 = title belongs to the image.
    pub itm_label: u8,
}

impl TrainingExample {
    /// Example without any masking, used for embedding and fine-tuning.
    pub fn unmasked(token_ids: Vec<u32>, patches: Vec<f32>, patch_dim: usize) -> Self {
        Self {
            token_ids,
            token_targets: Vec::new(),
            patches,
            patch_dim,
            placeholders: Vec::new(),
            patch_targets: Vec::new(),
            itm_label: 1,
        }
    }

    /// Masks both modalities in one sampling pass; the resulting targets
    /// feed the local and the global reconstruction heads alike.
    pub fn masked<R: Rng + ?Sized>(
        token_ids: &[u32],
        patches: &[f32],
        patch_dim: usize,
        vocab_size: usize,
        itm_label: u8,
        rng: &mut R,
    ) -> Self {
        let t = mask_tokens(token_ids, vocab_size, rng);
        let p = mask_patches(patches, patch_dim, rng);
        Self {
            token_ids: t.ids,
            token_targets: t.targets,
            patches: p.patches,
            patch_dim,
            placeholders: p.placeholders,
            patch_targets: p.targets,
            itm_label,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patches.len() / self.patch_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenTarget {
    pub example: usize,
    pub position: usize,
    pub id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchTarget {
    pub example: usize,
    pub position: usize,
}

/// Padded batch of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub size: usize,
    /// Padded title length (batch maximum).
    pub title_len: usize,
    pub title_lens: Vec<usize>,
    /// `size × title_len`, padded with `PAD_ID`.
    pub token_ids: Vec<u32>,
    pub n_patches: usize,
    pub patch_dim: usize,
    /// `size × n_patches × patch_dim`.
    pub patches: Vec<f32>,
    /// `size × n_patches`; true where the patch is the zero placeholder.
    pub placeholder: Vec<bool>,
    pub token_targets: Vec<TokenTarget>,
    pub patch_targets: Vec<PatchTarget>,
    /// `patch_targets.len() × patch_dim` original patch values.
    pub patch_target_values: Vec<f32>,
    pub itm_labels: Vec<u8>,
}

impl TrainingBatch {
    /// Token targets restricted to matched pairs.
    pub fn matched_only(&self) -> Self {
        let keep = |e: usize| self.itm_labels[e] == 1;
        let mut out = self.clone();
        out.token_targets.retain(|t| keep(t.example));
        out.patch_targets.clear();
        out.patch_target_values.clear();
        for (i, t) in self.patch_targets.iter().enumerate() {
            if keep(t.example) {
                out.patch_targets.push(*t);
                out.patch_target_values
                    .extend_from_slice(&self.patch_target_values[i * self.patch_dim..(i + 1) * self.patch_dim]);
            }
        }
        out
    }

    pub fn is_pad(&self, example: usize, position: usize) -> bool {
        position >= self.title_lens[example]
    }
}

/// Packs examples, padding titles to the batch maximum (capped at
/// `max_title_len`) with `pad_id`.
pub fn make_batch(examples: &[TrainingExample], max_title_len: usize, pad_id: u32) -> Result<TrainingBatch> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Degenerate("cannot batch zero examples".into()))?;
    let n_patches = first.n_patches();
    let patch_dim = first.patch_dim;
    if examples
        .iter()
        .any(|e| e.patch_dim != patch_dim || e.n_patches() != n_patches)
    {
        return Err(Error::InvalidConfig("patch geometry differs within a batch".into()));
    }
    let title_lens: Vec<usize> = examples
        .iter()
        .map(|e| e.token_ids.len().min(max_title_len))
        .collect();
    let title_len = title_lens.iter().copied().max().unwrap_or(0);
    let size = examples.len();
    let mut batch = TrainingBatch {
        size,
        title_len,
        title_lens,
        token_ids: vec![pad_id; size * title_len],
        n_patches,
        patch_dim,
        patches: Vec::with_capacity(size * n_patches * patch_dim),
        placeholder: vec![false; size * n_patches],
        token_targets: Vec::new(),
        patch_targets: Vec::new(),
        patch_target_values: Vec::new(),
        itm_labels: Vec::with_capacity(size),
    };
    for (b, e) in examples.iter().enumerate() {
        let len = batch.title_lens[b];
        batch.token_ids[b * title_len..b * title_len + len].copy_from_slice(&e.token_ids[..len]);
        batch.token_targets.extend(
            e.token_targets
                .iter()
                .filter(|&&(p, _)| p < len)
                .map(|&(position, id)| TokenTarget {
                    example: b,
                    position,
                    id,
                }),
        );
        batch.patches.extend_from_slice(&e.patches);
        for &p in &e.placeholders {
            batch.placeholder[b * n_patches + p] = true;
        }
        for (position, values) in &e.patch_targets {
            batch.patch_targets.push(PatchTarget {
                example: b,
                position: *position,
            });
            batch.patch_target_values.extend_from_slice(values);
        }
        batch.itm_labels.push(e.itm_label);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::text::PAD_ID;

    #[test]
    fn itm_needs_two_records() {
        assert!(sample_itm_pair(0, 1, &mut stream(1, "itm")).is_err());
    }

    #[test]
    fn itm_negatives_come_from_other_records() {
        let mut rng = stream(2, "itm");
        let (mut pos, n) = (0usize, 100_000);
        for i in 0..n {
            let rec = i % 7;
            let (src, label) = sample_itm_pair(rec, 7, &mut rng).unwrap();
            if label == 1 {
                assert_eq!(src, rec);
                pos += 1;
            } else {
                assert_ne!(src, rec);
            }
        }
        let mean = pos as f64 / n as f64;
        assert!((mean - 0.5).abs() <= 0.01, "label mean {mean}");
    }

    #[test]
    fn empty_title_masks_to_nothing() {
        let m = mask_tokens(&[], 100, &mut stream(0, "m"));
        assert!(m.ids.is_empty() && m.targets.is_empty());
    }

    #[test]
    fn masking_is_reproducible_and_restorable() {
        let ids: Vec<u32> = (0..500).map(|i| 5 + i % 90).collect();
        let a = mask_tokens(&ids, 100, &mut stream(9, "m"));
        let b = mask_tokens(&ids, 100, &mut stream(9, "m"));
        assert_eq!(a, b);
        assert!(a.targets.windows(2).all(|w| w[0].0 < w[1].0));
        let mut restored = a.ids.clone();
        for &(p, id) in &a.targets {
            restored[p] = id;
        }
        assert_eq!(restored, ids);
        assert!(a.ids.iter().all(|&i| i == MASK_ID || (5..100).contains(&i)));
    }

    #[test]
    fn zeroed_patches_are_exactly_zero_and_restorable() {
        let dim = 12;
        let patches: Vec<f32> = (0..dim * 400).map(|i| 0.1 + (i % 7) as f32 * 0.1).collect();
        let m = mask_patches(&patches, dim, &mut stream(3, "p"));
        assert!(!m.placeholders.is_empty());
        for &p in &m.placeholders {
            assert!(m.patches[p * dim..(p + 1) * dim].iter().all(|&v| v == 0.0));
        }
        let mut restored = m.patches.clone();
        for (p, v) in &m.targets {
            restored[p * dim..(p + 1) * dim].copy_from_slice(v);
        }
        assert_eq!(restored, patches);
    }

    #[test]
    fn batch_pads_and_keeps_targets() {
        let dim = 3;
        let a = TrainingExample {
            token_ids: vec![10, 3, 12],
            token_targets: vec![(1, 11)],
            patches: vec![0.5; 2 * dim],
            patch_dim: dim,
            placeholders: vec![1],
            patch_targets: vec![(1, vec![0.25; dim])],
            itm_label: 1,
        };
        let b = TrainingExample {
            itm_label: 0,
            ..TrainingExample::unmasked(vec![20], vec![0.1; 2 * dim], dim)
        };
        let batch = make_batch(&[a, b], 36, PAD_ID).unwrap();
        assert_eq!(batch.title_len, 3);
        assert_eq!(batch.token_ids, vec![10, 3, 12, 20, PAD_ID, PAD_ID]);
        assert!(batch.is_pad(1, 1) && !batch.is_pad(0, 2));
        assert_eq!(batch.placeholder, vec![false, true, false, false]);
        assert_eq!(batch.token_targets, vec![TokenTarget { example: 0, position: 1, id: 11 }]);
        assert_eq!(batch.patch_target_values, vec![0.25; dim]);
        let m = batch.matched_only();
        assert_eq!(m.token_targets.len(), 1);

        let long = TrainingExample::unmasked((0..50).map(|i| 5 + i).collect(), vec![0.0; dim], dim);
        assert_eq!(make_batch(&[long], 36, PAD_ID).unwrap().title_len, 36);
        assert!(make_batch(&[], 36, PAD_ID).is_err());
    }
}
