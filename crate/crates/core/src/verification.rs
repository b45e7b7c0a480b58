//! Independent oracles: finite-difference gradients, empirical masking
//! rates and brute-force metric recomputation.

use std::collections::BTreeSet;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::masking::{make_batch, mask_patches, mask_tokens, TrainingBatch, TrainingExample};
use crate::masking::{PATCH_MASK_SHARE, SELECT_PROB, TOKEN_MASK_SHARE, TOKEN_RANDOM_SHARE};
use crate::model::params::{Grads, ParamId};
use crate::model::{Model, ModelConfig};
use crate::objectives::{pretraining_step, LossWeights};
use crate::retrieval::{acc_at_k, map_at_k, mar_at_k, Hit, QueryResult, RetrievalRun};
use crate::rng::Rng;
use crate::tensor::Real;
use crate::text::{MASK_ID, NUM_SPECIALS, PAD_ID};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

impl OracleReport {
    /// Passes when the deviation that the check gates on is within
    /// `tolerance`.
    fn new(check: &str, abs: f64, rel: f64, gate: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            check: check.into(),
            max_abs_dev: abs,
            max_rel_dev: rel,
            tolerance,
            pass: gate <= tolerance,
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Small masked batch that exercises every head: each example has at least
/// one masked token and one masked patch, and both ITM labels occur.
pub fn probe_batch(cfg: &ModelConfig, seed: u64) -> Result<TrainingBatch> {
    let mut rng = Rng::seed_from_u64(seed);
    let lens = [cfg.max_title_len.min(5), cfg.max_title_len.min(3), 1];
    let mut examples = Vec::new();
    for (e, &len) in lens.iter().enumerate() {
        let ids: Vec<u32> = (0..len)
            .map(|_| rng.random_range(NUM_SPECIALS..cfg.vocab_size as u32))
            .collect();
        let patches: Vec<f32> = (0..cfg.n_patches() * cfg.patch_dim()).map(|_| rng.random()).collect();
        let ex = loop {
            let ex = TrainingExample::masked(&ids, &patches, cfg.patch_dim(), cfg.vocab_size, (e % 2) as u8, &mut rng);
            if !ex.token_targets.is_empty() && !ex.patch_targets.is_empty() {
                break ex;
            }
        };
        examples.push(ex);
    }
    make_batch(&examples, cfg.max_title_len, PAD_ID)
}

/// Every parameter tensor gets at least one probe; the rest are spread at
/// random until `n` entries are chosen.
fn sample_entries(sizes: &[usize], n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out: BTreeSet<(usize, usize)> = sizes.iter().enumerate().map(|(p, &s)| (p, rng.random_range(0..s))).collect();
    let total: usize = sizes.iter().sum();
    while out.len() < n.min(total) {
        let p = rng.random_range(0..sizes.len());
        out.insert((p, rng.random_range(0..sizes[p])));
    }
    out.into_iter().collect()
}

fn loss_at<T: Real>(model: &Model<T>, batch: &TrainingBatch, w: &LossWeights, dropout_seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(dropout_seed);
    Ok(pretraining_step(model, batch, w, Some(&mut rng), false)?.report.total)
}

fn analytic<T: Real>(model: &Model<T>, batch: &TrainingBatch, w: &LossWeights, dropout_seed: u64) -> Result<Grads<T>> {
    let mut rng = Rng::seed_from_u64(dropout_seed);
    Ok(pretraining_step(model, batch, w, Some(&mut rng), true)?
        .grads
        .expect("requested"))
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients compare on an absolute scale.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite differences (h = 1e-6, float64) against analytic
/// gradients of the weighted total loss, over `n_samples` entries spanning
/// every parameter tensor. Dropout uses a fixed mask.
pub fn grad_check(cfg: &ModelConfig, seed: u64, n_samples: usize) -> Result<OracleReport> {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    let batch = probe_batch(cfg, seed ^ 0x5eed)?;
    let w = LossWeights::default();
    let grads = analytic(&model, &batch, &w, seed)?;
    let sizes: Vec<usize> = model.params.iter().map(|p| p.data.len()).collect();
    let mut rng = Rng::seed_from_u64(seed ^ 0xfd);
    let entries = sample_entries(&sizes, n_samples, &mut rng);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for &(p, k) in &entries {
        let id = ParamId(p);
        let orig = model.params.get(id)[k];
        model.params.get_mut(id)[k] = orig + H;
        let up = loss_at(&model, &batch, &w, seed)?;
        model.params.get_mut(id)[k] = orig - H;
        let down = loss_at(&model, &batch, &w, seed)?;
        model.params.get_mut(id)[k] = orig;
        let fd = (up - down) / (2.0 * H);
        let an = grads.get(id)[k];
        max_abs = max_abs.max((fd - an).abs());
        max_rel = max_rel.max(rel_err(fd, an, FLOOR));
    }
    Ok(OracleReport::new("grad_check_f64", max_abs, max_rel, max_rel, 1e-3, entries.len()))
}

/// Float32 analytic gradients against float64 central differences of the
/// same weights.
pub fn grad_check_f32(cfg: &ModelConfig, seed: u64, n_samples: usize, floor: f64) -> Result<OracleReport> {
    const H: f64 = 1e-6;
    let model32 = Model::<f32>::new(cfg.clone(), seed)?;
    let mut model = model32.cast::<f64>();
    let batch = probe_batch(cfg, seed ^ 0x5eed)?;
    let w = LossWeights::default();
    let grads = analytic(&model32, &batch, &w, seed)?;
    let sizes: Vec<usize> = model.params.iter().map(|p| p.data.len()).collect();
    let mut rng = Rng::seed_from_u64(seed ^ 0xfd);
    let entries = sample_entries(&sizes, n_samples, &mut rng);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for &(p, k) in &entries {
        let id = ParamId(p);
        let orig = model.params.get(id)[k];
        model.params.get_mut(id)[k] = orig + H;
        let up = loss_at(&model, &batch, &w, seed)?;
        model.params.get_mut(id)[k] = orig - H;
        let down = loss_at(&model, &batch, &w, seed)?;
        model.params.get_mut(id)[k] = orig;
        let fd = (up - down) / (2.0 * H);
        let an = f64::from(grads.get(id)[k]);
        max_abs = max_abs.max((fd - an).abs());
        max_rel = max_rel.max(rel_err(fd, an, floor));
    }
    Ok(OracleReport::new("grad_check_f32", max_abs, max_rel, max_rel, 1e-3, entries.len()))
}

/// With every loss weight at zero, all gradients vanish.
pub fn zero_weight_check(cfg: &ModelConfig, seed: u64) -> Result<OracleReport> {
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let batch = probe_batch(cfg, seed)?;
    let g = analytic(&model, &batch, &LossWeights::zero(), seed)?;
    let max = g.data.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(OracleReport::new("zero_weight_gradients", max, 0.0, max, 0.0, g.data.iter().map(Vec::len).sum()))
}

/// Trains only the global heads and checks that the gradient reaching the
/// final hidden states is confined to the `[CLS]` rows. Then backpropagates
/// with those rows zeroed and checks that no transformer block receives any
/// gradient. `gmim` selects the patch head instead of the token head.
pub fn global_head_probe(cfg: &ModelConfig, seed: u64, gmim: bool) -> Result<OracleReport> {
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let batch = probe_batch(cfg, seed)?;
    let w = if gmim {
        LossWeights { gmim: 1.0, ..LossWeights::zero() }
    } else {
        LossWeights { gmlm: 1.0, ..LossWeights::zero() }
    };
    let out = pretraining_step(&model, &batch, &w, None, true)?;
    let dh = out.d_hidden.expect("requested");
    let fwd = model.forward(&batch, None)?;
    let layout = &fwd.layout;
    let cls: BTreeSet<usize> = (0..layout.batch).map(|b| layout.row(b, 0)).collect();
    let mut leak = 0.0f64;
    let mut cls_mass = 0.0f64;
    for r in 0..dh.rows {
        let m = dh.row(r).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if cls.contains(&r) {
            cls_mass = cls_mass.max(m);
        } else {
            leak = leak.max(m);
        }
    }
    let mut cut = dh.clone();
    for &r in &cls {
        cut.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = model.params.zeros_like();
    model.backward(&fwd, &cut, &mut g);
    let block_grad = model
        .params
        .iter()
        .zip(&g.data)
        .filter(|(p, _)| p.name.starts_with("layer"))
        .flat_map(|(_, d)| d.iter())
        .fold(0.0f64, |a, x| a.max(x.abs()));
    // A probe that never reaches CLS would pass vacuously.
    let gate = if cls_mass > 0.0 { leak.max(block_grad) } else { f64::INFINITY };
    let name = if gmim { "gmim_cls_only" } else { "gmlm_cls_only" };
    Ok(OracleReport::new(name, leak.max(block_grad), 0.0, gate, 0.0, dh.rows))
}

/// Empirical masking rates over at least `n_positions` tokens and patches.
pub fn masking_stats(n_positions: usize, rng: &mut Rng) -> Vec<OracleReport> {
    const TITLE: usize = 36;
    const VOCAB: usize = 1000;
    let title: Vec<u32> = (0..TITLE as u32).map(|i| NUM_SPECIALS + i).collect();
    let mut sel_tok = 0usize;
    let mut kept_sel = 0usize;
    let mut masked = 0usize;
    let mut random = 0usize;
    let mut n = 0usize;
    while n < n_positions {
        let m = mask_tokens(&title, VOCAB, rng);
        sel_tok += m.targets.len();
        // Classified from the output ids rather than the recorded actions.
        for &(p, orig) in &m.targets {
            if m.ids[p] == MASK_ID {
                masked += 1;
            } else if m.ids[p] != orig {
                random += 1;
            } else {
                kept_sel += 1;
            }
        }
        n += TITLE;
    }

    const PATCHES: usize = 64;
    const DIM: usize = 2;
    let patches = vec![0.5f32; PATCHES * DIM];
    let (mut sel_patch, mut zeroed, mut kept_patch, mut n_patch) = (0usize, 0usize, 0usize, 0usize);
    while n_patch < n_positions {
        let m = mask_patches(&patches, DIM, rng);
        sel_patch += m.targets.len();
        for (p, _) in &m.targets {
            if m.patches[p * DIM..(p + 1) * DIM].iter().all(|&x| x == 0.0) {
                zeroed += 1;
            } else {
                kept_patch += 1;
            }
        }
        n_patch += PATCHES;
    }

    let rate = |num: usize, den: usize| num as f64 / den.max(1) as f64;
    let check = |name: &str, observed: f64, target: f64, tol: f64, samples: usize| {
        let dev = (observed - target).abs();
        OracleReport::new(name, dev, dev / target, dev, tol, samples)
    };
    vec![
        check("token_select_rate", rate(sel_tok, n), SELECT_PROB, 0.005, n),
        check("token_mask_share", rate(masked, sel_tok), TOKEN_MASK_SHARE, 0.01, sel_tok),
        check("token_random_share", rate(random, sel_tok), TOKEN_RANDOM_SHARE, 0.01, sel_tok),
        check(
            "token_keep_share",
            rate(kept_sel, sel_tok),
            1.0 - TOKEN_MASK_SHARE - TOKEN_RANDOM_SHARE,
            0.01,
            sel_tok,
        ),
        check("patch_select_rate", rate(sel_patch, n_patch), SELECT_PROB, 0.005, n_patch),
        check("patch_zero_share", rate(zeroed, sel_patch), PATCH_MASK_SHARE, 0.01, sel_patch),
        check("patch_keep_share", rate(kept_patch, sel_patch), 1.0 - PATCH_MASK_SHARE, 0.01, sel_patch),
    ]
}

fn oracle_recall(results: &[String], relevant: &[String], k: usize) -> f64 {
    let mut found = 0.0;
    for r in relevant {
        for h in results.iter().take(k) {
            if h == r {
                found += 1.0;
                break;
            }
        }
    }
    found / relevant.len() as f64
}

fn oracle_ap(results: &[String], relevant: &[String], k: usize) -> f64 {
    let is_rel = |id: &String| relevant.iter().any(|r| r == id);
    let mut total = 0.0;
    for i in 0..k.min(results.len()) {
        if is_rel(&results[i]) {
            let prefix_hits = results[..=i].iter().filter(|x| is_rel(x)).count();
            total += prefix_hits as f64 / (i + 1) as f64;
        }
    }
    let denom = if k < relevant.len() { k } else { relevant.len() };
    total / denom as f64
}

fn oracle_acc(logits: &[Vec<f32>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
        if order.iter().take(k).any(|&c| c == y) {
            hits += 1;
        }
    }
    hits as f64 / logits.len() as f64
}

/// Recomputes MAR@k, MAP@k and Acc@k by brute force on `n_trials` random
/// small instances and reports the largest disagreement.
pub fn metric_oracle(n_trials: usize, rng: &mut Rng) -> Vec<OracleReport> {
    let (mut dev_mar, mut dev_map, mut dev_acc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n_trials {
        let pool = rng.random_range(5..30);
        let n_queries = rng.random_range(1..6);
        let k = rng.random_range(1..15);
        let mut queries = Vec::new();
        let (mut mar_sum, mut map_sum) = (0.0, 0.0);
        for q in 0..n_queries {
            let mut ids: Vec<String> = (0..pool).map(|i| format!("i{i}")).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.random_range(0..=i));
            }
            let len = rng.random_range(0..=pool);
            let results: Vec<String> = ids[..len].to_vec();
            let n_rel = rng.random_range(1..=pool.min(6));
            let relevant: Vec<String> = (0..n_rel).map(|_| format!("i{}", rng.random_range(0..pool))).collect::<BTreeSet<_>>().into_iter().collect();
            mar_sum += oracle_recall(&results, &relevant, k);
            map_sum += oracle_ap(&results, &relevant, k);
            queries.push(QueryResult {
                query: format!("q{q}"),
                results: results.iter().map(|id| Hit { id: id.clone(), score: 0.0 }).collect(),
                relevant: relevant.into_iter().collect(),
            });
        }
        let run = RetrievalRun { queries };
        dev_mar = dev_mar.max((mar_at_k(&run, k) - mar_sum / n_queries as f64).abs());
        dev_map = dev_map.max((map_at_k(&run, k) - map_sum / n_queries as f64).abs());

        let classes = rng.random_range(2..12);
        let rows = rng.random_range(1..10);
        // Coarse values make ties common.
        let logits: Vec<Vec<f32>> = (0..rows)
            .map(|_| (0..classes).map(|_| rng.random_range(0..5) as f32 * 0.5).collect())
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        for kk in [1, 5] {
            dev_acc = dev_acc.max((acc_at_k(&logits, &labels, kk) - oracle_acc(&logits, &labels, kk)).abs());
        }
    }
    let mut map_example = RetrievalRun {
        queries: vec![QueryResult {
            query: "q".into(),
            results: ["a", "x", "b"].iter().map(|s| Hit { id: s.to_string(), score: 0.0 }).collect(),
            relevant: ["a", "b"].iter().map(|s| s.to_string()).collect(),
        }],
    };
    let example_dev = (map_at_k(&map_example, 10) - 5.0 / 6.0).abs();
    map_example.queries.clear();
    vec![
        OracleReport::new("mar_at_k_oracle", dev_mar, 0.0, dev_mar, 1e-12, n_trials),
        OracleReport::new("map_at_k_oracle", dev_map, 0.0, dev_map, 1e-12, n_trials),
        OracleReport::new("acc_at_k_oracle", dev_acc, 0.0, dev_acc, 1e-12, n_trials),
        OracleReport::new("map_example_ranks_1_3", example_dev, 0.0, example_dev, 1e-12, 1),
    ]
}

/// The full on-demand oracle suite.
pub fn run_all(seed: u64) -> Result<Vec<OracleReport>> {
    let cfg = ModelConfig::tiny(50);
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = vec![
        grad_check(&cfg, seed, 200)?,
        grad_check_f32(&cfg, seed, 200, GRAD_F32_FLOOR)?,
        zero_weight_check(&cfg, seed)?,
        global_head_probe(&cfg, seed, false)?,
        global_head_probe(&cfg, seed, true)?,
    ];
    out.extend(masking_stats(1_000_000, &mut rng));
    out.extend(metric_oracle(1000, &mut rng));
    Ok(out)
}

/// Denominator floor for the float32 gradient comparison.
pub const GRAD_F32_FLOOR: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_batch_exercises_every_head() {
        let b = probe_batch(&ModelConfig::tiny(50), 1).unwrap();
        assert!(b.itm_labels.contains(&0) && b.itm_labels.contains(&1));
        for e in 0..b.size {
            assert!(b.token_targets.iter().any(|t| t.example == e));
            assert!(b.patch_targets.iter().any(|t| t.example == e));
        }
    }

    #[test]
    fn sampled_entries_cover_every_tensor() {
        let sizes = [3, 1, 50, 7];
        let e = sample_entries(&sizes, 20, &mut Rng::seed_from_u64(0));
        assert_eq!(e.len(), 20);
        for p in 0..sizes.len() {
            assert!(e.iter().any(|&(q, _)| q == p));
        }
    }

    #[test]
    fn oracles_agree_with_hand_values() {
        let r: Vec<String> = ["a", "x", "b"].iter().map(|s| s.to_string()).collect();
        let rel: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!((oracle_ap(&r, &rel, 10) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(oracle_recall(&r, &rel, 1), 0.5);
        assert_eq!(oracle_acc(&[vec![1.0, 1.0]], &[1], 1), 0.0);
    }

    #[test]
    fn small_metric_oracle_passes() {
        let reports = metric_oracle(50, &mut Rng::seed_from_u64(3));
        assert!(reports.iter().all(|r| r.pass), "{reports:?}");
    }
}
