//! Exact embedding search with max-fusion scoring and retrieval /
//! classification metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::model::EmbeddingTriple;
use crate::data_synth::ProductRecord;
use crate::model::Model;
use crate::text::Vocab;
use crate::trainer::{eval_batches, prepare};
use crate::{Error, Result};

/// Unit-length copy of `v`; the zero vector stays zero.
pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Borrowed view of one normalised triple.
#[derive(Clone, Copy, Debug)]
pub struct TripleRef<'a> {
    pub global: &'a [f32],
    pub text: &'a [f32],
    pub vision: &'a [f32],
}

impl TripleRef<'_> {
    pub fn to_triple(&self) -> EmbeddingTriple {
        EmbeddingTriple {
            global: self.global.to_vec(),
            text: self.text.to_vec(),
            vision: self.vision.to_vec(),
        }
    }
}

impl EmbeddingTriple {
    pub fn normalized(&self) -> Self {
        Self {
            global: l2_normalize(&self.global),
            text: l2_normalize(&self.text),
            vision: l2_normalize(&self.vision),
        }
    }

    pub fn as_ref(&self) -> TripleRef<'_> {
        TripleRef {
            global: &self.global,
            text: &self.text,
            vision: &self.vision,
        }
    }
}

/// `[s_global, s_text, s_vision]` for two normalised triples.
pub fn component_scores(q: TripleRef<'_>, i: TripleRef<'_>) -> [f64; 3] {
    [dot(q.global, i.global), dot(q.text, i.text), dot(q.vision, i.vision)]
}

/// Max fusion of the three cosine similarities.
pub fn pair_score(q: TripleRef<'_>, i: TripleRef<'_>) -> f64 {
    component_scores(q, i).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Immutable, normalised embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    global: Vec<f32>,
    text: Vec<f32>,
    vision: Vec<f32>,
}

const STORE_MAGIC: &str = "emb-v1";

impl EmbeddingIndex {
    /// Normalises and packs `triples`; all must share one dimension.
    pub fn build(ids: Vec<String>, triples: &[EmbeddingTriple]) -> Result<Self> {
        if ids.len() != triples.len() {
            return Err(Error::InvalidConfig(format!("{} ids for {} embeddings", ids.len(), triples.len())));
        }
        let dim = triples.first().map_or(0, |t| t.global.len());
        let mut index = Self {
            ids,
            dim,
            global: Vec::with_capacity(dim * triples.len()),
            text: Vec::with_capacity(dim * triples.len()),
            vision: Vec::with_capacity(dim * triples.len()),
        };
        for t in triples {
            if [t.global.len(), t.text.len(), t.vision.len()] != [dim; 3] {
                return Err(Error::InvalidConfig("embedding dimensions differ".into()));
            }
            if t.global.iter().chain(&t.text).chain(&t.vision).any(|x| !x.is_finite()) {
                return Err(Error::Degenerate("non-finite embedding value".into()));
            }
            let n = t.normalized();
            index.global.extend(n.global);
            index.text.extend(n.text);
            index.vision.extend(n.vision);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> TripleRef<'_> {
        let r = i * self.dim..(i + 1) * self.dim;
        TripleRef {
            global: &self.global[r.clone()],
            text: &self.text[r.clone()],
            vision: &self.vision[r],
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{STORE_MAGIC}\n{}\n{}\n", self.len(), self.dim).into_bytes();
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        for block in [&self.global, &self.text, &self.vision] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = crate::partial_path(path);
        fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: &str| Error::format("embedding store", r.to_string());
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8"))
        };
        if line()? != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let count: usize = line()?.parse().map_err(|_| bad("bad count"))?;
        let dim: usize = line()?.parse().map_err(|_| bad("bad dimension"))?;
        let ids = (0..count).map(|_| line()).collect::<Result<Vec<_>>>()?;
        let n = count * dim;
        let data = &bytes[pos..];
        if data.len() != 3 * 4 * n {
            return Err(bad("data block size does not match header"));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            ids,
            dim,
            global: floats[..n].to_vec(),
            text: floats[n..2 * n].to_vec(),
            vision: floats[2 * n..].to_vec(),
        })
    }
}

/// Raw (unnormalised) triples for `records`, in order, without augmentation
/// or dropout.
pub fn embed_records(model: &Model<f32>, records: &[ProductRecord], vocab: &Vocab, batch_size: usize) -> Result<Vec<EmbeddingTriple>> {
    let set = prepare(records, vocab, &model.config);
    let mut out = Vec::with_capacity(records.len());
    for batch in eval_batches(&set, &model.config, batch_size) {
        out.extend(model.embed(&batch?)?);
    }
    Ok(out)
}

pub fn embed_catalog(model: &Model<f32>, records: &[ProductRecord], vocab: &Vocab, batch_size: usize) -> Result<EmbeddingIndex> {
    let triples = embed_records(model, records, vocab, batch_size)?;
    EmbeddingIndex::build(records.iter().map(|r| r.id.clone()).collect(), &triples)
}

/// Orders by score descending, then id ascending.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Exact top-`k` index entries for a normalised query triple.
pub fn topk(query: TripleRef<'_>, index: &EmbeddingIndex, k: usize) -> Vec<Hit> {
    let mut scored: Vec<(f64, &str)> = (0..index.len())
        .map(|i| (pair_score(query, index.get(i)), index.ids[i].as_str()))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
        .into_iter()
        .map(|(score, id)| Hit { id: id.to_string(), score })
        .collect()
}

/// Ranked results of one query plus its relevance set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub results: Vec<Hit>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub relevant: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalRun {
    pub queries: Vec<QueryResult>,
}

impl RetrievalRun {
    /// Searches every query against the index. `relevance` maps query ids to
    /// their relevant index ids.
    pub fn search(
        queries: &[(String, EmbeddingTriple)],
        index: &EmbeddingIndex,
        k: usize,
        relevance: &BTreeMap<String, BTreeSet<String>>,
    ) -> Self {
        Self {
            queries: queries
                .iter()
                .map(|(id, t)| {
                    let n = t.normalized();
                    QueryResult {
                        query: id.clone(),
                        results: topk(n.as_ref(), index, k),
                        relevant: relevance.get(id).cloned().unwrap_or_default(),
                    }
                })
                .collect(),
        }
    }

    /// One JSON object per query, without relevance sets.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for q in &self.queries {
            let line = serde_json::json!({ "query": q.query, "results": q.results });
            let _ = writeln!(s, "{line}");
        }
        s
    }

    /// Parses [`Self::to_jsonl`] output and attaches relevance sets.
    pub fn from_jsonl(text: &str, relevance: &BTreeMap<String, BTreeSet<String>>) -> Result<Self> {
        let mut queries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut q: QueryResult = serde_json::from_str(line)
                .map_err(|e| Error::format("results file", format!("line {}: {e}", n + 1)))?;
            q.relevant = relevance.get(&q.query).cloned().unwrap_or_default();
            queries.push(q);
        }
        Ok(Self { queries })
    }
}

/// Relevant index ids per query: index records sharing the query's match
/// group.
pub fn relevance_sets(index: &[ProductRecord], queries: &[ProductRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let groups = crate::data_synth::group_members(index);
    queries
        .iter()
        .filter_map(|q| q.match_group.map(|g| (q.id.clone(), groups.get(&g).cloned().unwrap_or_default())))
        .collect()
}

fn answerable(run: &RetrievalRun) -> impl Iterator<Item = &QueryResult> {
    run.queries.iter().filter(|q| !q.relevant.is_empty())
}

/// Macro-average recall within the top `k`. Queries without relevant items
/// are skipped; an empty run scores 0.
pub fn mar_at_k(run: &RetrievalRun, k: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for q in answerable(run) {
        let hits = q.results.iter().take(k).filter(|h| q.relevant.contains(&h.id)).count();
        sum += hits as f64 / q.relevant.len() as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean average precision truncated at `k`, normalised by
/// `min(k, |relevant|)`.
pub fn map_at_k(run: &RetrievalRun, k: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for q in answerable(run) {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, h) in q.results.iter().take(k).enumerate() {
            if q.relevant.contains(&h.id) {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        sum += ap / k.min(q.relevant.len()) as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Expected MAR@k of a uniformly random ranking over `index_size` items.
pub fn random_mar_at_k(index_size: usize, k: usize) -> f64 {
    if index_size == 0 {
        0.0
    } else {
        k.min(index_size) as f64 / index_size as f64
    }
}

/// Fraction of rows whose true label is among the `k` highest logits.
/// Equal logits rank by class index.
pub fn acc_at_k(logits: &[Vec<f32>], labels: &[usize], k: usize) -> f64 {
    assert_eq!(logits.len(), labels.len());
    if logits.is_empty() {
        return 0.0;
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let t = row[y];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > t || (v == t && j < y))
                .count();
            ahead < k
        })
        .count();
    correct as f64 / logits.len() as f64
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub k: usize,
    pub n: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn search(split: &str, run: &RetrievalRun, k: usize) -> Self {
        let metrics = BTreeMap::from([
            (format!("MAR@{k}"), mar_at_k(run, k)),
            (format!("MAP@{k}"), map_at_k(run, k)),
        ]);
        Self {
            task: "search".into(),
            split: split.into(),
            k,
            n: answerable(run).count(),
            metrics,
        }
    }

    pub fn classify(split: &str, logits: &[Vec<f32>], labels: &[usize]) -> Self {
        let metrics = BTreeMap::from([
            ("Acc@1".to_string(), acc_at_k(logits, labels, 1)),
            ("Acc@5".to_string(), acc_at_k(logits, labels, 5)),
        ]);
        Self {
            task: "classify".into(),
            split: split.into(),
            k: 5,
            n: labels.len(),
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    /// Aligned table with metrics in percent.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<10}{:>8}", "split", "n");
        let mut row = format!("{:<10}{:>8}", self.split, self.n);
        for (name, v) in &self.metrics {
            let _ = write!(header, "{name:>10}");
            let _ = write!(row, "{:>10.2}", v * 100.0);
        }
        format!("{header}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::rng::Rng;

    fn triple(rng: &mut Rng, dim: usize) -> EmbeddingTriple {
        let mut v = || (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        EmbeddingTriple {
            global: v(),
            text: v(),
            vision: v(),
        }
    }

    fn run_of(results: &[&str], relevant: &[&str]) -> RetrievalRun {
        RetrievalRun {
            queries: vec![QueryResult {
                query: "q".into(),
                results: results.iter().map(|id| Hit { id: id.to_string(), score: 0.0 }).collect(),
                relevant: relevant.iter().map(|s| s.to_string()).collect(),
            }],
        }
    }

    #[test]
    fn score_examples() {
        let mut rng = Rng::seed_from_u64(1);
        let t = triple(&mut rng, 8).normalized();
        assert!((pair_score(t.as_ref(), t.as_ref()) - 1.0).abs() < 1e-6);
        let e = |x: f32, y: f32| vec![x, y];
        let q = EmbeddingTriple { global: e(1.0, 0.0), text: e(1.0, 0.0), vision: e(1.0, 0.0) };
        let c = (1.0f32 - 0.81).sqrt();
        let i = EmbeddingTriple { global: e(0.2, (1.0f32 - 0.04).sqrt()), text: e(0.9, c), vision: e(0.5, 0.75f32.sqrt()) };
        assert!((pair_score(q.as_ref(), i.as_ref()) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn metric_examples() {
        let run = run_of(&["a", "x", "b", "y"], &["a", "b"]);
        assert!((map_at_k(&run, 10) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(mar_at_k(&run, 10), 1.0);
        assert_eq!(mar_at_k(&run_of(&["a", "x"], &["a", "b"]), 10), 0.5);
        assert_eq!(map_at_k(&run_of(&["x", "y"], &["a"]), 10), 0.0);
        assert_eq!(map_at_k(&run_of(&["a", "b", "x"], &["a", "b"]), 10), 1.0);
        assert_eq!(random_mar_at_k(5000, 10), 0.002);
    }

    #[test]
    fn accuracy_examples() {
        let logits = vec![vec![0.1, 0.5, 0.3, 0.2, 0.0, -1.0]];
        assert_eq!(acc_at_k(&logits, &[1], 1), 1.0);
        // label 0 is ranked 4th
        assert_eq!(acc_at_k(&logits, &[0], 5), 1.0);
        assert_eq!(acc_at_k(&logits, &[0], 3), 0.0);
        assert_eq!(acc_at_k(&logits, &[5], 5), 0.0);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = Rng::seed_from_u64(2);
        for trial in 0..20 {
            let n = 200;
            let triples: Vec<_> = (0..n).map(|_| triple(&mut rng, 6)).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("id{:03}", (i * 7919) % 1000)).collect();
            let index = EmbeddingIndex::build(ids, &triples).unwrap();
            let q = triple(&mut rng, 6).normalized();
            let k = [1, 10, 50, 500][trial % 4];
            let got = topk(q.as_ref(), &index, k);
            let mut all: Vec<(f64, String)> = (0..n).map(|i| (pair_score(q.as_ref(), index.get(i)), index.ids()[i].clone())).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            assert_eq!(got.len(), k.min(n));
            for (h, (s, id)) in got.iter().zip(&all) {
                assert_eq!((&h.id, h.score), (id, *s));
            }
            assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn ties_break_by_id() {
        let t = EmbeddingTriple { global: vec![1.0, 0.0], text: vec![1.0, 0.0], vision: vec![1.0, 0.0] };
        let index = EmbeddingIndex::build(vec!["b".into(), "a".into(), "c".into()], &[t.clone(), t.clone(), t.clone()]).unwrap();
        let ids: Vec<_> = topk(t.as_ref(), &index, 2).into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn index_rows_are_unit_norm_and_store_round_trips() {
        let mut rng = Rng::seed_from_u64(3);
        let triples: Vec<_> = (0..5).map(|_| triple(&mut rng, 4)).collect();
        let index = EmbeddingIndex::build((0..5).map(|i| format!("idx-{i}")).collect(), &triples).unwrap();
        for i in 0..5 {
            let t = index.get(i);
            for v in [t.global, t.text, t.vision] {
                assert!((dot(v, v).sqrt() - 1.0).abs() < 1e-5);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        index.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p).unwrap(), index);
        fs::write(&p, b"emb-v1\n2\n4\na\nb\n").unwrap();
        assert!(EmbeddingIndex::load(&p).is_err());
    }

    #[test]
    fn results_file_round_trip() {
        let run = run_of(&["a", "b"], &["a"]);
        let rel = BTreeMap::from([("q".to_string(), BTreeSet::from(["a".to_string()]))]);
        assert_eq!(RetrievalRun::from_jsonl(&run.to_jsonl(), &rel).unwrap(), run);
        assert!(RetrievalRun::from_jsonl("{", &rel).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricReport::search("test", &run_of(&["a"], &["a"]), 10);
        assert_eq!(r.metrics["MAR@10"], 1.0);
        assert!(r.to_table().contains("100.00"));
        assert!(!r.to_json().contains('\n'));
    }

    proptest! {
        #[test]
        fn fusion_dominates_each_component(seed in 0u64..1000) {
            let mut rng = Rng::seed_from_u64(seed);
            let q = triple(&mut rng, 5).normalized();
            let i = triple(&mut rng, 5).normalized();
            let s = pair_score(q.as_ref(), i.as_ref());
            for c in component_scores(q.as_ref(), i.as_ref()) {
                prop_assert!(s >= c);
            }
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
        }

        #[test]
        fn metrics_are_order_invariant_and_monotone(seed in 0u64..500) {
            let mut rng = Rng::seed_from_u64(seed);
            let mut queries = Vec::new();
            for q in 0..5 {
                let results: Vec<Hit> = (0..12).map(|i| Hit { id: format!("{i}"), score: 0.0 }).collect();
                let relevant: BTreeSet<String> = (0..rng.random_range(1..5)).map(|_| format!("{}", rng.random_range(0..20))).collect();
                queries.push(QueryResult { query: format!("q{q}"), results, relevant });
            }
            let run = RetrievalRun { queries: queries.clone() };
            queries.reverse();
            let rev = RetrievalRun { queries };
            prop_assert!((mar_at_k(&run, 5) - mar_at_k(&rev, 5)).abs() < 1e-12);
            prop_assert!((map_at_k(&run, 5) - map_at_k(&rev, 5)).abs() < 1e-12);
            for k in 1..12 {
                prop_assert!(mar_at_k(&run, k) <= mar_at_k(&run, k + 1) + 1e-12);
            }
        }
    }
}
