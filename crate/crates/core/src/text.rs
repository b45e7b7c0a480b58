//! Byte-pair-encoding vocabulary over product titles.
//!
//! Titles are lowercased and split on whitespace; the last symbol of every
//! word carries an end-of-word marker so decoding can restore word breaks.
//! Training greedily merges the most frequent adjacent pair, breaking ties by
//! lexicographic pair order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

/// Default cap on encoded title length.
pub const MAX_TITLE_LEN: usize = 36;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
    /// Set when training ran out of pairs before reaching the requested size.
    pub truncated: bool,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn normalized_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Number of distinct initial symbols in `corpus`.
pub fn base_symbol_count<S: AsRef<str>>(corpus: &[S]) -> usize {
    corpus
        .iter()
        .flat_map(|t| normalized_words(t.as_ref()).flat_map(|w| word_symbols(&w)).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Learns merges until the vocabulary (specials + base symbols + merged
/// tokens) reaches `target_size`, or no pair is left.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for title in corpus {
        for w in normalized_words(title.as_ref()) {
            *words.entry(word_symbols(&w)).or_insert(0) += 1;
        }
    }
    if words.is_empty() {
        return Err(Error::InvalidConfig("BPE corpus has no words".into()));
    }
    let base: BTreeSet<String> = words.keys().flatten().cloned().collect();
    let floor = base.len() + SPECIALS.len();
    if target_size < floor {
        return Err(Error::InvalidConfig(format!(
            "target vocab size {target_size} is below specials + base symbols = {floor}"
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();
    let mut truncated = false;

    let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
    while tokens.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += n;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some(((l, r), _)) = counts
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |best, (pair, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((pair, c)),
            })
        else {
            truncated = true;
            break;
        };
        let (left, right) = (l.to_string(), r.to_string());
        drop(counts);
        for (syms, _) in &mut words {
            merge_pair(syms, &left, &right);
        }
        let merged = format!("{left}{right}");
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((left, right));
    }
    if truncated {
        log::warn!(
            "BPE corpus exhausted at {} tokens (requested {target_size})",
            tokens.len()
        );
    }
    Ok(Vocab::from_parts(merges, tokens, truncated))
}

impl Vocab {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>, truncated: bool) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            tokens,
            token_to_id,
            merge_rank,
            truncated,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = word_symbols(word);
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (l, r) = &self.merges[rank];
            merge_pair(&mut syms, l, r);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK_ID)));
    }

    /// Encodes a title, truncating to `max_len` ids.
    pub fn encode(&self, title: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in normalized_words(title) {
            if ids.len() >= max_len {
                break;
            }
            self.encode_word(&w, &mut ids);
        }
        ids.truncate(max_len);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD_ID | CLS_ID | SEP_ID => {}
                _ => s.push_str(self.token(id).unwrap_or(SPECIALS[UNK_ID as usize])),
            }
        }
        s.split(END_OF_WORD)
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `bpe-v1 <size>`, merges one per line, a blank line, then `id\ttoken`.
    pub fn to_text(&self) -> String {
        let mut s = format!("bpe-v1 {}\n", self.size());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("vocab file", reason);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let size: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let mut merges = Vec::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::with_capacity(size);
        for line in lines {
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad token line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(bad(format!("token ids not dense at {id:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() != size {
            return Err(bad(format!("header says {size} tokens, table has {}", tokens.len())));
        }
        if tokens.iter().take(SPECIALS.len()).ne(SPECIALS.iter()) {
            return Err(bad("special tokens missing from ids 0-4".into()));
        }
        Ok(Self::from_parts(merges, tokens, false))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_corpus_merges_aa_first() {
        let corpus = vec!["aaab"; 10];
        // base symbols: "a", "b</w>"
        assert_eq!(base_symbol_count(&corpus), 2);
        let v = train_bpe(&corpus, 8).unwrap();
        // hand count: (a,a) occurs twice per word = 20, (a,b</w>) = 10
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
        assert_eq!(v.size(), 8);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b</w>) and (c,d</w>) both occur once
        let v = train_bpe(&["ab cd"], 10).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn floor_target_means_zero_merges() {
        let corpus = ["hello world"];
        let floor = base_symbol_count(&corpus) + 5;
        let v = train_bpe(&corpus, floor).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), floor);
        assert!(train_bpe(&corpus, floor - 1).is_err());
    }

    #[test]
    fn small_corpus_sets_truncated_flag() {
        let v = train_bpe(&["ab"], 1000).unwrap();
        assert!(v.truncated);
        assert_eq!(v.size(), 5 + 2 + 1);
    }

    #[test]
    fn retraining_is_deterministic() {
        let corpus = ["kalo mira tesu", "mira kalo vono", "tesu tesu kalo"];
        assert_eq!(train_bpe(&corpus, 40).unwrap(), train_bpe(&corpus, 40).unwrap());
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = train_bpe(&["x y z"], 9).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
    }

    #[test]
    fn encode_edge_cases() {
        let v = train_bpe(&["kalo mira tesu"], 30).unwrap();
        assert!(v.encode("", MAX_TITLE_LEN).is_empty());
        let long = vec!["kalo"; 100].join(" ");
        assert_eq!(v.encode(&long, MAX_TITLE_LEN).len(), 36);
        assert_eq!(v.encode("kalo qz", 36).last(), Some(&UNK_ID));
        assert_eq!(v.decode(&v.encode("  KALO   mira ", 36)), "kalo mira");
    }

    #[test]
    fn text_format_round_trips() {
        let v = train_bpe(&["kalo mira tesu", "mira vono"], 25).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("bpe-v1 25\n"));
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back.merges(), v.merges());
        assert_eq!(back.encode("mira tesu", 36), v.encode("mira tesu", 36));
        assert!(Vocab::from_text("bpe-v2 3\n").is_err());
    }

    const SYLLABLES: [&str; 8] = ["ka", "lo", "mi", "ra", "te", "su", "vo", "ne"];

    fn title_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::collection::vec(0usize..8, 1..4), 0..50).prop_map(|words| {
            words
                .iter()
                .map(|w| w.iter().map(|&i| SYLLABLES[i]).collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn encoding_invariants(title in title_strategy()) {
            let corpus: Vec<String> = SYLLABLES
                .iter()
                .flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b} {b}{a}{b} {a}")))
                .collect();
            let v = train_bpe(&corpus, 120).unwrap();
            let ids = v.encode(&title, MAX_TITLE_LEN);
            prop_assert!(ids.len() <= MAX_TITLE_LEN);
            prop_assert!(ids.iter().all(|&i| (i as usize) < v.size()));
            let full = v.encode(&title, usize::MAX);
            prop_assert!(full.iter().all(|&i| i >= NUM_SPECIALS));
            prop_assert_eq!(v.decode(&full), title.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
}
