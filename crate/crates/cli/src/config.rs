//! Run configuration as flat `section.key=value` lines.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use item_core::data_synth::SynthConfig;
use item_core::model::ModelConfig;
use item_core::trainer::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Target vocabulary size for the desk tokenizer.
pub const DESK_VOCAB_TARGET: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub vocab_target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    /// `vocab_size` is taken from the tokenizer output at run time.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            tokenizer: TokenizerConfig {
                vocab_target: DESK_VOCAB_TARGET,
            },
            model: ModelConfig::desk(DESK_VOCAB_TARGET),
            pretrain: PretrainConfig::desk(),
            finetune: FinetuneConfig::desk(),
            eval: EvalConfig { k: 10, batch_size: 64 },
        }
    }
}

/// Keys derived from others and never set directly.
const DERIVED_KEYS: [&str; 2] = ["synth.seed", "model.vocab_size"];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses `text` into a value shaped like `like`.
fn parse_like(like: &Value, text: &str, key: &str) -> Result<Value> {
    let text = text.trim();
    let bad = || anyhow!("invalid value {text:?} for {key}");
    if !matches!(like, Value::Array(_) | Value::Object(_)) && text.eq_ignore_ascii_case("none") {
        return Ok(Value::Null);
    }
    Ok(match like {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(text.parse::<u64>().map_err(|_| bad())?),
        Value::Null if text.parse::<u64>().is_ok() => Value::from(text.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) | Value::Null => {
            let x: f64 = text.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(text.to_string()),
        Value::Array(items) => {
            let parts: Vec<&str> = text.split(',').collect();
            if parts.len() != items.len() {
                bail!("{key} expects {} comma-separated values", items.len());
            }
            Value::Array(
                items
                    .iter()
                    .zip(parts)
                    .map(|(it, p)| parse_like(it, p, key))
                    .collect::<Result<_>>()?,
            )
        }
        Value::Object(_) => bail!("{key} is a section, not a value"),
    })
}

fn lookup<'a>(root: &'a mut Map<String, Value>, key: &str) -> Result<&'a mut Value> {
    let mut parts = key.split('.');
    let first = parts.next().unwrap_or_default();
    let mut cur = root.get_mut(first).ok_or_else(|| anyhow!("unknown config key {key}"))?;
    for p in parts {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(p))
            .ok_or_else(|| anyhow!("unknown config key {key}"))?;
    }
    Ok(cur)
}

impl RunConfig {
    /// Applies `key=value` overrides in order.
    pub fn apply<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        let mut root = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        for a in assignments {
            let a = a.as_ref();
            let (key, value) = a.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {a:?}"))?;
            let key = key.trim();
            if DERIVED_KEYS.contains(&key) {
                bail!("{key} is derived and cannot be set");
            }
            let slot = lookup(&mut root, key)?;
            *slot = parse_like(slot, value, key)?;
        }
        *self = serde_json::from_value(Value::Object(root)).context("config does not deserialize")?;
        self.resolve();
        Ok(())
    }

    /// Reads a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        self.apply(&lines).with_context(|| format!("in {}", path.display()))
    }

    /// Ties derived fields to their sources.
    pub fn resolve(&mut self) {
        self.synth.seed = self.seed;
        self.model.image_side = self.synth.image_side;
    }

    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut lines);
        lines
            .into_iter()
            .filter(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.eval.k == 0 || self.eval.batch_size == 0 {
            bail!("eval.k and eval.batch_size must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply(&["pretrain.optim.grad_clip=1.5", "synth.matches_per_query=1,3", "seed=11"]).unwrap();
        let text = c.to_text();
        let lines: Vec<&str> = text.lines().collect();
        let mut d = RunConfig::default();
        d.apply(&lines).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.synth.seed, 11);
        assert_eq!(d.synth.matches_per_query, (1, 3));
        assert_eq!(d.pretrain.optim.grad_clip, Some(1.5));
    }

    #[test]
    fn none_clears_optional() {
        let mut c = RunConfig::default();
        c.apply(&["pretrain.optim.grad_clip=2"]).unwrap();
        c.apply(&["pretrain.optim.grad_clip=none"]).unwrap();
        assert_eq!(c.pretrain.optim.grad_clip, None);
        assert!(c.apply(&["seed=none"]).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.apply(&["nope=1"]).is_err());
        assert!(c.apply(&["seed"]).is_err());
        assert!(c.apply(&["seed=-1"]).is_err());
        assert!(c.apply(&["synth.seed=3"]).is_err());
        assert!(c.apply(&["synth=3"]).is_err());
        assert!(c.apply(&["pretrain.matched_only=yes"]).is_err());
    }

    #[test]
    fn default_k_is_ten() {
        assert_eq!(RunConfig::default().eval.k, 10);
    }
}
