//! Flat `key = value` run configuration.
//!
//! One file format covers model, decode, retention, training, corpus and
//! per-command inputs. Every key has a `--kebab-case` flag twin. Resolution
//! order is defaults, then the file, then flags; the resolved text is what
//! every output embeds, and it parses back to the same configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::str::FromStr;

use elastic_dllm::decode::{DecodeConfig, DecodeMode};
use elastic_dllm::layout::{AnchorAttention, AnchorConfig, AnchorContent, PositionMode};
use elastic_dllm::model::{ModelConfig, TokenId};
use elastic_dllm::train::{CorpusTask, SyntheticCorpusSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const CONFIG_ENV: &str = "ELASTIC_DLLM_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub struct Key {
    /// Flag spelling; the file key is the same with `_` for `-`.
    pub flag: &'static str,
    pub help: &'static str,
}

const fn key(flag: &'static str, help: &'static str) -> Key {
    Key { flag, help }
}

/// Every key in resolved-output order.
pub const KEYS: &[Key] = &[
    key("vocab-size", "vocabulary size, including the four special tokens"),
    key("d-model", "residual width"),
    key("num-heads", "attention heads per layer"),
    key("num-layers", "transformer layers"),
    key("d-ff", "MLP hidden width"),
    key("theta-base", "RoPE frequency base"),
    key("init-seed", "weight initialization seed"),
    key("pad-id", "[PAD] token id"),
    key("bos-id", "[BOS] token id"),
    key("eos-id", "[EOS] token id"),
    key("mask-id", "[MASK] token id"),
    key("mode", "baseline | elastic | elastic_fold | block_anchor"),
    key("gen-len", "generation length"),
    key("block-size", "tokens per block"),
    key("steps-per-block", "denoising steps per block"),
    key("temperature", "sampling temperature (only 0 is supported)"),
    key(
        "eos-early-stop",
        "stop block_anchor decoding once a block commits [EOS]",
    ),
    key("r", "uniform samples kept per future middle block"),
    key("recent-blocks", "decoded blocks kept dense when folding"),
    key("fold-width", "representatives kept per folded block"),
    key("fold-enabled", "fold older history in elastic mode"),
    key("position-mode", "preserved | compact_rank"),
    key("anchor-content", "mask_token | eos_token | none"),
    key("anchor-attention", "main_only_sees | bidirectional"),
    key("steps", "training steps"),
    key("batch-size", "training batch size"),
    key("learning-rate", "SGD learning rate"),
    key("seed", "training and decoding seed"),
    key("task", "count_sequence | copy_reverse"),
    key("seq-len", "corpus sequence length"),
    key("max-value", "largest value in the corpus"),
    key("corpus-size", "number of corpus examples"),
    key("corpus-seed", "corpus generation seed"),
    key("prompt", "prompt token ids, comma separated"),
    key("prompt-len", "prompt length for `cost`; 0 uses the prompt"),
    key("capture-step", "decode step whose inputs are dumped"),
    key("layer", "layer(s) to dump, comma separated, or `all`"),
    key("head", "head(s) to dump, comma separated, or `all`"),
];

pub fn file_key(flag: &str) -> String {
    flag.replace('-', "_")
}

/// Comma-separated indices, or every index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexList {
    All,
    Some(Vec<usize>),
}

impl IndexList {
    pub fn resolve(&self, limit: usize) -> Vec<usize> {
        match self {
            IndexList::All => (0..limit).collect(),
            IndexList::Some(v) => v.clone(),
        }
    }
}

impl Display for IndexList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IndexList::All => f.write_str("all"),
            IndexList::Some(v) => f.write_str(&join(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub corpus: SyntheticCorpusSpec,
    pub prompt: Vec<TokenId>,
    pub prompt_len: usize,
    pub capture_step: usize,
    pub layer: IndexList,
    pub head: IndexList,
    /// `None` runs block_anchor without an anchor.
    pub anchor_content: Option<AnchorContent>,
    pub anchor_attention: AnchorAttention,
    /// File keys set by a file or flag rather than left at their default.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            train: TrainConfig::default(),
            corpus: SyntheticCorpusSpec::default(),
            prompt: vec![1, 4],
            prompt_len: 0,
            capture_step: 0,
            layer: IndexList::All,
            head: IndexList::All,
            anchor_content: Some(AnchorContent::default()),
            anchor_attention: AnchorAttention::default(),
            explicit: BTreeSet::new(),
        }
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, reason: impl Display) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn indices(key: &str, value: &str) -> Result<IndexList, ConfigError> {
    if value == "all" {
        return Ok(IndexList::All);
    }
    let v = list(key, value)?;
    if v.is_empty() {
        return Err(bad(key, value, "expected `all` or at least one index"));
    }
    Ok(IndexList::Some(v))
}

fn enum_value<T: DeserializeOwned>(key: &str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|e| bad(key, value, e))
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("unit enum expected, got {other:?}"),
    }
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let m = &mut self.model;
        let d = &mut self.decode;
        let r = &mut d.retention;
        match key {
            "vocab_size" => m.vocab_size = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "num_heads" => m.num_heads = num(key, value)?,
            "num_layers" => m.num_layers = num(key, value)?,
            "d_ff" => m.d_ff = num(key, value)?,
            "theta_base" => m.theta_base = num(key, value)?,
            "init_seed" => m.init_seed = num(key, value)?,
            "pad_id" => m.special.pad = num(key, value)?,
            "bos_id" => m.special.bos = num(key, value)?,
            "eos_id" => m.special.eos = num(key, value)?,
            "mask_id" => m.special.mask = num(key, value)?,
            "mode" => d.mode = enum_value::<DecodeMode>(key, value)?,
            "gen_len" => d.gen_len = num(key, value)?,
            "block_size" => d.block_size = num(key, value)?,
            "steps_per_block" => d.steps_per_block = num(key, value)?,
            "temperature" => d.temperature = num(key, value)?,
            "eos_early_stop" => d.eos_early_stop = boolean(key, value)?,
            "r" => r.r = num(key, value)?,
            "recent_blocks" => r.recent_blocks = num(key, value)?,
            "fold_width" => r.fold_width = num(key, value)?,
            "fold_enabled" => r.fold_enabled = boolean(key, value)?,
            "position_mode" => r.position_mode = enum_value::<PositionMode>(key, value)?,
            "anchor_content" => {
                self.anchor_content = match value {
                    "none" => None,
                    _ => Some(enum_value(key, value)?),
                }
            }
            "anchor_attention" => self.anchor_attention = enum_value(key, value)?,
            "steps" => self.train.steps = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "seed" => {
                let s = num(key, value)?;
                self.train.seed = s;
                self.decode.seed = s;
            }
            "task" => self.corpus.task = enum_value::<CorpusTask>(key, value)?,
            "seq_len" => self.corpus.seq_len = num(key, value)?,
            "max_value" => self.corpus.max_value = num(key, value)?,
            "corpus_size" => self.corpus.size = num(key, value)?,
            "corpus_seed" => self.corpus.seed = num(key, value)?,
            "prompt" => self.prompt = list(key, value)?,
            "prompt_len" => self.prompt_len = num(key, value)?,
            "capture_step" => self.capture_step = num(key, value)?,
            "layer" => self.layer = indices(key, value)?,
            "head" => self.head = indices(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.decode.retention.anchor = self.anchor_content.map(|content| AnchorConfig {
            content,
            attention: self.anchor_attention,
        });
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let d = &self.decode;
        let r = &d.retention;
        Some(match key {
            "vocab_size" => m.vocab_size.to_string(),
            "d_model" => m.d_model.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "num_layers" => m.num_layers.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "theta_base" => m.theta_base.to_string(),
            "init_seed" => m.init_seed.to_string(),
            "pad_id" => m.special.pad.to_string(),
            "bos_id" => m.special.bos.to_string(),
            "eos_id" => m.special.eos.to_string(),
            "mask_id" => m.special.mask.to_string(),
            "mode" => d.mode.as_str().to_string(),
            "gen_len" => d.gen_len.to_string(),
            "block_size" => d.block_size.to_string(),
            "steps_per_block" => d.steps_per_block.to_string(),
            "temperature" => d.temperature.to_string(),
            "eos_early_stop" => d.eos_early_stop.to_string(),
            "r" => r.r.to_string(),
            "recent_blocks" => r.recent_blocks.to_string(),
            "fold_width" => r.fold_width.to_string(),
            "fold_enabled" => r.fold_enabled.to_string(),
            "position_mode" => enum_name(&r.position_mode),
            "anchor_content" => self.anchor_content.as_ref().map_or("none".to_string(), enum_name),
            "anchor_attention" => enum_name(&self.anchor_attention),
            "steps" => self.train.steps.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "seed" => self.train.seed.to_string(),
            "task" => enum_name(&self.corpus.task),
            "seq_len" => self.corpus.seq_len.to_string(),
            "max_value" => self.corpus.max_value.to_string(),
            "corpus_size" => self.corpus.size.to_string(),
            "corpus_seed" => self.corpus.seed.to_string(),
            "prompt" => join(&self.prompt),
            "prompt_len" => self.prompt_len.to_string(),
            "capture_step" => self.capture_step.to_string(),
            "layer" => self.layer.to_string(),
            "head" => self.head.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Fully resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| {
                let name = file_key(k.flag);
                let value = self.get(&name).expect("every listed key is readable");
                format!("{name} = {value}\n")
            })
            .collect()
    }

    /// `to_text` as `# `-prefixed comment lines for CSV headers.
    pub fn to_comment(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }

    /// Prompt length for analytic cost: `prompt_len`, or the prompt's own length.
    pub fn cost_prompt_len(&self) -> usize {
        if self.prompt_len > 0 {
            self.prompt_len
        } else {
            self.prompt.len()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("mode = block_anchor\nanchor_attention = bidirectional\nanchor_content = eos\nlearning_rate = 0.1\nlayer = 0,1")
            .unwrap();
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.decode, cfg.decode);
        assert_eq!(
            back.decode.retention.anchor,
            Some(AnchorConfig {
                content: AnchorContent::EosToken,
                attention: AnchorAttention::Bidirectional
            })
        );
        assert!(text.contains("anchor_content = eos_token\n"));
        assert!(text.contains("learning_rate = 0.1\n"));
    }

    #[test]
    fn every_key_is_settable() {
        let defaults = RunConfig::default();
        for k in KEYS {
            let name = file_key(k.flag);
            let value = defaults.get(&name).unwrap();
            let mut cfg = RunConfig::default();
            cfg.set(&name, &value).unwrap();
            assert_eq!(cfg.to_text(), defaults.to_text(), "{name}");
        }
    }

    #[test]
    fn anchor_none_and_order_independence() {
        let a = RunConfig::from_text("anchor_attention = bidirectional\nanchor_content = none").unwrap();
        assert_eq!(a.decode.retention.anchor, None);
        let b = RunConfig::from_text("anchor_attention = bidirectional\nanchor_content = mask").unwrap();
        assert_eq!(
            b.decode.retention.anchor.unwrap().attention,
            AnchorAttention::Bidirectional
        );
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(
            RunConfig::from_text("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_text("r = x"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("just text"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::from_text("layer = "),
            Err(ConfigError::BadValue { .. })
        ));
    }
}
