//! Flat `key = value` configuration files for training runs and synthetic
//! corpus generation. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::decoder::DecodeParams;
use crate::model::ModelConfig;
use crate::synth::{SideKind, SynthSpec, SynthTask};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1 });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
    }
    Ok(out)
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn get_usize(map: &BTreeMap<String, String>, key: &str, out: &mut usize) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = v.parse().map_err(|_| bad(key, "expected an integer"))?;
    }
    Ok(())
}

fn get_u64(map: &BTreeMap<String, String>, key: &str, out: &mut u64) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = v.parse().map_err(|_| bad(key, "expected an integer"))?;
    }
    Ok(())
}

fn get_f64(map: &BTreeMap<String, String>, key: &str, out: &mut f64) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = v.parse().map_err(|_| bad(key, "expected a number"))?;
    }
    Ok(())
}

fn get_bool(map: &BTreeMap<String, String>, key: &str, out: &mut bool) -> Result<(), ConfigError> {
    if let Some(v) = map.get(key) {
        *out = match v.as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            _ => return Err(bad(key, "expected true or false")),
        };
    }
    Ok(())
}

/// Training run configuration. Defaults follow the reference regimen
/// (dropout 0.1, label smoothing 0.1, clipping to [-2, 2], 100 topics, 4
/// graph layers, beam 5); sizes are meant to be overridden per run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_e: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub graph_layers: usize,
    pub dec_layers: usize,
    pub topics: usize,
    pub utm_hidden: usize,
    pub visual_dim: usize,
    pub scaled_logits: bool,
    pub normalize_guided_attention: bool,

    pub vocab_max: usize,
    pub vocab_min_freq: usize,
    pub topic_vocab_max: usize,
    pub topic_min_freq: usize,
    pub max_doc_len: usize,
    pub max_side_len: usize,
    pub max_summary_len: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub lambda_utm: f64,
    pub lambda_tri: f64,
    pub tau: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoints_keep: usize,

    pub no_utm: bool,
    pub no_graph: bool,
    pub no_contrastive: bool,
    pub mask_side: bool,

    pub beam: usize,
    pub alpha: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_e: 64,
            heads: 4,
            d_ff: 2048,
            enc_layers: 2,
            graph_layers: 4,
            dec_layers: 2,
            topics: 100,
            utm_hidden: 64,
            visual_dim: 64,
            scaled_logits: false,
            normalize_guided_attention: false,
            vocab_max: 10_000,
            vocab_min_freq: 1,
            topic_vocab_max: 5_000,
            topic_min_freq: 1,
            max_doc_len: 256,
            max_side_len: 32,
            max_summary_len: 32,
            steps: 1_000,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 200,
            dropout: 0.1,
            label_smoothing: 0.1,
            clip_lo: -2.0,
            clip_hi: 2.0,
            lambda_utm: 1.0,
            lambda_tri: 1.0,
            tau: 0.1,
            seed: 7,
            eval_every: 200,
            checkpoints_keep: 5,
            no_utm: false,
            no_graph: false,
            no_contrastive: false,
            mask_side: false,
            beam: 5,
            alpha: 0.8,
            min_len: 2,
            max_len: 32,
            threads: 1,
        }
    }
}

macro_rules! train_keys {
    ($apply:ident, $map:expr, $cfg:expr) => {{
        $apply!(get_usize, d_e);
        $apply!(get_usize, heads);
        $apply!(get_usize, d_ff);
        $apply!(get_usize, enc_layers);
        $apply!(get_usize, graph_layers);
        $apply!(get_usize, dec_layers);
        $apply!(get_usize, topics);
        $apply!(get_usize, utm_hidden);
        $apply!(get_usize, visual_dim);
        $apply!(get_bool, scaled_logits);
        $apply!(get_bool, normalize_guided_attention);
        $apply!(get_usize, vocab_max);
        $apply!(get_usize, vocab_min_freq);
        $apply!(get_usize, topic_vocab_max);
        $apply!(get_usize, topic_min_freq);
        $apply!(get_usize, max_doc_len);
        $apply!(get_usize, max_side_len);
        $apply!(get_usize, max_summary_len);
        $apply!(get_usize, steps);
        $apply!(get_usize, batch_size);
        $apply!(get_f64, lr);
        $apply!(get_usize, warmup_steps);
        $apply!(get_f64, dropout);
        $apply!(get_f64, label_smoothing);
        $apply!(get_f64, clip_lo);
        $apply!(get_f64, clip_hi);
        $apply!(get_f64, lambda_utm);
        $apply!(get_f64, lambda_tri);
        $apply!(get_f64, tau);
        $apply!(get_u64, seed);
        $apply!(get_usize, eval_every);
        $apply!(get_usize, checkpoints_keep);
        $apply!(get_bool, no_utm);
        $apply!(get_bool, no_graph);
        $apply!(get_bool, no_contrastive);
        $apply!(get_bool, mask_side);
        $apply!(get_usize, beam);
        $apply!(get_f64, alpha);
        $apply!(get_usize, min_len);
        $apply!(get_usize, max_len);
        $apply!(get_usize, threads);
    }};
}

const TRAIN_KEYS: &[&str] = &[
    "d_e", "heads", "d_ff", "enc_layers", "graph_layers", "dec_layers", "topics", "utm_hidden",
    "visual_dim", "scaled_logits", "normalize_guided_attention", "vocab_max", "vocab_min_freq",
    "topic_vocab_max", "topic_min_freq", "max_doc_len", "max_side_len", "max_summary_len",
    "steps", "batch_size", "lr", "warmup_steps", "dropout", "label_smoothing", "clip_lo",
    "clip_hi", "lambda_utm", "lambda_tri", "tau", "seed", "eval_every", "checkpoints_keep",
    "no_utm", "no_graph", "no_contrastive", "mask_side", "beam", "alpha", "min_len", "max_len",
    "threads",
];

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let map = parse_kv(text)?;
        for key in map.keys() {
            if !TRAIN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let mut cfg = TrainConfig::default();
        macro_rules! apply {
            ($getter:ident, $field:ident) => {
                $getter(&map, stringify!($field), &mut cfg.$field)?;
            };
        }
        train_keys!(apply, map, cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(bad("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.clip_lo >= self.clip_hi {
            return Err(bad("clip_lo", "clip range must satisfy lo < hi"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(bad("label_smoothing", "must lie in [0, 1)"));
        }
        if self.lambda_utm < 0.0 || self.lambda_tri < 0.0 || self.lr < 0.0 {
            return Err(bad("lr", "rates and loss weights must be nonnegative"));
        }
        if self.beam < 1 {
            return Err(bad("beam", "must be at least 1"));
        }
        if self.min_len > self.max_len {
            return Err(bad("min_len", "must not exceed max_len"));
        }
        if self.threads < 1 {
            return Err(bad("threads", "must be at least 1"));
        }
        if self.vocab_max <= 4 {
            return Err(bad("vocab_max", "must exceed the four specials"));
        }
        Ok(())
    }

    /// Serialize every key; the result parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
        }
        emit!(d_e);
        emit!(heads);
        emit!(d_ff);
        emit!(enc_layers);
        emit!(graph_layers);
        emit!(dec_layers);
        emit!(topics);
        emit!(utm_hidden);
        emit!(visual_dim);
        emit!(scaled_logits);
        emit!(normalize_guided_attention);
        emit!(vocab_max);
        emit!(vocab_min_freq);
        emit!(topic_vocab_max);
        emit!(topic_min_freq);
        emit!(max_doc_len);
        emit!(max_side_len);
        emit!(max_summary_len);
        emit!(steps);
        emit!(batch_size);
        emit!(lr);
        emit!(warmup_steps);
        emit!(dropout);
        emit!(label_smoothing);
        emit!(clip_lo);
        emit!(clip_hi);
        emit!(lambda_utm);
        emit!(lambda_tri);
        emit!(tau);
        emit!(seed);
        emit!(eval_every);
        emit!(checkpoints_keep);
        emit!(no_utm);
        emit!(no_graph);
        emit!(no_contrastive);
        emit!(mask_side);
        emit!(beam);
        emit!(alpha);
        emit!(min_len);
        emit!(max_len);
        emit!(threads);
        out
    }

    /// Model dimensions for a concrete vocabulary.
    pub fn model_config(
        &self,
        vocab_size: usize,
        topic_vocab_size: usize,
        visual_side: bool,
    ) -> ModelConfig {
        ModelConfig {
            d_e: self.d_e,
            heads: self.heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            graph_layers: self.graph_layers,
            dec_layers: self.dec_layers,
            topics: self.topics,
            utm_hidden: self.utm_hidden,
            visual_dim: self.visual_dim,
            vocab_size,
            topic_vocab_size,
            max_enc_pos: self.max_doc_len.max(self.max_side_len),
            max_dec_pos: self.max_summary_len + 2,
            scaled_logits: self.scaled_logits,
            normalize_guided_attention: self.normalize_guided_attention,
            visual_side,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            lambda_utm: self.lambda_utm,
            lambda_tri: self.lambda_tri,
            tau: self.tau,
            no_utm: self.no_utm,
            no_graph: self.no_graph,
            no_contrastive: self.no_contrastive,
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            beam: self.beam,
            alpha: self.alpha,
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }

    pub fn limits(&self) -> crate::corpus::Limits {
        crate::corpus::Limits {
            doc: self.max_doc_len,
            side: self.max_side_len,
            summary: self.max_summary_len,
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "task", "planted_topics", "vocab_size", "train_docs", "val_docs", "test_docs", "doc_len",
    "summary_len", "side_len", "topic_word_decay", "dirichlet_alpha", "sentences",
    "sentence_len", "keys", "side", "visual_dim",
];

/// Parse a synthetic-corpus spec file.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec, ConfigError> {
    let map = parse_kv(text)?;
    for key in map.keys() {
        if !SYNTH_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
    }
    let mut spec = SynthSpec::default();
    if let Some(task) = map.get("task") {
        spec.task = match task.as_str() {
            "topic-mixture" => SynthTask::TopicMixture,
            "needle" => SynthTask::Needle,
            other => return Err(bad("task", format!("unknown task `{other}`"))),
        };
    }
    if let Some(side) = map.get("side") {
        spec.side_kind = match side.as_str() {
            "none" => SideKind::None,
            "text" => SideKind::Text,
            "visual" => SideKind::Visual,
            other => return Err(bad("side", format!("unknown side kind `{other}`"))),
        };
    }
    get_usize(&map, "planted_topics", &mut spec.planted_topics)?;
    get_usize(&map, "vocab_size", &mut spec.vocab_size)?;
    get_usize(&map, "train_docs", &mut spec.train_docs)?;
    get_usize(&map, "val_docs", &mut spec.val_docs)?;
    get_usize(&map, "test_docs", &mut spec.test_docs)?;
    get_usize(&map, "doc_len", &mut spec.doc_len)?;
    get_usize(&map, "summary_len", &mut spec.summary_len)?;
    get_usize(&map, "side_len", &mut spec.side_len)?;
    get_f64(&map, "topic_word_decay", &mut spec.topic_word_decay)?;
    get_f64(&map, "dirichlet_alpha", &mut spec.dirichlet_alpha)?;
    get_usize(&map, "sentences", &mut spec.sentences)?;
    get_usize(&map, "sentence_len", &mut spec.sentence_len)?;
    get_usize(&map, "keys", &mut spec.keys)?;
    get_usize(&map, "visual_dim", &mut spec.visual_dim)?;
    Ok(spec)
}

pub fn synth_spec_from_file(path: &Path) -> Result<SynthSpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_synth_spec(&text)
}
