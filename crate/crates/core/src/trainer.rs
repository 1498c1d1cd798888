//! Joint optimization of the summary, topic-model, and triplet losses with
//! Adam, elementwise gradient clipping, dropout, label smoothing, periodic
//! ROUGE-L validation, and checkpoint averaging.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{BoundParams, Ctx, ParamStore};
use crate::checkpoint::{average_params, save, Checkpoint, CheckpointError};
use crate::config::TrainConfig;
use crate::corpus::{bow_vector, mask_side, CorpusError, RawSample, Sample, Side, TopicVocab, Vocabulary};
use crate::decoder::DecodeParams;
use crate::eval::rouge_l;
use crate::model::{batch_forward, BatchItem, ModelError, UssModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
}

/// Vocabulary, topic vocabulary, projection table, and truncation limits —
/// everything needed to turn raw text into model inputs.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vocab: Vocabulary,
    pub topic_vocab: TopicVocab,
    pub projection: Vec<Option<usize>>,
    pub limits: crate::corpus::Limits,
}

impl Pipeline {
    /// Build vocabularies from the training split.
    pub fn build(cfg: &TrainConfig, train: &[RawSample]) -> Self {
        let texts = || {
            train.iter().flat_map(|s| {
                [Some(s.document.as_str()), s.side_text.as_deref(), Some(s.summary.as_str())]
                    .into_iter()
                    .flatten()
            })
        };
        let vocab = Vocabulary::build(texts(), cfg.vocab_max, cfg.vocab_min_freq);
        let topic_vocab = TopicVocab::build(texts(), cfg.topic_vocab_max, cfg.topic_min_freq);
        let projection = topic_vocab.projection(&vocab);
        Pipeline {
            vocab,
            topic_vocab,
            projection,
            limits: cfg.limits(),
        }
    }

    /// Restore from a checkpoint's embedded token lists.
    pub fn from_checkpoint(
        cfg: &TrainConfig,
        vocab_tokens: Vec<String>,
        topic_words: Vec<String>,
    ) -> Self {
        let vocab = Vocabulary::from_tokens(vocab_tokens);
        let topic_vocab = TopicVocab::from_words(topic_words);
        let projection = topic_vocab.projection(&vocab);
        Pipeline {
            vocab,
            topic_vocab,
            projection,
            limits: cfg.limits(),
        }
    }

    pub fn encode(&self, raw: &RawSample) -> Result<Sample, CorpusError> {
        crate::corpus::encode_sample(raw, &self.vocab, &self.limits)
    }

    pub fn encode_all(&self, raws: &[RawSample]) -> Result<Vec<Sample>, CorpusError> {
        raws.iter().map(|r| self.encode(r)).collect()
    }

    fn bows(&self, sample: &Sample) -> (Vec<f64>, Option<Vec<f64>>, Vec<f64>) {
        let vt = self.topic_vocab.len();
        let doc = bow_vector(&sample.document, &self.projection, vt);
        let side = match &sample.side {
            Side::Text(ids) => Some(bow_vector(ids, &self.projection, vt)),
            _ => None,
        };
        let summary = bow_vector(&sample.summary, &self.projection, vt);
        (doc, side, summary)
    }

    /// Deterministic (zero-noise) item for inference.
    pub fn item<'a>(&self, sample: &'a Sample, k: usize) -> BatchItem<'a> {
        let (doc, side, summary) = self.bows(sample);
        BatchItem::deterministic(sample, doc, side, summary, k)
    }

    /// Item with reparameterization noise for training.
    pub fn item_noisy<'a>(
        &self,
        sample: &'a Sample,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> BatchItem<'a> {
        let (doc, side, summary) = self.bows(sample);
        BatchItem::noisy(sample, doc, side, summary, k, rng)
    }
}

/// Label-smoothed negative log-likelihood of `target` under distribution `p`.
pub fn label_smoothed_nll(p: &[f64], target: usize, eps: f64) -> f64 {
    let v = p.len();
    let off = eps / (v as f64 - 1.0);
    let mut loss = 0.0;
    for (w, &pw) in p.iter().enumerate() {
        let weight = if w == target { 1.0 - eps } else { off };
        loss -= weight * pw.ln();
    }
    loss
}

/// Elementwise clamp into `[lo, hi]`.
pub fn clip_values(values: &mut [f64], lo: f64, hi: f64) {
    assert!(lo < hi, "clip range must satisfy lo < hi");
    for v in values.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

/// Adam with bias correction; moments keyed by parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update over every parameter from the store's current gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let grad = store.grad(&name).clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let value = store.get_mut(&name);
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One metrics-log row.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_utm: f64,
    pub loss_triplet: f64,
    pub grad_norm: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,loss_total,loss_s,loss_utm,loss_triplet,grad_norm")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.12},{:.12},{:.12},{:.12},{:.12}",
            r.step, r.loss_total, r.loss_s, r.loss_utm, r.loss_triplet, r.grad_norm
        )?;
    }
    w.flush()
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    /// Model carrying the averaged best-checkpoint parameters.
    pub model: UssModel,
    pub pipeline: Pipeline,
    pub metrics: Vec<MetricsRow>,
    /// (step, ROUGE-L F1) per validation pass.
    pub validations: Vec<(usize, f64)>,
    /// The averaged final checkpoint, also written to disk when an output
    /// directory is given.
    pub final_checkpoint: Checkpoint,
    /// Paths of saved per-validation checkpoints.
    pub saved: Vec<PathBuf>,
}

fn greedy_params(cfg: &TrainConfig) -> DecodeParams {
    DecodeParams {
        beam: 1,
        alpha: 0.0,
        min_len: cfg.min_len,
        max_len: cfg.max_len,
    }
}

fn validate_rouge_l(
    model: &UssModel,
    pipeline: &Pipeline,
    samples: &[Sample],
    decode: &DecodeParams,
) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for sample in samples {
        let item = pipeline.item(sample, model.cfg.topics);
        let generated = model.summarize(&item, decode)?;
        total += rouge_l(&generated, &sample.summary).f1;
    }
    Ok(total / samples.len() as f64)
}

/// Train on raw splits. Checkpoints and the metrics log are written under
/// `out_dir` when given; the averaged final checkpoint is always returned.
pub fn train(
    cfg: &TrainConfig,
    train_raw: &[RawSample],
    val_raw: &[RawSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if train_raw.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let pipeline = Pipeline::build(cfg, train_raw);
    let mut train_samples = pipeline.encode_all(train_raw)?;
    let mut val_samples = pipeline.encode_all(val_raw)?;
    if cfg.mask_side {
        mask_side(&mut train_samples);
        mask_side(&mut val_samples);
    }
    let visual_side = train_samples
        .iter()
        .any(|s| matches!(s.side, Side::Visual(_)));

    let model_cfg = cfg.model_config(pipeline.vocab.len(), pipeline.topic_vocab.len(), visual_side);
    let mut model = UssModel::new(model_cfg, cfg.seed)?;

    // independent deterministic streams per randomness consumer
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k);
        rng
    };
    let mut order_rng = stream(1);
    let mut noise_rng = stream(2);
    let mut contrastive_rng = stream(3);
    let dropout_rng = RefCell::new(stream(4));

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;

    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut kept: Vec<(f64, usize, ParamStore)> = Vec::new();
    let mut saved = Vec::new();
    let mut adam = Adam::default();
    let greedy = greedy_params(cfg);

    for step in 0..cfg.steps {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let items: Vec<BatchItem<'_>> = batch_idx
            .iter()
            .map(|&i| pipeline.item_noisy(&train_samples[i], cfg.topics, &mut noise_rng))
            .collect();

        let (row, grad_list) = {
            let tape = Tape::new();
            let bound = BoundParams::new(&tape, &model.params);
            let ctx = Ctx::train(&tape, &bound, model.cfg.attn(), cfg.dropout, &dropout_rng);
            let (losses, _aux) = batch_forward(&ctx, &model.cfg, &items, &mut contrastive_rng)?;
            let row = MetricsRow {
                step,
                loss_total: losses.total.item(),
                loss_s: losses.l_s.item(),
                loss_utm: losses.l_utm.map(|v| v.item()).unwrap_or(0.0),
                loss_triplet: losses.l_triplet.map(|v| v.item()).unwrap_or(0.0),
                grad_norm: 0.0,
            };
            if !row.loss_total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let grads = tape.backward(losses.total);
            let mut list: Vec<(String, Tensor)> = Vec::new();
            for (name, var) in bound.used() {
                if let Some(g) = grads.wrt(var) {
                    list.push((name, g.clone()));
                }
            }
            (row, list)
        };
        model.params.zero_grads();
        for (name, g) in &grad_list {
            model.params.accumulate_grad(name, g);
        }
        let grad_norm = {
            let mut total = 0.0;
            for (_, g) in model.params.iter_grads() {
                total += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            total.sqrt()
        };
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in &names {
            clip_values(
                model.params.grad_mut(name).data_mut(),
                cfg.clip_lo,
                cfg.clip_hi,
            );
        }
        let lr = if cfg.warmup_steps > 0 {
            cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            cfg.lr
        };
        adam.step(&mut model.params, lr);
        metrics.push(MetricsRow { grad_norm, ..row });

        let at_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if at_eval || step + 1 == cfg.steps {
            let score = validate_rouge_l(&model, &pipeline, &val_samples, &greedy)?;
            validations.push((step + 1, score));
            kept.push((score, step + 1, model.params.clone()));
            if let Some(dir) = out_dir {
                let ckpt = Checkpoint {
                    params: model.params.clone(),
                    config_text: cfg.to_text(),
                    vocab_tokens: pipeline.vocab.tokens().to_vec(),
                    topic_words: pipeline.topic_vocab.words().to_vec(),
                    step: (step + 1) as u64,
                    val_score: score,
                };
                let path = dir.join(format!("ckpt_{:06}.ussckpt", step + 1));
                save(&path, &ckpt)?;
                saved.push(path);
            }
        }
    }

    // best checkpoints by validation score, later steps breaking ties
    kept.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| b.1.cmp(&a.1))
    });
    kept.truncate(cfg.checkpoints_keep.max(1));
    let stores: Vec<&ParamStore> = kept.iter().map(|(_, _, s)| s).collect();
    let averaged = average_params(&stores)?;
    let mean_score = kept.iter().map(|(s, _, _)| s).sum::<f64>() / kept.len() as f64;

    let final_checkpoint = Checkpoint {
        params: averaged.clone(),
        config_text: cfg.to_text(),
        vocab_tokens: pipeline.vocab.tokens().to_vec(),
        topic_words: pipeline.topic_vocab.words().to_vec(),
        step: cfg.steps as u64,
        val_score: mean_score,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("final.ussckpt");
        save(&path, &final_checkpoint)?;
        saved.push(path);
        write_metrics_csv(&dir.join("metrics.csv"), &metrics).map_err(|source| TrainError::Io {
            path: dir.join("metrics.csv").display().to_string(),
            source,
        })?;
    }

    let model = UssModel::from_parts(model.cfg.clone(), averaged)?;
    Ok(TrainOutcome {
        model,
        pipeline,
        metrics,
        validations,
        final_checkpoint,
        saved,
    })
}

/// Rebuild a model and pipeline from a loaded checkpoint.
pub fn restore(ckpt: Checkpoint) -> Result<(TrainConfig, UssModel, Pipeline), TrainError> {
    let cfg = TrainConfig::parse(&ckpt.config_text).map_err(|e| TrainError::Io {
        path: "(embedded config)".into(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })?;
    let pipeline = Pipeline::from_checkpoint(&cfg, ckpt.vocab_tokens, ckpt.topic_words);
    let visual_side = ckpt.params.contains("utm.vis_in.w")
        && cfg.visual_dim > 0
        && pipeline_uses_visual(&ckpt.params, &cfg);
    let model_cfg = cfg.model_config(pipeline.vocab.len(), pipeline.topic_vocab.len(), visual_side);
    let model = UssModel::from_parts(model_cfg, ckpt.params)?;
    Ok((cfg, model, pipeline))
}

/// The side perceptron input width reveals whether the run used visual side
/// channels.
fn pipeline_uses_visual(params: &ParamStore, cfg: &TrainConfig) -> bool {
    params.contains("utm.mu_s.w1") && params.get("utm.mu_s.w1").shape()[0] == cfg.utm_hidden
}
