//! Full model assembly: unified topic model, graph encoder, decoder, and
//! contrastive alignment behind one parameter store, with ablation switches
//! that remove paths without changing any parameter shape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::blocks::{AttnSettings, BoundParams, Ctx, NumericsError, ParamStore};
use crate::contrastive::{
    negative_indices, pool_representations, triplet_loss, ContrastiveError, SampleNegatives,
    SampleReps,
};
use crate::corpus::{Sample, Side};
use crate::decoder::{
    beam_search, forward_states, forward_train, register_decoder, AttentionTrace, DecodeParams,
    DecoderDims, DecoderError, DecoderOut, EncodedGraph,
};
use crate::graph::{encode, init_nodes, register_graph, GraphDims, GraphError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::utm::{
    register_utm, sample_loss as utm_sample_loss, topic_embeddings, UtmDims, UtmSampleOut,
    UtmSideInput,
};

use rand::SeedableRng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Every dimension and switch needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_e: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub graph_layers: usize,
    pub dec_layers: usize,
    /// Topic count K.
    pub topics: usize,
    pub utm_hidden: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    pub topic_vocab_size: usize,
    /// Maximum encoder positions (document or side length).
    pub max_enc_pos: usize,
    /// Maximum decoder positions (summary length + specials).
    pub max_dec_pos: usize,
    pub scaled_logits: bool,
    pub normalize_guided_attention: bool,
    /// Side channel carries visual feature vectors.
    pub visual_side: bool,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub lambda_utm: f64,
    pub lambda_tri: f64,
    pub tau: f64,
    pub no_utm: bool,
    pub no_graph: bool,
    pub no_contrastive: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_e == 0 || self.d_e % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.d_e, self.heads
            )));
        }
        if self.topics < 2 {
            return Err(ModelError::Config("topic count must be at least 2".into()));
        }
        if self.dec_layers == 0 || self.enc_layers == 0 {
            return Err(ModelError::Config("encoder and decoder need at least one layer".into()));
        }
        if self.graph_layers == 0 {
            return Err(ModelError::Config("graph_layers must be at least 1".into()));
        }
        if self.vocab_size <= 4 || self.topic_vocab_size == 0 {
            return Err(ModelError::Config("vocabulary too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if self.tau <= 0.0 {
            return Err(ModelError::Config("tau must be positive".into()));
        }
        Ok(())
    }

    pub fn attn(&self) -> AttnSettings {
        AttnSettings {
            d_e: self.d_e,
            heads: self.heads,
            scaled_logits: self.scaled_logits,
        }
    }

    pub fn utm_dims(&self) -> UtmDims {
        UtmDims {
            k: self.topics,
            hidden: self.utm_hidden,
            d_e: self.d_e,
            vt: self.topic_vocab_size,
            visual_dim: self.visual_dim,
            visual_side: self.visual_side,
        }
    }

    pub fn graph_dims(&self) -> GraphDims {
        GraphDims {
            d_e: self.d_e,
            d_ff: self.d_ff,
            topics: self.topics,
            enc_layers: self.enc_layers,
            graph_layers: self.graph_layers,
            vocab_size: self.vocab_size,
            max_pos: self.max_enc_pos,
            visual_dim: self.visual_dim,
        }
    }

    pub fn dec_dims(&self) -> DecoderDims {
        DecoderDims {
            d_e: self.d_e,
            d_ff: self.d_ff,
            layers: self.dec_layers,
            vocab_size: self.vocab_size,
            max_pos: self.max_dec_pos,
            normalize_guided: self.normalize_guided_attention,
        }
    }
}

/// Configuration plus parameters.
pub struct UssModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl UssModel {
    /// Register and initialize every parameter; ablation flags never change
    /// the parameter set.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_graph(&mut params, &cfg.graph_dims(), &mut rng);
        register_decoder(&mut params, &cfg.dec_dims(), &mut rng);
        register_utm(&mut params, &cfg.utm_dims(), &mut rng);
        Ok(UssModel { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(UssModel { cfg, params })
    }
}

/// One prepared training/evaluation item: the sample plus its bag-of-words
/// projections and reparameterization noise.
pub struct BatchItem<'a> {
    pub sample: &'a Sample,
    pub doc_bow: Vec<f64>,
    /// Present for textual side channels.
    pub side_bow: Option<Vec<f64>>,
    pub summary_bow: Vec<f64>,
    pub eps_d: Tensor,
    pub eps_s: Tensor,
}

impl<'a> BatchItem<'a> {
    /// Zero-noise item (deterministic inference).
    pub fn deterministic(
        sample: &'a Sample,
        doc_bow: Vec<f64>,
        side_bow: Option<Vec<f64>>,
        summary_bow: Vec<f64>,
        k: usize,
    ) -> Self {
        BatchItem {
            sample,
            doc_bow,
            side_bow,
            summary_bow,
            eps_d: Tensor::zeros(&[k]),
            eps_s: Tensor::zeros(&[k]),
        }
    }

    /// Item with standard-normal reparameterization noise.
    pub fn noisy(
        sample: &'a Sample,
        doc_bow: Vec<f64>,
        side_bow: Option<Vec<f64>>,
        summary_bow: Vec<f64>,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let draw = |rng: &mut ChaCha8Rng| {
            Tensor::vector((0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        };
        BatchItem {
            sample,
            doc_bow,
            side_bow,
            summary_bow,
            eps_d: draw(rng),
            eps_s: draw(rng),
        }
    }

    fn utm_side(&self) -> UtmSideInput<'_> {
        match (&self.side_bow, &self.sample.side) {
            (Some(bow), _) => UtmSideInput::Bow(bow),
            (None, Side::Visual(v)) => UtmSideInput::Visual(v),
            _ => UtmSideInput::Absent,
        }
    }
}

/// Loss components of one batch forward, still on the tape.
pub struct BatchLosses<'t> {
    pub total: Var<'t>,
    /// Per-token summary loss.
    pub l_s: Var<'t>,
    pub l_utm: Option<Var<'t>>,
    pub l_triplet: Option<Var<'t>>,
}

/// Per-sample byproducts of a batch forward.
pub struct BatchAux<'t> {
    pub reps: Vec<SampleReps<'t>>,
    pub negatives: Vec<usize>,
    pub decoder_outs: Vec<DecoderOut<'t>>,
}

/// Topic node features honoring the topic-model ablation.
fn topic_nodes<'t>(ctx: &Ctx<'_, 't, '_>, cfg: &ModelConfig) -> Result<Var<'t>, ModelError> {
    if cfg.no_utm {
        let fixed = ctx.params.store().get("utm.fixed_topics").clone();
        Ok(ctx.tape.constant(fixed))
    } else {
        Ok(topic_embeddings(ctx)?)
    }
}

/// Joint forward over a batch: summary loss, topic-model loss, and triplet
/// loss, combined as `L_s + lambda_utm L_UTM + lambda_tri L_triplet` with
/// ablated terms dropped.
pub fn batch_forward<'t>(
    ctx: &Ctx<'_, 't, '_>,
    cfg: &ModelConfig,
    items: &[BatchItem<'_>],
    contrastive_rng: &mut ChaCha8Rng,
) -> Result<(BatchLosses<'t>, BatchAux<'t>), ModelError> {
    assert!(!items.is_empty(), "empty batch");
    let gdims = cfg.graph_dims();
    let ddims = cfg.dec_dims();
    let udims = cfg.utm_dims();
    let topics = topic_nodes(ctx, cfg)?;
    let layers = if cfg.no_graph { 0 } else { cfg.graph_layers };

    let mut loss_s_sum: Option<Var<'t>> = None;
    let mut token_count = 0usize;
    let mut utm_sum: Option<Var<'t>> = None;
    let mut reps: Vec<SampleReps<'t>> = Vec::with_capacity(items.len());
    let mut decoder_outs = Vec::with_capacity(items.len());

    for item in items {
        if !cfg.no_utm {
            let out: UtmSampleOut<'t> = crate::utm::forward(
                ctx,
                &udims,
                &item.doc_bow,
                item.utm_side(),
                &item.eps_d,
                &item.eps_s,
            )?;
            let l = utm_sample_loss(ctx, &out, &item.summary_bow);
            utm_sum = Some(match utm_sum {
                Some(acc) => acc.add(l),
                None => l,
            });
        }

        let nodes = encode(ctx, &gdims, item.sample, topics, layers)?;
        let (loss_sum, count, g_final, dec_out) = forward_train(
            ctx,
            &ddims,
            nodes.doc,
            nodes.side,
            nodes.topics,
            &item.sample.summary,
            cfg.label_smoothing,
        )?;
        loss_s_sum = Some(match loss_s_sum {
            Some(acc) => acc.add(loss_sum),
            None => loss_sum,
        });
        token_count += count;
        reps.push(pool_representations(nodes.doc, nodes.side, g_final));
        decoder_outs.push(dec_out);
    }

    let l_s = loss_s_sum.unwrap().scale(1.0 / token_count as f64);
    let l_utm = utm_sum.map(|s| s.scale(1.0 / items.len() as f64));

    let mut negatives_idx = Vec::new();
    let l_triplet = if !cfg.no_contrastive && items.len() >= 2 {
        negatives_idx = negative_indices(items.len(), contrastive_rng);
        let mut batch = Vec::with_capacity(items.len());
        for (i, &j) in negatives_idx.iter().enumerate() {
            // negatives re-encode the other sample without graph interaction
            let neg_nodes = init_nodes(ctx, &gdims, items[j].sample, topics)?;
            let negs = SampleNegatives {
                doc: neg_nodes.doc.mean_rows(),
                side: neg_nodes.side.map(|s| s.mean_rows()),
                gen: reps[j].gen,
            };
            let own = SampleReps {
                doc: reps[i].doc,
                side: reps[i].side,
                gen: reps[i].gen,
            };
            batch.push((own, negs));
        }
        triplet_loss(ctx, &batch, cfg.tau)?
    } else {
        None
    };

    let mut total = l_s;
    if let Some(u) = &l_utm {
        total = total.add(u.scale(cfg.lambda_utm));
    }
    if let Some(t) = &l_triplet {
        total = total.add(t.scale(cfg.lambda_tri));
    }
    Ok((
        BatchLosses {
            total,
            l_s,
            l_utm,
            l_triplet,
        },
        BatchAux {
            reps,
            negatives: negatives_idx,
            decoder_outs,
        },
    ))
}

impl UssModel {
    /// Encode one sample deterministically and detach the node states.
    pub fn encode_sample(&self, item: &BatchItem<'_>) -> Result<EncodedGraph, ModelError> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &self.params);
        let ctx = Ctx::eval(&tape, &bound, self.cfg.attn());
        let topics = topic_nodes(&ctx, &self.cfg)?;
        let layers = if self.cfg.no_graph {
            0
        } else {
            self.cfg.graph_layers
        };
        let nodes = encode(&ctx, &self.cfg.graph_dims(), item.sample, topics, layers)?;
        Ok(EncodedGraph {
            doc: nodes.doc.value(),
            side: nodes.side.map(|s| s.value()),
            topics: nodes.topics.value(),
        })
    }

    /// Beam-search a summary for one sample.
    pub fn summarize(
        &self,
        item: &BatchItem<'_>,
        decode: &DecodeParams,
    ) -> Result<Vec<u32>, ModelError> {
        let encoded = self.encode_sample(item)?;
        Ok(beam_search(
            &self.params,
            self.cfg.attn(),
            &self.cfg.dec_dims(),
            &encoded,
            decode,
        )?)
    }

    /// Beam-search a summary, then teacher-force it to collect the final
    /// decoder layer's attention weights per emitted step.
    pub fn trace_attention(
        &self,
        item: &BatchItem<'_>,
        decode: &DecodeParams,
    ) -> Result<(Vec<u32>, Vec<AttentionTrace>), ModelError> {
        let encoded = self.encode_sample(item)?;
        let summary = beam_search(
            &self.params,
            self.cfg.attn(),
            &self.cfg.dec_dims(),
            &encoded,
            decode,
        )?;
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &self.params);
        let ctx = Ctx::eval(&tape, &bound, self.cfg.attn());
        let doc = tape.constant(encoded.doc.clone());
        let side = encoded.side.as_ref().map(|s| tape.constant(s.clone()));
        let topics = tape.constant(encoded.topics.clone());
        let mut input = vec![crate::corpus::BOS];
        input.extend_from_slice(&summary);
        let out = forward_states(&ctx, &self.cfg.dec_dims(), doc, side, topics, &input)?;
        Ok((summary, crate::decoder::extract_traces(&out)))
    }

    /// Log of the predicted summary bag-of-words for one document/side pair,
    /// with zero reparameterization noise.
    pub fn predict_summary_log_bow(
        &self,
        doc_bow: &[f64],
        side: UtmSideInput<'_>,
    ) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &self.params);
        let ctx = Ctx::eval(&tape, &bound, self.cfg.attn());
        let k = self.cfg.topics;
        let out = crate::utm::forward(
            &ctx,
            &self.cfg.utm_dims(),
            doc_bow,
            side,
            &Tensor::zeros(&[k]),
            &Tensor::zeros(&[k]),
        )?;
        Ok(out.log_bow.value().into_data())
    }
}
