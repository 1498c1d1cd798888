//! Topic-guided summary decoder.
//!
//! Each layer applies causal masked self-attention, computes unnormalized
//! cross-attention weights over topics, routes them onto document and side
//! positions through topic-to-input similarity scores, turns the weights into
//! context vectors, and fuses the contexts back into the running state. The
//! final layer's state and contexts feed the vocabulary projection. Decoding
//! uses beam search with a length penalty, a minimum-length constraint on the
//! end token, and repeated-trigram blocking.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{
    causal_mask, ffn, layer_norm, multi_head_attention, register_ffn, register_layer_norm,
    register_mha, Ctx, AttnSettings, BoundParams, NumericsError, ParamStore,
};
use crate::corpus::{BOS, EOS, PAD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid decode parameters: {0}")]
    Config(String),
}

/// Shape bookkeeping for the decoder parameter set.
#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub d_e: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_pos: usize,
    /// Apply a per-step softmax to the routed document/side weights instead
    /// of using them raw.
    pub normalize_guided: bool,
}

/// Final node states of one encoded sample, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedGraph {
    pub doc: Tensor,
    pub side: Option<Tensor>,
    pub topics: Tensor,
}

/// Beam search controls.
#[derive(Clone, Copy, Debug)]
pub struct DecodeParams {
    pub beam: usize,
    pub alpha: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.beam < 1 {
            return Err(DecoderError::Config("beam must be >= 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(DecoderError::Config("min_len exceeds max_len".into()));
        }
        Ok(())
    }
}

/// Per-step attention weights from the final decoder layer.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub z_o: Vec<f64>,
    pub z_d: Vec<f64>,
    pub z_s: Vec<f64>,
}

/// Init range for the topic-attention projections and the similarity
/// networks' output layers. The routed contexts are unnormalized products
/// of three learned factors; starting them near zero keeps the relu gate in
/// its active region while their magnitudes grow with the training signal.
const CONTEXT_INIT_RANGE: f64 = 0.01;

pub fn register_decoder(store: &mut ParamStore, dims: &DecoderDims, rng: &mut ChaCha8Rng) {
    store.register("embed.pos_dec", &[dims.max_pos, dims.d_e], rng);
    for l in 0..dims.layers {
        let p = format!("dec.l{l}");
        register_mha(store, &format!("{p}.self"), dims.d_e, rng);
        register_layer_norm(store, &format!("{p}.ln_self"), dims.d_e);
        store.register_range(&format!("{p}.wa"), &[dims.d_e, dims.d_e], CONTEXT_INIT_RANGE, rng);
        store.register_range(&format!("{p}.wb"), &[dims.d_e, dims.d_e], CONTEXT_INIT_RANGE, rng);
        for sim in ["e_d", "e_s"] {
            store.register(&format!("{p}.{sim}.w1"), &[1, dims.d_ff], rng);
            store.register(&format!("{p}.{sim}.b1"), &[dims.d_ff], rng);
            store.register_range(
                &format!("{p}.{sim}.w2"),
                &[dims.d_ff, 1],
                CONTEXT_INIT_RANGE,
                rng,
            );
            store.register_range(&format!("{p}.{sim}.b2"), &[1], CONTEXT_INIT_RANGE, rng);
        }
        register_ffn(store, &format!("{p}.fuse"), 4 * dims.d_e, dims.d_ff, dims.d_e, rng);
        register_layer_norm(store, &format!("{p}.ln_fuse"), dims.d_e);
    }
    store.register("dec.w_d", &[4 * dims.d_e, dims.vocab_size], rng);
}

/// Causal masked self-attention sub-layer: `LN(g + MSAttn(g, g))`.
pub fn masked_self_attention<'t>(
    ctx: &Ctx<'_, 't, '_>,
    layer: usize,
    g: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let t = g.shape()[0];
    let p = format!("dec.l{layer}");
    let attended = multi_head_attention(ctx, &format!("{p}.self"), g, g, Some(causal_mask(t)))?;
    Ok(layer_norm(ctx, g.add(attended), &format!("{p}.ln_self")))
}

/// Unnormalized topic attention: `relu(g W_a (topics W_b)^T)`, one row of K
/// weights per decode step.
pub fn topic_attention<'t>(g: Var<'t>, topics: Var<'t>, w_a: Var<'t>, w_b: Var<'t>) -> Var<'t> {
    g.matmul(w_a).matmul(topics.matmul(w_b).t()).relu()
}

/// Topic-to-input similarity matrix: a scalar feed-forward network applied
/// elementwise to `topics inputs^T`, yielding `[K, N]`.
pub fn input_similarity<'t>(
    ctx: &Ctx<'_, 't, '_>,
    prefix: &str,
    topics: Var<'t>,
    inputs: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let k = topics.shape()[0];
    let n = inputs.shape()[0];
    let raw = topics.matmul(inputs.t()).reshape(vec![k * n, 1]);
    Ok(ffn(ctx, raw, prefix)?.reshape(vec![k, n]))
}

/// Route topic weights onto input positions: `z_x = z_o e`.
pub fn guided_input_attention<'t>(z_o: Var<'t>, similarity: Var<'t>) -> Var<'t> {
    z_o.matmul(similarity)
}

/// Weighted sum of rows: `c = z h`.
pub fn context_vector<'t>(z: Var<'t>, h: Var<'t>) -> Var<'t> {
    z.matmul(h)
}

/// Distribution over the vocabulary from the state and context vectors.
pub fn vocab_distribution<'t>(
    g_t: Var<'t>,
    c_o: Var<'t>,
    c_d: Var<'t>,
    c_s: Var<'t>,
    w_d: Var<'t>,
) -> Var<'t> {
    Var::concat_cols(&[g_t.as_row(), c_o.as_row(), c_d.as_row(), c_s.as_row()])
        .matmul(w_d)
        .softmax(None)
        .squeeze()
}

/// Teacher-forced forward results on the tape.
pub struct DecoderOut<'t> {
    /// `[T, |V|]` log-probabilities per step.
    pub log_probs: Var<'t>,
    /// `[T, d_e]` final-layer fused states.
    pub states: Var<'t>,
    /// Final-layer attention weights, `[T, K]` / `[T, N_d]` / `[T, N_s]`.
    pub z_o: Var<'t>,
    pub z_d: Var<'t>,
    pub z_s: Option<Var<'t>>,
}

/// Run the decoder over `input_ids` (BOS-prefixed) against encoded nodes.
pub fn forward_states<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &DecoderDims,
    doc: Var<'t>,
    side: Option<Var<'t>>,
    topics: Var<'t>,
    input_ids: &[u32],
) -> Result<DecoderOut<'t>, DecoderError> {
    let t_len = input_ids.len();
    if t_len == 0 {
        return Err(DecoderError::Config("empty decoder input".into()));
    }
    if t_len > dims.max_pos {
        return Err(DecoderError::Config(format!(
            "decode length {} exceeds maximum position {}",
            t_len, dims.max_pos
        )));
    }
    let idx: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
    let tok = ctx.var("embed.tok").gather_rows(&idx);
    let pos = ctx.var("embed.pos_dec").slice_rows(0, t_len);
    let mut g = tok.add(pos);

    let mut last = None;
    for l in 0..dims.layers {
        let p = format!("dec.l{l}");
        let g_tilde = masked_self_attention(ctx, l, g)?;
        let z_o = topic_attention(
            g_tilde,
            topics,
            ctx.var(&format!("{p}.wa")),
            ctx.var(&format!("{p}.wb")),
        );
        let e_d = input_similarity(ctx, &format!("{p}.e_d"), topics, doc)?;
        let mut z_d = guided_input_attention(z_o, e_d);
        let mut z_s = match side {
            Some(s) => {
                let e_s = input_similarity(ctx, &format!("{p}.e_s"), topics, s)?;
                Some(guided_input_attention(z_o, e_s))
            }
            None => None,
        };
        if dims.normalize_guided {
            z_d = z_d.softmax(None);
            z_s = z_s.map(|z| z.softmax(None));
        }
        let c_o = context_vector(z_o, topics);
        let c_d = context_vector(z_d, doc);
        let c_s = match (z_s, side) {
            (Some(z), Some(s)) => context_vector(z, s),
            _ => ctx.tape.constant(Tensor::zeros(&[t_len, dims.d_e])),
        };
        let fused = ffn(
            ctx,
            Var::concat_cols(&[g_tilde, c_o, c_d, c_s]),
            &format!("{p}.fuse"),
        )?;
        g = layer_norm(ctx, g_tilde.add(fused), &format!("{p}.ln_fuse"));
        last = Some((z_o, z_d, z_s, c_o, c_d, c_s));
    }
    let (z_o, z_d, z_s, c_o, c_d, c_s) = last.expect("at least one decoder layer");
    let logits = Var::concat_cols(&[g, c_o, c_d, c_s]).matmul(ctx.var("dec.w_d"));
    Ok(DecoderOut {
        log_probs: logits.log_softmax(),
        states: g,
        z_o,
        z_d,
        z_s,
    })
}

/// Extract per-step traces from a finished forward pass.
pub fn extract_traces(out: &DecoderOut<'_>) -> Vec<AttentionTrace> {
    let z_o = out.z_o.value();
    let z_d = out.z_d.value();
    let z_s = out.z_s.map(|z| z.value());
    (0..z_o.rows())
        .map(|t| AttentionTrace {
            z_o: z_o.row_slice(t).to_vec(),
            z_d: z_d.row_slice(t).to_vec(),
            z_s: z_s.as_ref().map(|z| z.row_slice(t).to_vec()).unwrap_or_default(),
        })
        .collect()
}

/// Teacher-forced label-smoothed negative log-likelihood, summed over
/// positions, plus the final decoder state (the summary representation).
pub fn forward_train<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &DecoderDims,
    doc: Var<'t>,
    side: Option<Var<'t>>,
    topics: Var<'t>,
    summary: &[u32],
    smoothing: f64,
) -> Result<(Var<'t>, usize, Var<'t>, DecoderOut<'t>), DecoderError> {
    let mut input = Vec::with_capacity(summary.len() + 1);
    input.push(BOS);
    input.extend_from_slice(summary);
    let mut targets = summary.to_vec();
    targets.push(EOS);

    let out = forward_states(ctx, dims, doc, side, topics, &input)?;
    let v = dims.vocab_size;
    let off = smoothing / (v as f64 - 1.0);
    let mut weights = vec![0.0; targets.len() * v];
    for (t, &y) in targets.iter().enumerate() {
        for w in 0..v {
            weights[t * v + w] = if w as u32 == y { 1.0 - smoothing } else { off };
        }
    }
    let weights = ctx
        .tape
        .constant(Tensor::new(vec![targets.len(), v], weights));
    let loss_sum = weights.mul(out.log_probs).sum().neg();
    let g_final = out.states.row(input.len() - 1);
    Ok((loss_sum, targets.len(), g_final, out))
}

struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
    finished: bool,
    trigrams: HashSet<(u32, u32, u32)>,
}

impl Hypothesis {
    fn content_len(&self) -> usize {
        let specials = 1 + usize::from(self.finished && *self.tokens.last().unwrap() == EOS);
        self.tokens.len() - specials
    }

    fn normalized(&self, alpha: f64) -> f64 {
        let lp = ((5.0 + self.content_len() as f64) / 6.0).powf(alpha);
        self.score / lp
    }
}

/// Log-probabilities for the next token after `prefix` (BOS-prefixed).
fn next_log_probs(
    store: &ParamStore,
    attn: AttnSettings,
    dims: &DecoderDims,
    encoded: &EncodedGraph,
    prefix: &[u32],
) -> Result<Vec<f64>, DecoderError> {
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, store);
    let ctx = Ctx::eval(&tape, &bound, attn);
    let doc = tape.constant(encoded.doc.clone());
    let side = encoded.side.as_ref().map(|s| tape.constant(s.clone()));
    let topics = tape.constant(encoded.topics.clone());
    let out = forward_states(&ctx, dims, doc, side, topics, prefix)?;
    let lp = out.log_probs.value();
    Ok(lp.row_slice(lp.rows() - 1).to_vec())
}

/// Beam search ranked by length-penalized log-probability with trigram
/// blocking and a minimum length before the end token is allowed.
pub fn beam_search(
    store: &ParamStore,
    attn: AttnSettings,
    dims: &DecoderDims,
    encoded: &EncodedGraph,
    params: &DecodeParams,
) -> Result<Vec<u32>, DecoderError> {
    params.validate()?;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
        trigrams: HashSet::new(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        // candidate = (hyp index, token, cumulative score)
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let lp = next_log_probs(store, attn, dims, encoded, &hyp.tokens)?;
            let content = hyp.tokens.len() - 1;
            for (w, &logp) in lp.iter().enumerate() {
                let w = w as u32;
                if w == PAD || w == BOS {
                    continue;
                }
                if w == EOS && content < params.min_len {
                    continue;
                }
                if w != EOS && hyp.tokens.len() >= 2 {
                    let n = hyp.tokens.len();
                    let tri = (hyp.tokens[n - 2], hyp.tokens[n - 1], w);
                    if hyp.trigrams.contains(&tri) {
                        continue;
                    }
                }
                candidates.push((hi, w, hyp.score + logp));
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        candidates.truncate(params.beam);

        let mut next_live = Vec::new();
        for (hi, w, score) in candidates {
            let src = &live[hi];
            let mut tokens = src.tokens.clone();
            tokens.push(w);
            let mut trigrams = src.trigrams.clone();
            let n = tokens.len();
            if n >= 3 {
                trigrams.insert((tokens[n - 3], tokens[n - 2], tokens[n - 1]));
            }
            let done = w == EOS || (tokens.len() - 1) >= params.max_len;
            let hyp = Hypothesis {
                tokens,
                score,
                finished: done,
                trigrams,
            };
            if done {
                finished.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    let pool = if finished.is_empty() { &live } else { &finished };
    let best = pool
        .iter()
        .max_by(|a, b| {
            a.normalized(params.alpha)
                .partial_cmp(&b.normalized(params.alpha))
                .unwrap()
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| DecoderError::Config("no hypothesis produced".into()))?;
    let content: Vec<u32> = best
        .tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS)
        .collect();
    Ok(content)
}

/// Stepwise argmax decoding under the same constraints as beam search; the
/// independent reference for the beam=1 equivalence property.
pub fn greedy_decode(
    store: &ParamStore,
    attn: AttnSettings,
    dims: &DecoderDims,
    encoded: &EncodedGraph,
    params: &DecodeParams,
) -> Result<Vec<u32>, DecoderError> {
    let mut tokens = vec![BOS];
    let mut trigrams: HashSet<(u32, u32, u32)> = HashSet::new();
    loop {
        let content = tokens.len() - 1;
        if content >= params.max_len {
            break;
        }
        let lp = next_log_probs(store, attn, dims, encoded, &tokens)?;
        let mut best: Option<(u32, f64)> = None;
        for (w, &logp) in lp.iter().enumerate() {
            let w = w as u32;
            if w == PAD || w == BOS {
                continue;
            }
            if w == EOS && content < params.min_len {
                continue;
            }
            if w != EOS && tokens.len() >= 2 {
                let n = tokens.len();
                if trigrams.contains(&(tokens[n - 2], tokens[n - 1], w)) {
                    continue;
                }
            }
            let better = match best {
                None => true,
                Some((_, s)) => logp > s,
            };
            if better {
                best = Some((w, logp));
            }
        }
        let Some((w, _)) = best else { break };
        tokens.push(w);
        let n = tokens.len();
        if n >= 3 {
            trigrams.insert((tokens[n - 3], tokens[n - 2], tokens[n - 1]));
        }
        if w == EOS {
            break;
        }
    }
    Ok(tokens
        .into_iter()
        .filter(|&t| t != BOS && t != EOS)
        .collect())
}
