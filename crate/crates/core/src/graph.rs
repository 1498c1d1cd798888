//! Topic-aware graph encoder.
//!
//! Nodes: document tokens, side tokens (or projected visual vectors), and
//! topic rows from the unified topic model. Each graph layer runs a
//! topic-guided interaction (self-attention, cross-attention against topics,
//! and topic-guided position weighting fused by a feed-forward network), a
//! topic update (self-attention plus cross-attention over document and side
//! nodes), and a direct interaction (joint self-attention over the document
//! and side concatenation).

use thiserror::Error;

use crate::blocks::{
    ffn, layer_norm, linear, multi_head_attention, register_ffn, register_layer_norm,
    register_linear, register_mha, register_transformer_layer, transformer_layer, Ctx,
    NumericsError, ParamStore,
};
use crate::corpus::{Sample, Side};
use crate::tape::Var;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("empty document")]
    EmptyDocument,
    #[error("sequence length {len} exceeds maximum position {max}")]
    SequenceTooLong { len: usize, max: usize },
}

/// Shape bookkeeping for the encoder parameter set.
#[derive(Clone, Copy, Debug)]
pub struct GraphDims {
    pub d_e: usize,
    pub d_ff: usize,
    pub topics: usize,
    pub enc_layers: usize,
    pub graph_layers: usize,
    pub vocab_size: usize,
    pub max_pos: usize,
    pub visual_dim: usize,
}

/// Node states for one sample on the tape.
pub struct NodeVars<'t> {
    pub doc: Var<'t>,
    pub side: Option<Var<'t>>,
    pub topics: Var<'t>,
}

pub fn register_graph(store: &mut ParamStore, dims: &GraphDims, rng: &mut ChaCha8Rng) {
    store.register("embed.tok", &[dims.vocab_size, dims.d_e], rng);
    store.register("embed.pos_enc", &[dims.max_pos, dims.d_e], rng);
    register_linear(store, "vis_proj", dims.visual_dim, dims.d_e, rng);
    for l in 0..dims.enc_layers {
        register_transformer_layer(store, &format!("enc.l{l}"), dims.d_e, dims.d_ff, rng);
    }
    for l in 0..dims.graph_layers {
        let p = format!("graph.l{l}");
        for side in ["doc", "side"] {
            register_mha(store, &format!("{p}.{side}_self"), dims.d_e, rng);
            register_mha(store, &format!("{p}.{side}_topic"), dims.d_e, rng);
            register_mha(store, &format!("{p}.tga_{side}.attn"), dims.d_e, rng);
            register_ffn(store, &format!("{p}.tga_{side}.score"), 1, dims.d_ff, 1, rng);
            register_ffn(
                store,
                &format!("{p}.fuse_{side}"),
                3 * dims.d_e,
                dims.d_ff,
                dims.d_e,
                rng,
            );
            register_layer_norm(store, &format!("{p}.ln_{side}"), dims.d_e);
        }
        register_mha(store, &format!("{p}.topic_self"), dims.d_e, rng);
        register_mha(store, &format!("{p}.topic_cross"), dims.d_e, rng);
        register_ffn(
            store,
            &format!("{p}.fuse_topic"),
            2 * dims.d_e,
            dims.d_ff,
            dims.d_e,
            rng,
        );
        register_layer_norm(store, &format!("{p}.ln_topic"), dims.d_e);
        register_mha(store, &format!("{p}.direct"), dims.d_e, rng);
        register_layer_norm(store, &format!("{p}.ln_direct"), dims.d_e);
    }
}

/// Embed token ids, add positions, and run the shared token encoder stack.
pub fn encode_tokens<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &GraphDims,
    ids: &[u32],
) -> Result<Var<'t>, GraphError> {
    if ids.len() > dims.max_pos {
        return Err(GraphError::SequenceTooLong {
            len: ids.len(),
            max: dims.max_pos,
        });
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = ctx.var("embed.tok").gather_rows(&idx);
    let pos = ctx.var("embed.pos_enc").slice_rows(0, ids.len());
    let mut states = tok.add(pos);
    for l in 0..dims.enc_layers {
        states = transformer_layer(ctx, &format!("enc.l{l}"), states, None)?;
    }
    Ok(states)
}

/// Initialize document, side, and topic node states.
///
/// Document and textual side tokens pass through the shared token encoder;
/// visual side vectors are linearly projected to the node width; topic rows
/// are taken from the supplied topic embedding matrix.
pub fn init_nodes<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &GraphDims,
    sample: &Sample,
    topics: Var<'t>,
) -> Result<NodeVars<'t>, GraphError> {
    if sample.document.is_empty() {
        return Err(GraphError::EmptyDocument);
    }
    let doc = encode_tokens(ctx, dims, &sample.document)?;
    let side = match &sample.side {
        Side::Absent => None,
        Side::Text(ids) => Some(encode_tokens(ctx, dims, ids)?),
        Side::Visual(vectors) => {
            let rows = vectors.len();
            let mut data = Vec::with_capacity(rows * dims.visual_dim);
            for v in vectors {
                if v.len() != dims.visual_dim {
                    return Err(NumericsError::Shape(format!(
                        "visual vector length {} != visual_dim {}",
                        v.len(),
                        dims.visual_dim
                    ))
                    .into());
                }
                data.extend_from_slice(v);
            }
            let raw = ctx
                .tape
                .constant(Tensor::new(vec![rows, dims.visual_dim], data));
            Some(linear(ctx, raw, "vis_proj.w", "vis_proj.b"))
        }
    };
    Ok(NodeVars {
        doc,
        side,
        topics,
    })
}

/// Topic-guided attention: self-attend the states, score each position
/// against the summed topic vector through a scalar feed-forward network,
/// softmax the scores over positions, and weight the self-attended rows.
///
/// Returns the weighted states and the position weights.
pub fn topic_guided_attention<'t>(
    ctx: &Ctx<'_, 't, '_>,
    prefix: &str,
    states: Var<'t>,
    topics: Var<'t>,
) -> Result<(Var<'t>, Var<'t>), NumericsError> {
    let n = states.shape()[0];
    let d_e = ctx.attn.d_e;
    let h_dot = multi_head_attention(ctx, &format!("{prefix}.attn"), states, states, None)?;
    let h_o = topics.sum_rows().reshape(vec![d_e, 1]);
    let scores = states.matmul(h_o); // [n, 1]
    let e = ffn(ctx, scores, &format!("{prefix}.score"))?; // [n, 1]
    let beta = e.reshape(vec![1, n]).softmax(None).reshape(vec![n, 1]);
    let ones = ctx.tape.constant(Tensor::full(&[1, d_e], 1.0));
    let weighted = beta.matmul(ones).mul(h_dot);
    Ok((weighted, beta.squeeze()))
}

fn fuse_three<'t>(
    ctx: &Ctx<'_, 't, '_>,
    layer: usize,
    which: &str,
    input: Var<'t>,
    topics: Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let p = format!("graph.l{layer}");
    let s1 = multi_head_attention(ctx, &format!("{p}.{which}_self"), input, input, None)?;
    let s2 = multi_head_attention(ctx, &format!("{p}.{which}_topic"), input, topics, None)?;
    let (s3, _beta) = topic_guided_attention(ctx, &format!("{p}.tga_{which}"), input, topics)?;
    let fused = ffn(ctx, Var::concat_cols(&[s1, s2, s3]), &format!("{p}.fuse_{which}"))?;
    Ok(layer_norm(ctx, input.add(fused), &format!("{p}.ln_{which}")))
}

/// Topic-guided interaction: update document (and side, when present) states
/// from self-attention, topic cross-attention, and topic-guided attention.
pub fn topic_guided_interaction<'t>(
    ctx: &Ctx<'_, 't, '_>,
    layer: usize,
    nodes: &NodeVars<'t>,
) -> Result<(Var<'t>, Option<Var<'t>>), NumericsError> {
    let doc = fuse_three(ctx, layer, "doc", nodes.doc, nodes.topics)?;
    let side = match nodes.side {
        Some(s) => Some(fuse_three(ctx, layer, "side", s, nodes.topics)?),
        None => None,
    };
    Ok((doc, side))
}

/// Topic update: self-attention over topic rows plus cross-attention with
/// topics as queries and the document/side rows as keys and values.
pub fn update_topics<'t>(
    ctx: &Ctx<'_, 't, '_>,
    layer: usize,
    nodes: &NodeVars<'t>,
) -> Result<Var<'t>, NumericsError> {
    let p = format!("graph.l{layer}");
    let topics = nodes.topics;
    let s1 = multi_head_attention(ctx, &format!("{p}.topic_self"), topics, topics, None)?;
    let kv = match nodes.side {
        Some(side) => Var::concat_rows(&[nodes.doc, side]),
        None => nodes.doc,
    };
    let s2 = multi_head_attention(ctx, &format!("{p}.topic_cross"), topics, kv, None)?;
    let fused = ffn(ctx, Var::concat_cols(&[s1, s2]), &format!("{p}.fuse_topic"))?;
    Ok(layer_norm(ctx, topics.add(fused), &format!("{p}.ln_topic")))
}

/// Direct interaction: joint self-attention over the document-then-side
/// concatenation with residual and layer norm, split back at the document
/// row count.
pub fn direct_interaction<'t>(
    ctx: &Ctx<'_, 't, '_>,
    layer: usize,
    nodes: &NodeVars<'t>,
) -> Result<(Var<'t>, Option<Var<'t>>), NumericsError> {
    let p = format!("graph.l{layer}");
    let n_d = nodes.doc.shape()[0];
    let cat = match nodes.side {
        Some(side) => Var::concat_rows(&[nodes.doc, side]),
        None => nodes.doc,
    };
    let attended = multi_head_attention(ctx, &format!("{p}.direct"), cat, cat, None)?;
    let out = layer_norm(ctx, cat.add(attended), &format!("{p}.ln_direct"));
    match nodes.side {
        Some(side) => {
            let n_s = side.shape()[0];
            Ok((
                out.slice_rows(0, n_d),
                Some(out.slice_rows(n_d, n_d + n_s)),
            ))
        }
        None => Ok((out, None)),
    }
}

/// Full encoder: node initialization followed by `layers` rounds of
/// topic-guided interaction, topic update, and direct interaction.
///
/// `layers = 0` returns the initialized nodes untouched (the graph-encoder
/// ablation path).
pub fn encode<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &GraphDims,
    sample: &Sample,
    topics: Var<'t>,
    layers: usize,
) -> Result<NodeVars<'t>, GraphError> {
    let mut nodes = init_nodes(ctx, dims, sample, topics)?;
    for l in 0..layers {
        let (doc, side) = topic_guided_interaction(ctx, l, &nodes)?;
        nodes = NodeVars {
            doc,
            side,
            topics: nodes.topics,
        };
        let topics = update_topics(ctx, l, &nodes)?;
        nodes.topics = topics;
        let (doc, side) = direct_interaction(ctx, l, &nodes)?;
        nodes.doc = doc;
        nodes.side = side;
    }
    Ok(nodes)
}
