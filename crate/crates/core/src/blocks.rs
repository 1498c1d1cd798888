//! Trainable building blocks: parameter storage, linear layers, feed-forward
//! networks, layer normalization with gain/bias, and the attention stack.
//!
//! Attention follows the weighted-sum-scaling formulation (softmax over raw
//! query-key logits, weighted sum divided by sqrt of the hidden size). The
//! conventional logit-scaled variant is available behind
//! [`AttnSettings::scaled_logits`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Init range for weight matrices and embeddings.
pub const INIT_RANGE: f64 = 0.08;
/// Epsilon in layer-norm denominators.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("attention row {0} is fully masked")]
    FullyMasked(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Named parameter tensors with matching gradient buffers.
///
/// Iteration order is the lexicographic name order, which keeps optimizer
/// updates and checkpoint files deterministic.
#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.values.contains_key(name),
            "duplicate parameter {name}"
        );
        self.grads.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.values.insert(name.to_string(), value);
    }

    /// Register a weight initialized uniformly in [-INIT_RANGE, INIT_RANGE].
    pub fn register(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
        self.insert(name, Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, rng));
    }

    /// Register a weight with a custom uniform range.
    pub fn register_range(
        &mut self,
        name: &str,
        shape: &[usize],
        range: f64,
        rng: &mut ChaCha8Rng,
    ) {
        self.insert(name, Tensor::uniform(shape, -range, range, rng));
    }

    /// Register a tensor filled with a constant (biases, layer-norm gains).
    pub fn register_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.grads[name]
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .add_in_place(g);
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn iter_grads(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|t| t.len()).sum()
    }
}

/// Lazily binds store parameters onto a tape, one leaf per distinct name, so
/// gradients can be routed back to the store after the backward pass.
pub struct BoundParams<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<BTreeMap<String, usize>>,
    vars: RefCell<Vec<(String, Var<'t>)>>,
}

impl<'t, 's> BoundParams<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        BoundParams {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
            vars: RefCell::new(Vec::new()),
        }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(&i) = self.bound.borrow().get(name) {
            return self.vars.borrow()[i].1;
        }
        let var = self.tape.leaf(self.store.get(name).clone());
        let mut vars = self.vars.borrow_mut();
        vars.push((name.to_string(), var));
        self.bound.borrow_mut().insert(name.to_string(), vars.len() - 1);
        var
    }

    /// Every parameter touched in this pass, in first-use order.
    pub fn used(&self) -> Vec<(String, Var<'t>)> {
        self.vars.borrow().clone()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }
}

/// Attention behavior shared by every block in a model.
#[derive(Clone, Copy, Debug)]
pub struct AttnSettings {
    pub d_e: usize,
    pub heads: usize,
    /// When true, scale logits by 1/sqrt(head dim) and leave the weighted sum
    /// unscaled; when false, softmax raw logits and scale the weighted sum by
    /// 1/sqrt(d_e).
    pub scaled_logits: bool,
}

/// Per-pass context: tape, bound parameters, attention settings, and the
/// training-only dropout state.
pub struct Ctx<'a, 't, 's> {
    pub tape: &'t Tape,
    pub params: &'a BoundParams<'t, 's>,
    pub attn: AttnSettings,
    dropout: Option<(f64, &'a RefCell<ChaCha8Rng>)>,
}

impl<'a, 't, 's> Ctx<'a, 't, 's> {
    pub fn eval(tape: &'t Tape, params: &'a BoundParams<'t, 's>, attn: AttnSettings) -> Self {
        Ctx {
            tape,
            params,
            attn,
            dropout: None,
        }
    }

    pub fn train(
        tape: &'t Tape,
        params: &'a BoundParams<'t, 's>,
        attn: AttnSettings,
        dropout_rate: f64,
        rng: &'a RefCell<ChaCha8Rng>,
    ) -> Self {
        let dropout = (dropout_rate > 0.0).then_some((dropout_rate, rng));
        Ctx {
            tape,
            params,
            attn,
            dropout,
        }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        self.params.get(name)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn maybe_dropout(&self, x: Var<'t>) -> Var<'t> {
        match &self.dropout {
            None => x,
            Some((rate, rng)) => {
                let n = x.shape().iter().product();
                let mut rng = rng.borrow_mut();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= *rate).collect();
                x.dropout_masked(Rc::new(keep), *rate)
            }
        }
    }
}

/// Dropout-then-affine: `x W + b`. `x` is `[n, in]`, the weight `[in, out]`.
pub fn linear<'t>(ctx: &Ctx<'_, 't, '_>, x: Var<'t>, w: &str, b: &str) -> Var<'t> {
    let x = ctx.maybe_dropout(x);
    x.matmul(ctx.var(w)).add_row(ctx.var(b))
}

/// Layer normalization with learned gain and bias applied per row.
pub fn layer_norm<'t>(ctx: &Ctx<'_, 't, '_>, x: Var<'t>, prefix: &str) -> Var<'t> {
    x.layer_norm(LN_EPS)
        .mul_row(ctx.var(&format!("{prefix}.g")))
        .add_row(ctx.var(&format!("{prefix}.b")))
}

/// Two-layer feed-forward network with relu: `W2 relu(W1 x + b1) + b2`.
pub fn ffn<'t>(ctx: &Ctx<'_, 't, '_>, x: Var<'t>, prefix: &str) -> Result<Var<'t>, NumericsError> {
    let w1 = ctx.var(&format!("{prefix}.w1"));
    let expect = w1.shape()[0];
    let got = *x.shape().last().unwrap();
    if got != expect {
        return Err(NumericsError::Shape(format!(
            "ffn {prefix} expects input width {expect}, got {got}"
        )));
    }
    let h = linear(ctx, x, &format!("{prefix}.w1"), &format!("{prefix}.b1")).relu();
    Ok(linear(ctx, h, &format!("{prefix}.w2"), &format!("{prefix}.b2")))
}

/// Single-head scaled attention over already-projected states.
///
/// `scale_dim` is the hidden size whose square root scales either the output
/// (weighted-sum mode) or the logits (conventional mode).
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<Rc<Vec<bool>>>,
    scale_dim: usize,
    scaled_logits: bool,
) -> Result<Var<'t>, NumericsError> {
    let (n_q, n_k) = (q.shape()[0], k.shape()[0]);
    if q.shape()[1] != k.shape()[1] {
        return Err(NumericsError::Shape(format!(
            "attention query dim {} vs key dim {}",
            q.shape()[1],
            k.shape()[1]
        )));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(NumericsError::Shape("attention key/value row mismatch".into()));
    }
    if let Some(m) = &mask {
        if m.len() != n_q * n_k {
            return Err(NumericsError::Shape("attention mask size".into()));
        }
        for i in 0..n_q {
            if !m[i * n_k..(i + 1) * n_k].iter().any(|&b| b) {
                return Err(NumericsError::FullyMasked(i));
            }
        }
    }
    let inv = 1.0 / (scale_dim as f64).sqrt();
    let mut logits = q.matmul(k.t());
    if scaled_logits {
        logits = logits.scale(inv);
    }
    let alpha = logits.softmax(mask);
    let out = alpha.matmul(v);
    Ok(if scaled_logits { out } else { out.scale(inv) })
}

/// Multi-head attention with input/output projections.
///
/// Parameter names under `prefix`: `wq bq wk bk wv bv wo bo`.
pub fn multi_head_attention<'t>(
    ctx: &Ctx<'_, 't, '_>,
    prefix: &str,
    q_states: Var<'t>,
    kv_states: Var<'t>,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<'t>, NumericsError> {
    let AttnSettings {
        d_e,
        heads,
        scaled_logits,
    } = ctx.attn;
    if d_e % heads != 0 {
        return Err(NumericsError::Config(format!(
            "hidden size {d_e} not divisible by {heads} heads"
        )));
    }
    let d_h = d_e / heads;
    let q = linear(ctx, q_states, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(ctx, kv_states, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(ctx, kv_states, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let scale_dim = if scaled_logits { d_h } else { d_e };
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * d_h, (h + 1) * d_h);
        parts.push(attention(
            q.slice_cols(c0, c1),
            k.slice_cols(c0, c1),
            v.slice_cols(c0, c1),
            mask.clone(),
            scale_dim,
            scaled_logits,
        )?);
    }
    let cat = Var::concat_cols(&parts);
    Ok(linear(ctx, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo")))
}

/// Post-norm transformer layer: `LN(x + MHAtt(x, x))` then `LN(h + FFN(h))`.
///
/// Parameter names under `prefix`: `attn.* ln1.* ffn.* ln2.*`.
pub fn transformer_layer<'t>(
    ctx: &Ctx<'_, 't, '_>,
    prefix: &str,
    states: Var<'t>,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<Var<'t>, NumericsError> {
    let attended = multi_head_attention(ctx, &format!("{prefix}.attn"), states, states, mask)?;
    let h = layer_norm(ctx, states.add(attended), &format!("{prefix}.ln1"));
    let f = ffn(ctx, h, &format!("{prefix}.ffn"))?;
    Ok(layer_norm(ctx, h.add(f), &format!("{prefix}.ln2")))
}

/// Registration helpers mirroring the forward functions above.
pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    store.register(&format!("{prefix}.w"), &[d_in, d_out], rng);
    store.register(&format!("{prefix}.b"), &[d_out], rng);
}

pub fn register_ffn(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    store.register(&format!("{prefix}.w1"), &[d_in, d_hidden], rng);
    store.register(&format!("{prefix}.b1"), &[d_hidden], rng);
    store.register(&format!("{prefix}.w2"), &[d_hidden, d_out], rng);
    store.register(&format!("{prefix}.b2"), &[d_out], rng);
}

/// Layer norms start at the identity transform.
pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.register_const(&format!("{prefix}.g"), &[d], 1.0);
    store.register_const(&format!("{prefix}.b"), &[d], 0.0);
}

pub fn register_mha(store: &mut ParamStore, prefix: &str, d_e: usize, rng: &mut ChaCha8Rng) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{name}"), &[d_e, d_e], rng);
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{name}"), &[d_e], rng);
    }
}

pub fn register_transformer_layer(
    store: &mut ParamStore,
    prefix: &str,
    d_e: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) {
    register_mha(store, &format!("{prefix}.attn"), d_e, rng);
    register_layer_norm(store, &format!("{prefix}.ln1"), d_e);
    register_ffn(store, &format!("{prefix}.ffn"), d_e, d_ff, d_e, rng);
    register_layer_norm(store, &format!("{prefix}.ln2"), d_e);
}

/// Causal mask for a sequence of length `t` (row i attends to 0..=i).
pub fn causal_mask(t: usize) -> Rc<Vec<bool>> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = true;
        }
    }
    Rc::new(m)
}
