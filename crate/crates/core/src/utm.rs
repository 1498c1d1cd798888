//! Unified topic model over the document and one side channel.
//!
//! Bag-of-words (or pooled visual feature) inputs are encoded to diagonal
//! Gaussian latents per channel, reparameterized, summed, and softmaxed into
//! a topic mixture that predicts the summary bag-of-words through the
//! topic-word matrix. The training objective combines closed-form squared
//! 2-Wasserstein distances to the standard normal with the reconstruction
//! cross-entropy. Topic embeddings for the graph encoder are produced by a
//! relu perceptron applied to the rows of the topic-word matrix.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;

use crate::blocks::{ffn, linear, register_ffn, register_linear, Ctx, NumericsError, ParamStore};
use crate::corpus::TopicVocab;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Shape bookkeeping for the UTM parameter set.
#[derive(Clone, Copy, Debug)]
pub struct UtmDims {
    /// Topic count K.
    pub k: usize,
    /// Hidden width of the prior perceptrons.
    pub hidden: usize,
    /// Node embedding width produced by `topic_embeddings`.
    pub d_e: usize,
    /// Topic vocabulary size.
    pub vt: usize,
    /// Visual feature dimension (side perceptrons read a projection of this
    /// when the corpus side channel is visual).
    pub visual_dim: usize,
    /// True when the side channel carries visual feature vectors.
    pub visual_side: bool,
}

impl UtmDims {
    fn side_input_width(&self) -> usize {
        if self.visual_side {
            self.hidden
        } else {
            self.vt
        }
    }
}

pub fn register_utm(store: &mut ParamStore, dims: &UtmDims, rng: &mut ChaCha8Rng) {
    let sw = dims.side_input_width();
    register_ffn(store, "utm.mu_d", dims.vt, dims.hidden, dims.k, rng);
    register_ffn(store, "utm.sig_d", dims.vt, dims.hidden, dims.k, rng);
    register_ffn(store, "utm.mu_s", sw, dims.hidden, dims.k, rng);
    register_ffn(store, "utm.sig_s", sw, dims.hidden, dims.k, rng);
    register_linear(store, "utm.vis_in", dims.visual_dim, dims.hidden, rng);
    store.register("utm.w_phi", &[dims.k, dims.vt], rng);
    register_ffn(store, "utm.f_phi", dims.vt, dims.hidden, dims.d_e, rng);
    // frozen stand-in topic embeddings for the no-topic-model ablation
    store.register("utm.fixed_topics", &[dims.k, dims.d_e], rng);
}

/// Side-channel input to the topic model for one sample.
pub enum UtmSideInput<'a> {
    Absent,
    Bow(&'a [f64]),
    Visual(&'a [Vec<f64>]),
}

/// Per-sample forward results.
pub struct UtmSampleOut<'t> {
    pub mu_d: Var<'t>,
    pub log_sig_d: Var<'t>,
    pub z_d: Var<'t>,
    /// Present when the sample has a side channel.
    pub side: Option<(Var<'t>, Var<'t>, Var<'t>)>,
    pub theta: Var<'t>,
    /// Log of the predicted summary bag-of-words distribution.
    pub log_bow: Var<'t>,
}

fn l1_normalized(counts: &[f64]) -> Tensor {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        Tensor::vector(counts.iter().map(|&c| c / total).collect())
    } else {
        Tensor::vector(counts.to_vec())
    }
}

/// One prior head: `(mu, log_sigma) = (f_mu(h), f_sigma(h))`, both length K.
pub fn encode_prior<'t>(
    ctx: &Ctx<'_, 't, '_>,
    h: Var<'t>,
    mu_prefix: &str,
    sig_prefix: &str,
) -> Result<(Var<'t>, Var<'t>), NumericsError> {
    let mu = ffn(ctx, h.as_row(), mu_prefix)?.squeeze();
    let log_sig = ffn(ctx, h.as_row(), sig_prefix)?.squeeze();
    Ok((mu, log_sig))
}

/// Reparameterized draw `z = mu + exp(log_sigma) * eps`.
pub fn sample_latent<'t>(ctx: &Ctx<'_, 't, '_>, mu: Var<'t>, log_sig: Var<'t>, eps: &Tensor) -> Var<'t> {
    let eps = ctx.tape.constant(eps.clone());
    mu.add(log_sig.exp().mul(eps))
}

/// Topic mixture `theta = softmax(z_d + z_s)`.
pub fn mix_topics<'t>(z_d: Var<'t>, z_s: Var<'t>) -> Var<'t> {
    z_d.add(z_s).as_row().softmax(None).squeeze()
}

/// Log of `softmax(theta W_phi)` over the topic vocabulary.
pub fn predict_log_bow<'t>(theta: Var<'t>, w_phi: Var<'t>) -> Var<'t> {
    theta.as_row().matmul(w_phi).log_softmax().squeeze()
}

/// Closed-form squared 2-Wasserstein distance between a diagonal Gaussian and
/// the standard normal: `|mu|^2 + sum_i (sigma_i - 1)^2`.
pub fn wasserstein_gaussian<'t>(mu: Var<'t>, log_sig: Var<'t>) -> Var<'t> {
    let sig_term = log_sig.exp().add_scalar(-1.0).square().sum();
    mu.square().sum().add(sig_term)
}

/// Full per-sample forward. `eps_d`/`eps_s` are standard-normal draws in
/// training and zero vectors for deterministic inference.
pub fn forward<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &UtmDims,
    doc_bow: &[f64],
    side: UtmSideInput<'_>,
    eps_d: &Tensor,
    eps_s: &Tensor,
) -> Result<UtmSampleOut<'t>, NumericsError> {
    let h_d = ctx.tape.constant(l1_normalized(doc_bow));
    let (mu_d, log_sig_d) = encode_prior(ctx, h_d, "utm.mu_d", "utm.sig_d")?;
    let z_d = sample_latent(ctx, mu_d, log_sig_d, eps_d);

    let side_out = match side {
        UtmSideInput::Absent => None,
        UtmSideInput::Bow(counts) => {
            let h_s = ctx.tape.constant(l1_normalized(counts));
            let (mu_s, log_sig_s) = encode_prior(ctx, h_s, "utm.mu_s", "utm.sig_s")?;
            let z_s = sample_latent(ctx, mu_s, log_sig_s, eps_s);
            Some((mu_s, log_sig_s, z_s))
        }
        UtmSideInput::Visual(vectors) => {
            if vectors.is_empty() {
                None
            } else {
                let dim = dims.visual_dim;
                let mut pooled = vec![0.0; dim];
                for v in vectors {
                    if v.len() != dim {
                        return Err(NumericsError::Shape(format!(
                            "visual vector length {} != visual_dim {}",
                            v.len(),
                            dim
                        )));
                    }
                    for (p, x) in pooled.iter_mut().zip(v) {
                        *p += x / vectors.len() as f64;
                    }
                }
                let pooled = ctx.tape.constant(Tensor::vector(pooled));
                let h_s = linear(ctx, pooled.as_row(), "utm.vis_in.w", "utm.vis_in.b").squeeze();
                let (mu_s, log_sig_s) = encode_prior(ctx, h_s, "utm.mu_s", "utm.sig_s")?;
                let z_s = sample_latent(ctx, mu_s, log_sig_s, eps_s);
                Some((mu_s, log_sig_s, z_s))
            }
        }
    };

    let z_s = match &side_out {
        Some((_, _, z_s)) => *z_s,
        None => ctx.tape.constant(Tensor::zeros(&[dims.k])),
    };
    let theta = mix_topics(z_d, z_s);
    let log_bow = predict_log_bow(theta, ctx.var("utm.w_phi"));
    Ok(UtmSampleOut {
        mu_d,
        log_sig_d,
        z_d,
        side: side_out,
        theta,
        log_bow,
    })
}

/// Per-sample loss: Wasserstein terms for every present channel plus the
/// reconstruction cross-entropy against the count-normalized summary
/// bag-of-words. A summary with no topic-vocabulary tokens contributes no
/// reconstruction term.
pub fn sample_loss<'t>(ctx: &Ctx<'_, 't, '_>, out: &UtmSampleOut<'t>, y_bow: &[f64]) -> Var<'t> {
    let mut loss = wasserstein_gaussian(out.mu_d, out.log_sig_d);
    if let Some((mu_s, log_sig_s, _)) = &out.side {
        loss = loss.add(wasserstein_gaussian(*mu_s, *log_sig_s));
    }
    let total: f64 = y_bow.iter().sum();
    if total > 0.0 {
        let target = ctx
            .tape
            .constant(Tensor::vector(y_bow.iter().map(|&c| c / total).collect()));
        loss = loss.add(target.mul(out.log_bow).sum().neg());
    }
    loss
}

/// Mean loss over a batch of `(doc_bow, side, y_bow)` triples with fixed
/// per-sample noise.
pub fn batch_loss<'t>(
    ctx: &Ctx<'_, 't, '_>,
    dims: &UtmDims,
    items: &[(&[f64], UtmSideInput<'_>, &[f64])],
    eps: &[(Tensor, Tensor)],
) -> Result<Var<'t>, NumericsError> {
    assert_eq!(items.len(), eps.len());
    let mut total: Option<Var<'t>> = None;
    for ((doc, side, y), (eps_d, eps_s)) in items.iter().zip(eps) {
        let out = match side {
            UtmSideInput::Absent => forward(ctx, dims, doc, UtmSideInput::Absent, eps_d, eps_s)?,
            UtmSideInput::Bow(b) => forward(ctx, dims, doc, UtmSideInput::Bow(b), eps_d, eps_s)?,
            UtmSideInput::Visual(v) => {
                forward(ctx, dims, doc, UtmSideInput::Visual(v), eps_d, eps_s)?
            }
        };
        let l = sample_loss(ctx, &out, y);
        total = Some(match total {
            Some(t) => t.add(l),
            None => l,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / items.len() as f64))
}

/// Topic node features `H^o = f_phi(W_phi)`, row per topic.
pub fn topic_embeddings<'t>(ctx: &Ctx<'_, 't, '_>) -> Result<Var<'t>, NumericsError> {
    ffn(ctx, ctx.var("utm.w_phi"), "utm.f_phi")
}

/// Top-`k` words per topic by topic-word weight, ties broken by word index.
pub fn top_words(w_phi: &Tensor, vocab_t: &TopicVocab, k: usize) -> Vec<Vec<String>> {
    assert!(k <= vocab_t.len(), "k exceeds topic vocabulary");
    let (topics, vt) = (w_phi.rows(), w_phi.cols());
    (0..topics)
        .map(|t| {
            let row = w_phi.row_slice(t);
            let mut idx: Vec<usize> = (0..vt).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(k);
            idx.into_iter().map(|i| vocab_t.word(i).to_string()).collect()
        })
        .collect()
}

/// Mean NPMI over all within-topic word pairs, measured with document-level
/// co-occurrence counts, add-one smoothing over `D + 2`, and clamping of each
/// pairwise score into `[-1, 1]`.
pub fn topic_coherence_npmi(topics: &[Vec<String>], docs: &[Vec<String>]) -> f64 {
    assert!(!docs.is_empty(), "coherence needs at least one document");
    let doc_sets: Vec<HashSet<&str>> = docs
        .iter()
        .map(|d| d.iter().map(|s| s.as_str()).collect())
        .collect();
    let d = docs.len() as f64;
    let df = |w: &str| doc_sets.iter().filter(|s| s.contains(w)).count() as f64;
    let df2 = |a: &str, b: &str| {
        doc_sets
            .iter()
            .filter(|s| s.contains(a) && s.contains(b))
            .count() as f64
    };
    let p = |count: f64| (count + 1.0) / (d + 2.0);

    let mut total = 0.0;
    let mut pairs = 0usize;
    for topic in topics {
        for i in 0..topic.len() {
            for j in (i + 1)..topic.len() {
                let (a, b) = (&topic[i], &topic[j]);
                let p_a = p(df(a));
                let p_b = p(df(b));
                let p_ab = p(df2(a, b));
                let npmi = (p_ab / (p_a * p_b)).ln() / -p_ab.ln();
                total += npmi.clamp(-1.0, 1.0);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{AttnSettings, BoundParams};
    use crate::gradcheck::grad_check_params;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};

    fn dims() -> UtmDims {
        UtmDims {
            k: 3,
            hidden: 5,
            d_e: 4,
            vt: 6,
            visual_dim: 4,
            visual_side: false,
        }
    }

    fn settings() -> AttnSettings {
        AttnSettings {
            d_e: 4,
            heads: 2,
            scaled_logits: false,
        }
    }

    fn store_with(dims: &UtmDims, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_utm(&mut store, dims, &mut rng);
        store
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_prior() {
        let d = dims();
        let mut store = store_with(&d, 1);
        for name in ["utm.mu_d.b1", "utm.mu_d.b2", "utm.sig_d.b1", "utm.sig_d.b2"] {
            store.get_mut(name).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let h = tape.constant(Tensor::zeros(&[d.vt]));
        let (mu, log_sig) = encode_prior(&ctx, h, "utm.mu_d", "utm.sig_d").unwrap();
        assert_eq!(mu.shape(), vec![d.k]);
        assert!(mu.value().data().iter().all(|v| *v == 0.0));
        assert!(log_sig.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_prior_matches_matrix_oracle() {
        let d = UtmDims {
            k: 2,
            hidden: 3,
            d_e: 4,
            vt: 3,
            visual_dim: 4,
            visual_side: false,
        };
        let store = store_with(&d, 2);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let h = Tensor::vector(vec![0.2, 0.5, 0.3]);
        let (mu, _) = encode_prior(&ctx, tape.constant(h.clone()), "utm.mu_d", "utm.sig_d").unwrap();
        let affine = |inp: &Tensor, w: &str, b: &str| -> Tensor {
            let mut r = inp.matmul(store.get(w));
            for (v, bv) in r.data_mut().iter_mut().zip(store.get(b).data()) {
                *v += bv;
            }
            r
        };
        let hidden = affine(&h.clone().reshape(vec![1, 3]), "utm.mu_d.w1", "utm.mu_d.b1")
            .map(|v| v.max(0.0));
        let expect = affine(&hidden, "utm.mu_d.w2", "utm.mu_d.b2");
        for (a, b) in mu.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterization_cases() {
        let tape = Tape::new();
        let store = store_with(&dims(), 3);
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let mu = tape.constant(Tensor::vector(vec![0.7, -0.2]));
        let log_sig = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let z = sample_latent(&ctx, mu, log_sig, &Tensor::zeros(&[2]));
        assert_eq!(z.value().data(), &[0.7, -0.2]);

        let mu0 = tape.constant(Tensor::zeros(&[2]));
        let z = sample_latent(&ctx, mu0, log_sig, &Tensor::vector(vec![1.0, -1.0]));
        assert_eq!(z.value().data(), &[1.0, -1.0]);
    }

    #[test]
    fn reparameterization_monte_carlo_mean() {
        let tape = Tape::new();
        let store = store_with(&dims(), 4);
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let mu_val = 0.4;
        let sigma = 0.5f64;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            let mu = tape.constant(Tensor::vector(vec![mu_val]));
            let ls = tape.constant(Tensor::vector(vec![sigma.ln()]));
            total += sample_latent(&ctx, mu, ls, &Tensor::vector(vec![eps])).value().data()[0];
        }
        let mean = total / n as f64;
        let se = sigma / (n as f64).sqrt();
        assert!((mean - mu_val).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn mixture_cases() {
        let tape = Tape::new();
        let z0 = tape.constant(Tensor::zeros(&[4]));
        let theta = mix_topics(z0, z0).value();
        for v in theta.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let theta = mix_topics(a, b).value();
        assert!((theta.data()[0] - 0.5).abs() < 1e-12);

        // identical permutation of both inputs permutes theta
        let x = tape.constant(Tensor::vector(vec![0.3, -1.0, 0.8]));
        let y = tape.constant(Tensor::vector(vec![0.1, 0.4, -0.2]));
        let t1 = mix_topics(x, y).value();
        let xp = tape.constant(Tensor::vector(vec![0.8, 0.3, -1.0]));
        let yp = tape.constant(Tensor::vector(vec![-0.2, 0.1, 0.4]));
        let t2 = mix_topics(xp, yp).value();
        assert!((t1.data()[0] - t2.data()[1]).abs() < 1e-12);
        assert!((t1.data()[2] - t2.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn bow_prediction_cases() {
        let tape = Tape::new();
        // one-hot theta selects a row
        let theta = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let w = tape.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
        let log_bow = predict_log_bow(theta, w).value();
        let z: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        for (j, lb) in log_bow.data().iter().enumerate() {
            assert!((lb - ((j + 1) as f64 - z)).abs() < 1e-12);
        }

        // zero matrix -> uniform
        let w0 = tape.constant(Tensor::zeros(&[2, 3]));
        let log_bow = predict_log_bow(theta, w0).value();
        for lb in log_bow.data() {
            assert!((lb.exp() - 1.0 / 3.0).abs() < 1e-12);
        }

        // 2x2 hand case
        let theta = tape.constant(Tensor::vector(vec![0.25, 0.75]));
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let log_bow = predict_log_bow(theta, w).value();
        let logits = [0.25f64, 0.75f64];
        let z = (logits[0].exp() + logits[1].exp()).ln();
        assert!((log_bow.data()[0] - (0.25 - z)).abs() < 1e-12);
        assert!((log_bow.data()[1] - (0.75 - z)).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_closed_form_values() {
        let tape = Tape::new();
        let zero2 = tape.constant(Tensor::zeros(&[2]));
        assert!(wasserstein_gaussian(zero2, zero2).item().abs() < 1e-12);

        let mu = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let ls = tape.constant(Tensor::zeros(&[2]));
        assert!((wasserstein_gaussian(mu, ls).item() - 1.0).abs() < 1e-12);

        let mu = tape.constant(Tensor::vector(vec![0.5, -0.5]));
        let ls = tape.constant(Tensor::vector(vec![2f64.ln(), 0.5f64.ln()]));
        assert!((wasserstein_gaussian(mu, ls).item() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn zeroed_model_loss_is_log_vt() {
        let d = dims();
        let mut store = store_with(&d, 6);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let doc = vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let mut y = vec![0.0; d.vt];
        y[2] = 1.0; // single-token summary
        let eps = vec![(Tensor::zeros(&[d.k]), Tensor::zeros(&[d.k]))];
        let items = vec![(doc.as_slice(), UtmSideInput::Absent, y.as_slice())];
        let loss = batch_loss(&ctx, &d, &items, &eps).unwrap().item();
        // mu = 0, sigma = 1 -> zero Wasserstein; uniform bow -> ln |V_t|
        assert!((loss - (d.vt as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn side_channel_only_adds_side_terms() {
        let d = dims();
        let store = store_with(&d, 7);
        let doc = vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let side = vec![0.0, 2.0, 0.0, 1.0, 0.0, 0.0];
        let y = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let eps = (Tensor::zeros(&[d.k]), Tensor::zeros(&[d.k]));

        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let absent = forward(&ctx, &d, &doc, UtmSideInput::Absent, &eps.0, &eps.1).unwrap();
        let with_side =
            forward(&ctx, &d, &doc, UtmSideInput::Bow(&side), &eps.0, &eps.1).unwrap();
        // document-channel outputs are identical in both cases
        assert_eq!(absent.mu_d.value(), with_side.mu_d.value());
        assert_eq!(absent.z_d.value(), with_side.z_d.value());
        assert!(absent.side.is_none());
        assert!(with_side.side.is_some());
        let l_absent = sample_loss(&ctx, &absent, &y).item();
        let l_side = sample_loss(&ctx, &with_side, &y).item();
        assert!(l_absent.is_finite() && l_side.is_finite());
    }

    #[test]
    fn theta_is_a_distribution_and_forward_is_deterministic() {
        let d = dims();
        let store = store_with(&d, 8);
        let doc = vec![0.0, 3.0, 1.0, 0.0, 2.0, 1.0];
        let eps = (Tensor::zeros(&[d.k]), Tensor::zeros(&[d.k]));
        let run = || {
            let tape = Tape::new();
            let bound = BoundParams::new(&tape, &store);
            let ctx = Ctx::eval(&tape, &bound, settings());
            let out = forward(&ctx, &d, &doc, UtmSideInput::Absent, &eps.0, &eps.1).unwrap();
            (out.theta.value(), out.log_bow.value())
        };
        let (t1, b1) = run();
        let (t2, b2) = run();
        assert_eq!(t1, t2);
        assert_eq!(b1, b2);
        let sum: f64 = t1.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(t1.data().iter().all(|v| *v >= 0.0));
        let bow_sum: f64 = b1.data().iter().map(|v| v.exp()).sum();
        assert!((bow_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn visual_side_pools_and_projects() {
        let d = UtmDims {
            visual_side: true,
            ..dims()
        };
        let store = store_with(&d, 9);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, settings());
        let doc = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let vs = vec![vec![0.1, 0.2, -0.3, 0.4], vec![0.3, 0.0, 0.1, -0.2]];
        let eps = (Tensor::zeros(&[d.k]), Tensor::zeros(&[d.k]));
        let out = forward(&ctx, &d, &doc, UtmSideInput::Visual(&vs), &eps.0, &eps.1).unwrap();
        assert!(out.side.is_some());
        // wrong feature width is an error
        let bad = vec![vec![0.1, 0.2]];
        assert!(forward(&ctx, &d, &doc, UtmSideInput::Visual(&bad), &eps.0, &eps.1).is_err());
    }

    #[test]
    fn utm_loss_gradients_match_finite_differences() {
        let d = dims();
        let store = store_with(&d, 10);
        let doc = vec![1.0, 0.0, 2.0, 1.0, 0.0, 1.0];
        let side = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let y = vec![1.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps: Vec<(Tensor, Tensor)> = (0..2)
            .map(|_| {
                let draw = |rng: &mut ChaCha8Rng| {
                    Tensor::vector(
                        (0..d.k)
                            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .collect(),
                    )
                };
                (draw(&mut rng), draw(&mut rng))
            })
            .collect();
        let err = grad_check_params(
            |tape, bound| {
                let ctx = Ctx::eval(tape, bound, settings());
                let items = vec![
                    (doc.as_slice(), UtmSideInput::Bow(&side), y.as_slice()),
                    (doc.as_slice(), UtmSideInput::Absent, y.as_slice()),
                ];
                batch_loss(&ctx, &d, &items, &eps).unwrap()
            },
            &store,
        )
        .unwrap();
        assert!(err < 1e-4, "grad err {err}");
    }

    #[test]
    fn top_words_cases() {
        let tv = TopicVocab::from_words(
            ["economy", "sports", "science", "art"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let mut w = Tensor::zeros(&[2, 4]);
        w.set(0, 0, 5.0); // topic 0 one-hot on "economy"
        w.set(1, 2, 1.0);
        w.set(1, 3, 1.0); // tie: lower index first
        let tops = top_words(&w, &tv, 2);
        assert_eq!(tops[0][0], "economy");
        assert_eq!(tops[1], vec!["science", "art"]);

        // k = |V_t| yields a permutation
        let tops = top_words(&w, &tv, 4);
        let mut sorted = tops[0].clone();
        sorted.sort();
        assert_eq!(sorted, vec!["art", "economy", "science", "sports"]);
    }

    #[test]
    fn top_words_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let words: Vec<String> = (0..20).map(|i| format!("v{i:02}")).collect();
        let tv = TopicVocab::from_words(words.clone());
        let w = Tensor::uniform(&[5, 20], -1.0, 1.0, &mut rng);
        let tops = top_words(&w, &tv, 7);
        for (t, top) in tops.iter().enumerate() {
            let mut pairs: Vec<(f64, usize)> =
                w.row_slice(t).iter().cloned().zip(0..20).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<String> = pairs.iter().take(7).map(|&(_, i)| words[i].clone()).collect();
            assert_eq!(*top, expect);
        }
    }

    #[test]
    fn npmi_cases() {
        // always co-occurring pair over 100 documents
        let docs: Vec<Vec<String>> = (0..100)
            .map(|_| vec!["alpha".to_string(), "beta".to_string()])
            .collect();
        let score = topic_coherence_npmi(&[vec!["alpha".into(), "beta".into()]], &docs);
        assert!((score - 1.0).abs() < 0.05, "score {score}");

        // independent words over a large random corpus
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let docs: Vec<Vec<String>> = (0..2000)
            .map(|_| {
                let mut d = Vec::new();
                if rng.random::<f64>() < 0.5 {
                    d.push("left".to_string());
                }
                if rng.random::<f64>() < 0.5 {
                    d.push("right".to_string());
                }
                d.push("filler".to_string());
                d
            })
            .collect();
        let score = topic_coherence_npmi(&[vec!["left".into(), "right".into()]], &docs);
        assert!(score.abs() < 0.1, "score {score}");

        // single-document corpus: finite, no division by zero
        let docs = vec![vec!["a".to_string(), "b".to_string()]];
        let score = topic_coherence_npmi(&[vec!["a".into(), "b".into()]], &docs);
        assert!(score.is_finite());
        assert!((-1.0..=1.0).contains(&score));
    }
}
