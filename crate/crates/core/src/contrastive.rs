//! Triplet contrastive alignment of document, side, and summary
//! representations.
//!
//! Positives pair the pooled document (D), pooled side (S), and final decoder
//! state (G) of the same sample; negatives swap in the plain-encoded document
//! and side of another batch member and that member's G. The loss is the
//! negative log ratio of exponentiated positive-pair cosines over all pairs
//! at temperature tau.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocks::{Ctx, NumericsError};
use crate::tape::Var;
use crate::tensor::Tensor;

const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Pooled representations for one sample. `side` is `None` when the sample
/// has no side channel; its pooled stand-in is the zero vector.
pub struct SampleReps<'t> {
    pub doc: Var<'t>,
    pub side: Option<Var<'t>>,
    pub gen: Var<'t>,
}

/// Negative counterparts drawn from another batch member.
pub struct SampleNegatives<'t> {
    pub doc: Var<'t>,
    pub side: Option<Var<'t>>,
    pub gen: Var<'t>,
}

/// Mean-pool encoded node rows into (D, S); G is the supplied final decoder
/// state.
pub fn pool_representations<'t>(
    doc_nodes: Var<'t>,
    side_nodes: Option<Var<'t>>,
    g_final: Var<'t>,
) -> SampleReps<'t> {
    SampleReps {
        doc: doc_nodes.mean_rows(),
        side: side_nodes.map(|s| s.mean_rows()),
        gen: g_final,
    }
}

/// Uniform choice of a different batch index per sample; deterministic under
/// the caller's seeded generator.
pub fn negative_indices(batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(batch >= 2, "negatives need a batch of at least two");
    (0..batch)
        .map(|i| {
            let j = rng.random_range(0..batch - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Cosine similarity as a tape scalar; a pair with a (numerically) zero-norm
/// member is defined as zero similarity and carries no gradient.
pub fn cosine<'t>(ctx: &Ctx<'_, 't, '_>, a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let norm_a = a.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a < ZERO_NORM_EPS || norm_b < ZERO_NORM_EPS {
        return ctx.tape.constant(Tensor::scalar(0.0));
    }
    let dot = a.dot(b);
    let denom = a.square().sum().sqrt().mul(b.square().sum().sqrt());
    dot.div(denom)
}

/// Triplet loss for one sample.
///
/// With a side channel the positive pairs are (D,S), (S,G), (G,D) and the
/// negative pairs (D,S-), (S,G-), (G,D-); without one, only (G,D) and
/// (G,D-) participate.
pub fn sample_triplet_loss<'t>(
    ctx: &Ctx<'_, 't, '_>,
    reps: &SampleReps<'t>,
    negatives: &SampleNegatives<'t>,
    tau: f64,
) -> Result<Var<'t>, ContrastiveError> {
    if tau <= 0.0 {
        return Err(ContrastiveError::BadTemperature(tau));
    }
    let inv_tau = 1.0 / tau;
    let mut pos: Vec<Var<'t>> = Vec::new();
    let mut neg: Vec<Var<'t>> = Vec::new();
    match (&reps.side, &negatives.side) {
        (Some(s), neg_side) => {
            pos.push(cosine(ctx, reps.doc, *s));
            pos.push(cosine(ctx, *s, reps.gen));
            pos.push(cosine(ctx, reps.gen, reps.doc));
            let s_neg = neg_side.unwrap_or(negatives.doc);
            neg.push(cosine(ctx, reps.doc, s_neg));
            neg.push(cosine(ctx, *s, negatives.gen));
            neg.push(cosine(ctx, reps.gen, negatives.doc));
        }
        (None, _) => {
            pos.push(cosine(ctx, reps.gen, reps.doc));
            neg.push(cosine(ctx, reps.gen, negatives.doc));
        }
    }
    let sum_exp = |terms: &[Var<'t>]| -> Var<'t> {
        let mut total: Option<Var<'t>> = None;
        for t in terms {
            let e = t.scale(inv_tau).exp();
            total = Some(match total {
                Some(acc) => acc.add(e),
                None => e,
            });
        }
        total.expect("non-empty pair set")
    };
    let numerator = sum_exp(&pos);
    let denominator = numerator.add(sum_exp(&neg));
    Ok(numerator.div(denominator).ln().neg())
}

/// Mean triplet loss over a batch of (representations, negatives).
pub fn triplet_loss<'t>(
    ctx: &Ctx<'_, 't, '_>,
    batch: &[(SampleReps<'t>, SampleNegatives<'t>)],
    tau: f64,
) -> Result<Option<Var<'t>>, ContrastiveError> {
    if batch.len() < 2 {
        return Ok(None);
    }
    let mut total: Option<Var<'t>> = None;
    for (reps, negs) in batch {
        let l = sample_triplet_loss(ctx, reps, negs, tau)?;
        total = Some(match total {
            Some(acc) => acc.add(l),
            None => l,
        });
    }
    Ok(Some(total.unwrap().scale(1.0 / batch.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{AttnSettings, BoundParams, ParamStore};
    use crate::gradcheck::grad_check;
    use crate::tape::Tape;
    use rand::SeedableRng;

    fn ctx_fixture() -> (Tape, AttnSettings) {
        let attn = AttnSettings {
            d_e: 4,
            heads: 2,
            scaled_logits: false,
        };
        (Tape::new(), attn)
    }

    fn empty_store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn pooling_cases() {
        let tape = Tape::new();
        let single = tape.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]));
        let g = tape.constant(Tensor::vector(vec![0.0; 3]));
        let reps = pool_representations(single, None, g);
        assert_eq!(reps.doc.value().data(), &[0.5, -1.0, 2.0]);
        assert!(reps.side.is_none());

        let constant = tape.constant(Tensor::matrix(3, 2, vec![1.5, -0.5, 1.5, -0.5, 1.5, -0.5]));
        let reps = pool_representations(constant, None, g);
        assert_eq!(reps.doc.value().data(), &[1.5, -0.5]);

        // random case against an arithmetic-mean oracle
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let pooled = pool_representations(tape.constant(m.clone()), None, g)
            .doc
            .value();
        for j in 0..3 {
            let mean: f64 = (0..4).map(|i| m.at(i, j)).sum::<f64>() / 4.0;
            assert!((pooled.data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_indices_never_self_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let idx = negative_indices(6, &mut rng);
        for (i, &j) in idx.iter().enumerate() {
            assert_ne!(i, j);
            assert!(j < 6);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(idx, negative_indices(6, &mut rng2));

        // batch of two: forced swap
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(negative_indices(2, &mut rng), vec![1, 0]);
    }

    #[test]
    fn symmetric_point_gives_ln_two() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        // all six pairwise cosines equal (identical unit vectors)
        let v = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let reps = SampleReps {
            doc: v,
            side: Some(v),
            gen: v,
        };
        let negs = SampleNegatives {
            doc: v,
            side: Some(v),
            gen: v,
        };
        let loss = sample_triplet_loss(&ctx, &reps, &negs, 0.5).unwrap().item();
        assert!((loss - 2f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn hand_case_opposite_negatives() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        let v = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = tape.constant(Tensor::vector(vec![-1.0, 0.0]));
        let reps = SampleReps {
            doc: v,
            side: Some(v),
            gen: v,
        };
        let negs = SampleNegatives {
            doc: w,
            side: Some(w),
            gen: w,
        };
        // positives at cos 1, negatives at cos -1, tau = 0.5
        let loss = sample_triplet_loss(&ctx, &reps, &negs, 0.5).unwrap().item();
        let expect = -(3.0 * 2f64.exp() / (3.0 * 2f64.exp() + 3.0 * (-2f64).exp())).ln();
        assert!((loss - expect).abs() < 1e-9);
        assert!((expect - 0.0180).abs() < 5e-4);
    }

    #[test]
    fn loss_decreases_as_positive_cosine_rises() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        let base = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let neg = tape.constant(Tensor::vector(vec![-0.5, 0.8]));
        let negs = SampleNegatives {
            doc: neg,
            side: Some(neg),
            gen: neg,
        };
        let mut prev = f64::INFINITY;
        for angle in [1.2f64, 0.8, 0.4, 0.1] {
            let s = tape.constant(Tensor::vector(vec![angle.cos(), angle.sin()]));
            let reps = SampleReps {
                doc: base,
                side: Some(s),
                gen: base,
            };
            let loss = sample_triplet_loss(&ctx, &reps, &negs, 0.2).unwrap().item();
            assert!(loss < prev, "loss should fall as cos(D,S) rises");
            prev = loss;
        }
    }

    #[test]
    fn scale_invariance_of_cosine_loss() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vecs: Vec<Tensor> = (0..6).map(|_| Tensor::uniform(&[3], -1.0, 1.0, &mut rng)).collect();
        let build = |scale: f64| {
            let v: Vec<Var<'_>> = vecs
                .iter()
                .map(|t| tape.constant(t.map(|x| x * scale)))
                .collect();
            let reps = SampleReps {
                doc: v[0],
                side: Some(v[1]),
                gen: v[2],
            };
            let negs = SampleNegatives {
                doc: v[3],
                side: Some(v[4]),
                gen: v[5],
            };
            sample_triplet_loss(&ctx, &reps, &negs, 0.1).unwrap().item()
        };
        assert!((build(1.0) - build(3.7)).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_pairs_are_defined() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        let zero = tape.constant(Tensor::zeros(&[3]));
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
        assert_eq!(cosine(&ctx, zero, v).item(), 0.0);
        let reps = SampleReps {
            doc: v,
            side: Some(zero),
            gen: v,
        };
        let negs = SampleNegatives {
            doc: v,
            side: Some(zero),
            gen: v,
        };
        let loss = sample_triplet_loss(&ctx, &reps, &negs, 0.3).unwrap().item();
        assert!(loss.is_finite());
    }

    #[test]
    fn batch_of_one_skips_the_loss() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        assert!(triplet_loss(&ctx, &[], 0.1).unwrap().is_none());
    }

    #[test]
    fn bad_temperature_is_an_error() {
        let store = empty_store();
        let (tape, attn) = ctx_fixture();
        let bound = BoundParams::new(&tape, &store);
        let ctx = Ctx::eval(&tape, &bound, attn);
        let v = tape.constant(Tensor::vector(vec![1.0]));
        let reps = SampleReps {
            doc: v,
            side: None,
            gen: v,
        };
        let negs = SampleNegatives {
            doc: v,
            side: None,
            gen: v,
        };
        assert!(matches!(
            sample_triplet_loss(&ctx, &reps, &negs, 0.0),
            Err(ContrastiveError::BadTemperature(_))
        ));
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Tensor> = (0..6).map(|_| Tensor::uniform(&[4], -1.0, 1.0, &mut rng)).collect();
        let err = grad_check(
            |tape, vars| {
                let store = ParamStore::new();
                let bound = BoundParams::new(tape, &store);
                let ctx = Ctx::eval(
                    tape,
                    &bound,
                    AttnSettings {
                        d_e: 4,
                        heads: 2,
                        scaled_logits: false,
                    },
                );
                let reps = SampleReps {
                    doc: vars[0],
                    side: Some(vars[1]),
                    gen: vars[2],
                };
                let negs = SampleNegatives {
                    doc: vars[3],
                    side: Some(vars[4]),
                    gen: vars[5],
                };
                sample_triplet_loss(&ctx, &reps, &negs, 0.2).unwrap()
            },
            &points,
        )
        .unwrap();
        assert!(err < 1e-4, "grad err {err}");
    }
}
