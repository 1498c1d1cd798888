//! ROUGE-1/2/L metrics, the leading-sentences baseline, and batch
//! evaluation reports.
//!
//! Scoring is tokenized, lowercased, and stem-free; aggregate numbers are
//! arithmetic means of per-sample F1.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::Sample;
use crate::decoder::DecodeParams;
use crate::model::{ModelError, UssModel};
use crate::trainer::Pipeline;

/// Precision, recall, F1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Rouge {
    assert!(n >= 1);
    if candidate.len() < n || reference.len() < n {
        return Rouge::default();
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_default() += 1;
    }
    let mut overlap = 0usize;
    for gram in candidate.windows(n) {
        if let Some(c) = ref_counts.get_mut(gram) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let p = overlap as f64 / (candidate.len() - n + 1) as f64;
    let r = overlap as f64 / (reference.len() - n + 1) as f64;
    Rouge {
        precision: p,
        recall: r,
        f1: f1(p, r),
    }
}

/// Longest-common-subsequence overlap.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Rouge {
    if candidate.is_empty() || reference.is_empty() {
        return Rouge::default();
    }
    let (m, n) = (candidate.len(), reference.len());
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for i in 0..m {
        for j in 0..n {
            cur[j + 1] = if candidate[i] == reference[j] {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let lcs = prev[n] as f64;
    let p = lcs / m as f64;
    let r = lcs / n as f64;
    Rouge {
        precision: p,
        recall: r,
        f1: f1(p, r),
    }
}

/// ROUGE-1, ROUGE-2, and ROUGE-L in one pass.
pub fn rouge_scores<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> (Rouge, Rouge, Rouge) {
    (
        rouge_n(candidate, reference, 1),
        rouge_n(candidate, reference, 2),
        rouge_l(candidate, reference),
    )
}

/// Split a token sequence into sentences; the end marker stays with its
/// sentence.
pub fn split_sentences<T: Clone>(tokens: &[T], is_end: impl Fn(&T) -> bool) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        cur.push(t.clone());
        if is_end(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Concatenation of the first `min(3, count)` sentences.
pub fn lead3<T: Clone>(tokens: &[T], is_end: impl Fn(&T) -> bool) -> Vec<T> {
    split_sentences(tokens, is_end)
        .into_iter()
        .take(3)
        .flatten()
        .collect()
}

/// One evaluation row.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub r1_f: f64,
    pub r2_f: f64,
    pub rl_f: f64,
    pub summary_len: usize,
}

/// Per-sample rows plus the aggregate.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalRow,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let aggregate = EvalRow {
            id: "AGGREGATE".into(),
            r1_f: rows.iter().map(|r| r.r1_f).sum::<f64>() / n,
            r2_f: rows.iter().map(|r| r.r2_f).sum::<f64>() / n,
            rl_f: rows.iter().map(|r| r.rl_f).sum::<f64>() / n,
            summary_len: (rows.iter().map(|r| r.summary_len).sum::<usize>() as f64 / n).round()
                as usize,
        };
        EvalReport { rows, aggregate }
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "id,r1_f,r2_f,rl_f,summary_len")?;
        for row in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{}",
                row.id, row.r1_f, row.r2_f, row.rl_f, row.summary_len
            )?;
        }
        w.flush()
    }
}

/// Decode every sample with beam search and score against its reference.
/// Samples are processed in parallel when `threads > 1`; aggregation runs in
/// input order either way.
pub fn evaluate(
    model: &UssModel,
    pipeline: &Pipeline,
    samples: &[Sample],
    decode: &DecodeParams,
    threads: usize,
) -> Result<EvalReport, ModelError> {
    let score_one = |sample: &Sample| -> Result<EvalRow, ModelError> {
        let item = pipeline.item(sample, model.cfg.topics);
        let generated = model.summarize(&item, decode)?;
        let (r1, r2, rl) = rouge_scores(&generated, &sample.summary);
        Ok(EvalRow {
            id: sample.id.clone(),
            r1_f: r1.f1,
            r2_f: r2.f1,
            rl_f: rl.f1,
            summary_len: generated.len(),
        })
    };
    let rows: Result<Vec<EvalRow>, ModelError> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| samples.par_iter().map(score_one).collect())
    } else {
        samples.iter().map(score_one).collect()
    };
    Ok(EvalReport::from_rows(rows?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_disjoint_sequences() {
        let a = ["the", "cat", "sat"];
        let (r1, r2, rl) = rouge_scores(&a, &a);
        assert_eq!((r1.f1, r2.f1, rl.f1), (1.0, 1.0, 1.0));

        let b = ["dog", "ran", "away"];
        let (r1, r2, rl) = rouge_scores(&a, &b);
        assert_eq!((r1.f1, r2.f1, rl.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_counted_unigram_case() {
        let cand = ["the", "cat", "sat"];
        let refr = ["the", "cat"];
        let r = rouge_n(&cand, &refr, 1);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 1.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lcs_hand_case_and_empty() {
        let cand = ["a", "c", "b", "d"];
        let refr = ["a", "b", "c", "d"];
        let r = rouge_l(&cand, &refr);
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.75).abs() < 1e-12);
        assert!((r.f1 - 0.75).abs() < 1e-12);

        let empty: [&str; 0] = [];
        assert_eq!(rouge_l(&empty, &refr), Rouge::default());
    }

    #[test]
    fn lead3_cases() {
        let is_end = |t: &&str| *t == ".";
        let tokens = ["a", ".", "b", ".", "c", ".", "d", ".", "e", "."];
        assert_eq!(lead3(&tokens, is_end), ["a", ".", "b", ".", "c", "."]);

        let two = ["a", ".", "b", "."];
        assert_eq!(lead3(&two, is_end), two);

        let unterminated = ["a", ".", "b"];
        assert_eq!(lead3(&unterminated, is_end), unterminated);
    }

    // independent brute-force oracles
    fn rouge_n_oracle(cand: &[u32], refr: &[u32], n: usize) -> (f64, f64, f64) {
        if cand.len() < n || refr.len() < n {
            return (0.0, 0.0, 0.0);
        }
        let grams = |s: &[u32]| -> Vec<Vec<u32>> { s.windows(n).map(|w| w.to_vec()).collect() };
        let c = grams(cand);
        let r = grams(refr);
        let mut overlap = 0;
        let mut used = vec![false; r.len()];
        for g in &c {
            if let Some(j) = r
                .iter()
                .enumerate()
                .position(|(j, h)| !used[j] && h == g)
            {
                used[j] = true;
                overlap += 1;
            }
        }
        let p = overlap as f64 / c.len() as f64;
        let rc = overlap as f64 / r.len() as f64;
        let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        (p, rc, f)
    }

    fn lcs_oracle(a: &[u32], b: &[u32]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..a.len() {
            for j in 0..b.len() {
                dp[i + 1][j + 1] = if a[i] == b[j] {
                    dp[i][j] + 1
                } else {
                    dp[i + 1][j].max(dp[i][j + 1])
                };
            }
        }
        dp[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn rouge_matches_brute_force_oracles(
            cand in proptest::collection::vec(0u32..8, 0..20),
            refr in proptest::collection::vec(0u32..8, 0..20),
        ) {
            for n in [1usize, 2] {
                let fast = rouge_n(&cand, &refr, n);
                let (p, r, f) = rouge_n_oracle(&cand, &refr, n);
                prop_assert!((fast.precision - p).abs() < 1e-12);
                prop_assert!((fast.recall - r).abs() < 1e-12);
                prop_assert!((fast.f1 - f).abs() < 1e-12);
            }
            let fast = rouge_l(&cand, &refr);
            if !cand.is_empty() && !refr.is_empty() {
                let l = lcs_oracle(&cand, &refr) as f64;
                prop_assert!((fast.precision - l / cand.len() as f64).abs() < 1e-12);
                prop_assert!((fast.recall - l / refr.len() as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn f1_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u32..6, 0..15),
            b in proptest::collection::vec(0u32..6, 0..15),
        ) {
            for n in [1usize, 2] {
                let x = rouge_n(&a, &b, n);
                let y = rouge_n(&b, &a, n);
                prop_assert!((x.f1 - y.f1).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.f1));
            }
            let x = rouge_l(&a, &b);
            let y = rouge_l(&b, &a);
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x.f1));
        }
    }
}
