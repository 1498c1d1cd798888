//! Synthetic corpora with planted structure.
//!
//! Two tasks:
//! - `topic-mixture`: every document, side channel, and summary is drawn from
//!   a per-document mixture of planted per-topic word distributions.
//! - `needle`: each document is a list of sentences keyed by distinct key
//!   tokens from distinct word groups; the side channel names the key of one
//!   sentence and the summary is that sentence verbatim.
//!
//! Generation is fully determined by the spec and a seed.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use thiserror::Error;

use crate::corpus::RawSample;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    TopicMixture,
    Needle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideKind {
    None,
    Text,
    Visual,
}

/// Generator configuration.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub task: SynthTask,
    /// Planted topic (word-group) count K*.
    pub planted_topics: usize,
    /// Content word count; words are split evenly across planted topics.
    pub vocab_size: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    /// Content tokens per document (topic-mixture).
    pub doc_len: usize,
    /// Content tokens per summary (topic-mixture).
    pub summary_len: usize,
    /// Content tokens per textual side channel.
    pub side_len: usize,
    /// Geometric decay of within-topic word probabilities.
    pub topic_word_decay: f64,
    /// Symmetric Dirichlet concentration for per-document mixtures.
    pub dirichlet_alpha: f64,
    /// Sentences per document (needle).
    pub sentences: usize,
    /// Content tokens per sentence, including the key token (needle).
    pub sentence_len: usize,
    /// Number of key tokens (needle).
    pub keys: usize,
    pub side_kind: SideKind,
    /// Feature dimension of visual side vectors.
    pub visual_dim: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: SynthTask::TopicMixture,
            planted_topics: 5,
            vocab_size: 200,
            train_docs: 200,
            val_docs: 50,
            test_docs: 50,
            doc_len: 60,
            summary_len: 12,
            side_len: 6,
            topic_word_decay: 0.8,
            dirichlet_alpha: 0.15,
            sentences: 4,
            sentence_len: 4,
            keys: 20,
            side_kind: SideKind::Text,
            visual_dim: 16,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: &str| Err(SynthError::Invalid(msg.into()));
        if self.planted_topics < 1 {
            return fail("planted_topics must be >= 1");
        }
        if self.vocab_size < self.planted_topics {
            return fail("vocab_size must be >= planted_topics");
        }
        if !(0.0 < self.topic_word_decay && self.topic_word_decay < 1.0) {
            return fail("topic_word_decay must lie in (0, 1)");
        }
        if self.dirichlet_alpha <= 0.0 {
            return fail("dirichlet_alpha must be positive");
        }
        match self.task {
            SynthTask::TopicMixture => {
                if self.doc_len < 1 || self.summary_len < 1 {
                    return fail("doc_len and summary_len must be >= 1");
                }
            }
            SynthTask::Needle => {
                if self.sentences < 1 || self.sentence_len < 2 {
                    return fail("needle requires sentences >= 1 and sentence_len >= 2");
                }
                if self.keys < self.sentences {
                    return fail("needle requires keys >= sentences");
                }
                if self.planted_topics < self.sentences {
                    return fail("needle requires planted_topics >= sentences");
                }
            }
        }
        if self.side_kind == SideKind::Text && self.side_len < 1 {
            return fail("side_len must be >= 1 for textual side");
        }
        if self.side_kind == SideKind::Visual && self.visual_dim < 1 {
            return fail("visual_dim must be >= 1 for visual side");
        }
        Ok(())
    }
}

/// Generated splits, ready to be written as corpus files.
pub struct SynthCorpus {
    pub train: Vec<RawSample>,
    pub val: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

/// Planted per-topic word distributions over the content vocabulary.
struct Planted {
    /// Per topic: (word index, probability), highest probability first.
    topics: Vec<Vec<(usize, f64)>>,
    /// Per topic prototype vector for visual side channels.
    prototypes: Vec<Vec<f64>>,
}

fn content_word(i: usize) -> String {
    format!("w{i:03}")
}

fn key_word(i: usize) -> String {
    format!("k{i:02}")
}

fn planted(spec: &SynthSpec, seed: u64) -> Planted {
    let k = spec.planted_topics;
    let block = spec.vocab_size / k;
    let mut topics = Vec::with_capacity(k);
    for t in 0..k {
        let lo = t * block;
        let hi = if t == k - 1 { spec.vocab_size } else { lo + block };
        let mut weights: Vec<(usize, f64)> = (lo..hi)
            .enumerate()
            .map(|(j, w)| (w, spec.topic_word_decay.powi(j as i32)))
            .collect();
        let total: f64 = weights.iter().map(|(_, p)| p).sum();
        for (_, p) in weights.iter_mut() {
            *p /= total;
        }
        topics.push(weights);
    }
    // prototypes depend only on the seed, not on the sampling stream
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f746f);
    let prototypes = (0..k)
        .map(|_| (0..spec.visual_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Planted { topics, prototypes }
}

/// Top `k` planted words of every topic, for recovery checks against a
/// trained topic model.
pub fn planted_top_words(spec: &SynthSpec, k: usize) -> Vec<Vec<String>> {
    let p = planted(spec, 0);
    p.topics
        .iter()
        .map(|t| t.iter().take(k).map(|&(w, _)| content_word(w)).collect())
        .collect()
}

fn sample_word(topic: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let dist = WeightedIndex::new(topic.iter().map(|&(_, p)| p)).expect("valid weights");
    topic[dist.sample(rng)].0
}

fn mixture_tokens(
    planted: &Planted,
    theta: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let topic_dist = WeightedIndex::new(theta).expect("valid mixture");
    let mut words = Vec::with_capacity(n + n / 10 + 1);
    for i in 0..n {
        let t = topic_dist.sample(rng);
        words.push(content_word(sample_word(&planted.topics[t], rng)));
        if (i + 1) % 10 == 0 && i + 1 < n {
            words.push(".".into());
        }
    }
    words.push(".".into());
    words
}

fn visual_vectors(
    planted: &Planted,
    theta: &[f64],
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    let base: f64 = theta
                        .iter()
                        .enumerate()
                        .map(|(t, &w)| w * planted.prototypes[t][d])
                        .sum();
                    base + rng.random_range(-0.05..0.05)
                })
                .collect()
        })
        .collect()
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn dirichlet_theta(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if spec.planted_topics == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0).expect("valid shape");
    let mut theta: Vec<f64> = (0..spec.planted_topics)
        .map(|_| gamma.sample(rng).max(1e-12))
        .collect();
    let total: f64 = theta.iter().sum();
    for t in theta.iter_mut() {
        *t /= total;
    }
    theta
}

fn gen_topic_mixture(spec: &SynthSpec, id: String, rng: &mut ChaCha8Rng) -> RawSample {
    let p = planted(spec, 0);
    let theta = dirichlet_theta(spec, rng);
    let document = mixture_tokens(&p, &theta, spec.doc_len, rng).join(" ");
    let summary = mixture_tokens(&p, &theta, spec.summary_len, rng).join(" ");
    let (side_text, side_visual) = match spec.side_kind {
        SideKind::None => (None, None),
        SideKind::Text => (
            Some(mixture_tokens(&p, &theta, spec.side_len, rng).join(" ")),
            None,
        ),
        SideKind::Visual => (
            None,
            Some(visual_vectors(&p, &theta, 3, spec.visual_dim, rng)),
        ),
    };
    RawSample {
        id,
        document,
        side_text,
        side_visual,
        summary,
    }
}

fn gen_needle(spec: &SynthSpec, id: String, rng: &mut ChaCha8Rng) -> RawSample {
    let p = planted(spec, 0);
    let k_star = spec.planted_topics;

    // distinct groups, one sentence each, keys chosen inside their group
    let mut groups: Vec<usize> = (0..k_star).collect();
    groups.shuffle(rng);
    groups.truncate(spec.sentences);

    let mut sentences = Vec::with_capacity(spec.sentences);
    let mut sentence_keys = Vec::with_capacity(spec.sentences);
    for &g in &groups {
        // key indices congruent to g modulo the group count
        let group_keys: Vec<usize> = (0..spec.keys).filter(|k| k % k_star == g).collect();
        let key = group_keys[rng.random_range(0..group_keys.len())];
        let mut words = vec![key_word(key)];
        for _ in 1..spec.sentence_len {
            words.push(content_word(sample_word(&p.topics[g], rng)));
        }
        words.push(".".into());
        sentence_keys.push((key, g));
        sentences.push(words.join(" "));
    }

    let target = rng.random_range(0..spec.sentences);
    let summary = sentences[target].clone();
    let (target_key, target_group) = sentence_keys[target];
    let (side_text, side_visual) = match spec.side_kind {
        SideKind::None => (None, None),
        SideKind::Text => {
            // the key names the wanted sentence; the remaining side tokens
            // are distractors drawn from the other groups
            let mut words = vec![key_word(target_key)];
            for _ in 1..spec.side_len {
                let g = (target_group + 1 + rng.random_range(0..k_star.max(2) - 1)) % k_star;
                words.push(content_word(sample_word(&p.topics[g], rng)));
            }
            (Some(words.join(" ")), None)
        }
        SideKind::Visual => {
            let theta: Vec<f64> = (0..k_star)
                .map(|t| if t == target_group { 1.0 } else { 0.0 })
                .collect();
            (None, Some(visual_vectors(&p, &theta, 2, spec.visual_dim, rng)))
        }
    };
    RawSample {
        id,
        document: sentences.join(" "),
        side_text,
        side_visual,
        summary,
    }
}

/// Generate all three splits; fully determined by `spec` and `seed`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen_split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<RawSample> {
        (0..count)
            .map(|i| {
                let id = format!("{name}-{i:05}");
                match spec.task {
                    SynthTask::TopicMixture => gen_topic_mixture(spec, id, rng),
                    SynthTask::Needle => gen_needle(spec, id, rng),
                }
            })
            .collect()
    };
    Ok(SynthCorpus {
        train: gen_split("train", spec.train_docs, &mut rng),
        val: gen_split("val", spec.val_docs, &mut rng),
        test: gen_split("test", spec.test_docs, &mut rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use std::collections::HashMap;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec {
            train_docs: 20,
            val_docs: 5,
            test_docs: 5,
            ..SynthSpec::default()
        };
        let a = generate(&spec, 7).unwrap();
        let b = generate(&spec, 7).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.document, y.document);
            assert_eq!(x.summary, y.summary);
            assert_eq!(x.side_text, y.side_text);
        }
        let c = generate(&spec, 8).unwrap();
        assert_ne!(a.train[0].document, c.train[0].document);
    }

    #[test]
    fn needle_summary_is_a_document_sentence() {
        let spec = SynthSpec {
            task: SynthTask::Needle,
            train_docs: 30,
            val_docs: 0,
            test_docs: 0,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec, 3).unwrap();
        for s in &corpus.train {
            let sentences: Vec<&str> = s
                .document
                .split(" . ")
                .map(|x| x.trim_end_matches(" ."))
                .collect();
            let summary = s.summary.trim_end_matches(" .");
            assert!(
                sentences.iter().any(|sent| *sent == summary),
                "summary {:?} not a sentence of {:?}",
                s.summary,
                s.document
            );
            // side names the key of the summary sentence
            let key = summary.split(' ').next().unwrap();
            let side = s.side_text.as_ref().unwrap();
            assert_eq!(side.split(' ').next().unwrap(), key);
        }
    }

    #[test]
    fn single_topic_documents_share_the_word_distribution() {
        // Monte-Carlo check: with one planted topic and a sharp word decay,
        // empirical unigram distributions of two documents stay close.
        let spec = SynthSpec {
            planted_topics: 1,
            vocab_size: 40,
            topic_word_decay: 0.3,
            doc_len: 200,
            train_docs: 40,
            val_docs: 0,
            test_docs: 0,
            side_kind: SideKind::None,
            ..SynthSpec::default()
        };
        let corpus = generate(&spec, 11).unwrap();
        let empirical = |text: &str| -> HashMap<String, f64> {
            let toks: Vec<String> = tokenize(text).into_iter().filter(|t| t != ".").collect();
            let mut m = HashMap::new();
            for t in &toks {
                *m.entry(t.clone()).or_insert(0.0) += 1.0 / toks.len() as f64;
            }
            m
        };
        let mut total_l1 = 0.0;
        let mut pairs = 0;
        for i in 0..corpus.train.len() {
            let a = empirical(&corpus.train[i].document);
            let b = empirical(&corpus.train[(i + 1) % corpus.train.len()].document);
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            let l1: f64 = keys
                .iter()
                .map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs())
                .sum();
            total_l1 += l1;
            pairs += 1;
        }
        let mean_l1 = total_l1 / pairs as f64;
        assert!(mean_l1 < 0.2, "mean L1 {mean_l1}");
    }

    #[test]
    fn invalid_specs_error() {
        let mut spec = SynthSpec::default();
        spec.planted_topics = 0;
        assert!(generate(&spec, 1).is_err());
        let mut spec = SynthSpec {
            task: SynthTask::Needle,
            ..SynthSpec::default()
        };
        spec.keys = 2;
        spec.sentences = 4;
        assert!(generate(&spec, 1).is_err());
    }

    #[test]
    fn planted_top_words_are_block_prefixes() {
        let spec = SynthSpec::default();
        let tops = planted_top_words(&spec, 3);
        assert_eq!(tops.len(), 5);
        assert_eq!(tops[0], vec!["w000", "w001", "w002"]);
        assert_eq!(tops[1], vec!["w040", "w041", "w042"]);
    }
}
