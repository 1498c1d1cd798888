//! Data model: tokenization, vocabulary construction, bag-of-words vectors,
//! and line-delimited JSON corpus I/O.
//!
//! Corpus files carry one JSON object per line with keys `id`, `document`,
//! `side_text`, `side_visual`, `summary`; at most one of the two side fields
//! may be non-null.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Words excluded from the topic-model vocabulary, together with any token
/// that contains no alphanumeric character (punctuation).
const STOPWORDS: [&str; 65] = [
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has", "have",
    "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "more", "most",
    "no", "not", "of", "on", "one", "or", "our", "she", "so", "some", "such", "than", "that",
    "the", "their", "then", "there", "they", "this", "to", "was", "were", "will", "with", "you",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: both side_text and side_visual present")]
    BothSides { line: usize },
    #[error("sample {id}: {msg}")]
    BadSample { id: String, msg: String },
}

/// One corpus line as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub document: String,
    pub side_text: Option<String>,
    pub side_visual: Option<Vec<Vec<f64>>>,
    pub summary: String,
}

/// Lowercased whitespace tokens with punctuation split off as its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn is_stopword(token: &str) -> bool {
    !token.chars().any(|c| c.is_alphanumeric()) || STOPWORDS.binary_search(&token).is_ok()
}

/// Bidirectional token map with reserved specials at ids 0-3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Rank tokens by frequency (descending) with lexicographic tie-break,
    /// drop those below `min_freq`, cap at `max_size` including specials.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, max_size: usize, min_freq: usize) -> Self {
        assert!(max_size > SPECIALS.len(), "max_size must exceed the specials");
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Rebuild from an ordered token list (checkpoint restore).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= SPECIALS.len());
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(tokens[i], *s, "specials must occupy ids 0-3");
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
        }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Join non-special tokens back into text.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i as usize >= SPECIALS.len())
            .map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}

/// Topic-model vocabulary: content words only, no specials, no stopwords.
#[derive(Clone, Debug)]
pub struct TopicVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TopicVocab {
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, max_size: usize, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                if !is_stopword(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_words(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        TopicVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Map full-vocabulary ids onto topic-vocabulary indices.
    pub fn projection(&self, vocab: &Vocabulary) -> Vec<Option<usize>> {
        (0..vocab.len() as u32)
            .map(|id| self.index_of(vocab.token(id)))
            .collect()
    }
}

/// Counts over the topic vocabulary; tokens outside it are dropped.
pub fn bow_vector(ids: &[u32], projection: &[Option<usize>], vt_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vt_size];
    for &id in ids {
        if let Some(Some(j)) = projection.get(id as usize) {
            counts[*j] += 1.0;
        }
    }
    counts
}

/// Side channel of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Side {
    Absent,
    Text(Vec<u32>),
    Visual(Vec<Vec<f64>>),
}

impl Side {
    pub fn is_absent(&self) -> bool {
        matches!(self, Side::Absent)
    }
}

/// One encoded training/evaluation unit.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub document: Vec<u32>,
    pub side: Side,
    pub summary: Vec<u32>,
}

/// Truncation maxima applied at encode time.
#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub doc: usize,
    pub side: usize,
    pub summary: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            doc: 256,
            side: 32,
            summary: 32,
        }
    }
}

/// Tokenize, map to ids, and truncate one raw sample.
pub fn encode_sample(
    raw: &RawSample,
    vocab: &Vocabulary,
    limits: &Limits,
) -> Result<Sample, CorpusError> {
    let mut document = vocab.encode(&raw.document);
    document.truncate(limits.doc);
    let mut summary = vocab.encode(&raw.summary);
    summary.truncate(limits.summary);
    if document.is_empty() {
        return Err(CorpusError::BadSample {
            id: raw.id.clone(),
            msg: "empty document".into(),
        });
    }
    if summary.is_empty() {
        return Err(CorpusError::BadSample {
            id: raw.id.clone(),
            msg: "empty summary".into(),
        });
    }
    let side = match (&raw.side_text, &raw.side_visual) {
        (Some(_), Some(_)) => {
            return Err(CorpusError::BadSample {
                id: raw.id.clone(),
                msg: "both side variants present".into(),
            })
        }
        (Some(text), None) => {
            let mut ids = vocab.encode(text);
            ids.truncate(limits.side);
            if ids.is_empty() {
                Side::Absent
            } else {
                Side::Text(ids)
            }
        }
        (None, Some(vectors)) => {
            let mut v = vectors.clone();
            v.truncate(limits.side);
            if v.is_empty() {
                Side::Absent
            } else {
                Side::Visual(v)
            }
        }
        (None, None) => Side::Absent,
    };
    Ok(Sample {
        id: raw.id.clone(),
        document,
        side,
        summary,
    })
}

/// Parse a line-delimited JSON corpus file, preserving order. Errors carry
/// 1-based line numbers.
pub fn load_raw(path: &Path) -> Result<Vec<RawSample>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if raw.side_text.is_some() && raw.side_visual.is_some() {
            return Err(CorpusError::BothSides { line: i + 1 });
        }
        out.push(raw);
    }
    Ok(out)
}

pub fn save_raw(path: &Path, samples: &[RawSample]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| CorpusError::Malformed {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Load and encode a corpus in one step.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    limits: &Limits,
) -> Result<Vec<Sample>, CorpusError> {
    load_raw(path)?
        .iter()
        .map(|raw| encode_sample(raw, vocab, limits))
        .collect()
}

/// Strip the side channel (side-masked training/evaluation).
pub fn mask_side(samples: &mut [Sample]) {
    for s in samples {
        s.side = Side::Absent;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("The cat sat."), vec!["the", "cat", "sat", "."]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("a,b"), vec!["a", ",", "b"]);
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographic() {
        let texts = ["a a b"];
        let v = Vocabulary::build(texts.iter().copied(), 10, 1);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("missing"), UNK);

        // equal frequency: lexicographic order
        let texts = ["y x"];
        let v = Vocabulary::build(texts.iter().copied(), 10, 1);
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("y"), 5);
    }

    #[test]
    fn min_freq_can_exclude_everything() {
        let texts = ["a a b"];
        let v = Vocabulary::build(texts.iter().copied(), 10, 3);
        assert_eq!(v.len(), 4); // specials only
    }

    #[test]
    fn empty_corpus_gives_specials_only() {
        let v = Vocabulary::build(std::iter::empty(), 10, 1);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn bow_counts_and_exclusions() {
        let tv = TopicVocab::from_words(vec!["cat".into(), "dog".into()]);
        let vocab = Vocabulary::build(["cat cat dog the ."].iter().copied(), 20, 1);
        let proj = tv.projection(&vocab);
        let ids = vocab.encode("cat cat dog");
        assert_eq!(bow_vector(&ids, &proj, 2), vec![2.0, 1.0]);
        assert_eq!(bow_vector(&[], &proj, 2), vec![0.0, 0.0]);
        // stopwords and punctuation never enter the topic vocabulary
        let all_stop = vocab.encode("the . the");
        assert_eq!(bow_vector(&all_stop, &proj, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn topic_vocab_excludes_stopwords() {
        let tv = TopicVocab::build(["the cat and the dog ."].iter().copied(), 100, 1);
        assert_eq!(tv.len(), 2);
        assert!(tv.index_of("the").is_none());
        assert!(tv.index_of(".").is_none());
        assert!(tv.index_of("cat").is_some());
    }

    #[test]
    fn corpus_round_trip_preserves_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let samples = vec![
            RawSample {
                id: "s1".into(),
                document: "one two three.".into(),
                side_text: Some("hint".into()),
                side_visual: None,
                summary: "two".into(),
            },
            RawSample {
                id: "s2".into(),
                document: "four five".into(),
                side_text: None,
                side_visual: Some(vec![vec![0.5, -1.0]]),
                summary: "five".into(),
            },
        ];
        save_raw(&path, &samples).unwrap();
        let back = load_raw(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(tokenize(&a.document), tokenize(&b.document));
            assert_eq!(tokenize(&a.summary), tokenize(&b.summary));
            assert_eq!(a.side_visual, b.side_visual);
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"document\":\"x\",\"side_text\":null,\"side_visual\":null,\"summary\":\"y\"}\nnot json\n",
        )
        .unwrap();
        match load_raw(&path) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn both_side_variants_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("both.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"document\":\"x\",\"side_text\":\"t\",\"side_visual\":[[1.0]],\"summary\":\"y\"}\n",
        )
        .unwrap();
        match load_raw(&path) {
            Err(CorpusError::BothSides { line }) => assert_eq!(line, 1),
            other => panic!("expected both-sides error, got {other:?}"),
        }
    }

    #[test]
    fn encode_truncates_to_limits() {
        let words: Vec<String> = (0..900).map(|i| format!("tok{i}")).collect();
        let doc = words.join(" ");
        let vocab = Vocabulary::build([doc.as_str()].iter().copied(), 2000, 1);
        let raw = RawSample {
            id: "t".into(),
            document: doc.clone(),
            side_text: None,
            side_visual: None,
            summary: "tok1 tok2".into(),
        };
        let limits = Limits {
            doc: 750,
            side: 32,
            summary: 32,
        };
        let s = encode_sample(&raw, &vocab, &limits).unwrap();
        assert_eq!(s.document.len(), 750);
    }

    proptest! {
        #[test]
        fn tokenize_is_deterministic(s in ".{0,80}") {
            prop_assert_eq!(tokenize(&s), tokenize(&s));
        }

        #[test]
        fn bow_total_bounded_by_token_count(words in proptest::collection::vec("[a-e]{1,3}", 0..30)) {
            let text = words.join(" ");
            let vocab = Vocabulary::build([text.as_str()].iter().copied(), 100, 1);
            let tv = TopicVocab::build([text.as_str()].iter().copied(), 100, 1);
            let proj = tv.projection(&vocab);
            let ids = vocab.encode(&text);
            let bow = bow_vector(&ids, &proj, tv.len());
            let total: f64 = bow.iter().sum();
            prop_assert!(total <= ids.len() as f64);
        }
    }
}
