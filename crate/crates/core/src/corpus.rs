//! Documents: synthetic hierarchical generation, sentence splitting,
//! tokenization, vocabularies and hashed bag-of-words features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// Ids below this are reserved for the special tokens above.
pub const FIRST_WORD_ID: usize = 3;

pub const MIN_SYNTH_VOCAB: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// One training or evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub doc_id: String,
    pub sentences: Vec<Vec<usize>>,
    /// Target summary ids, terminated by [`EOS`].
    pub summary: Vec<usize>,
    /// Parent sentence per sentence; `None` marks the single global root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_tree: Option<Vec<Option<usize>>>,
}

impl Example {
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.sentences.iter().flatten().copied()
    }

    /// Indices of sentences that the reference tree marks as connectors:
    /// the root plus every sentence whose parent is the root and that
    /// itself has children.
    pub fn connector_indices(&self) -> Option<Vec<usize>> {
        let tree = self.true_tree.as_ref()?;
        let root = tree.iter().position(Option::is_none)?;
        Some(
            (0..tree.len())
                .filter(|&i| {
                    i == root
                        || (tree[i] == Some(root) && tree.contains(&Some(i)))
                })
                .collect(),
        )
    }
}

/// Synthetic corpus parameters.
///
/// A document holds `connectors` topic sentences, `children` detail
/// sentences spread round-robin over the connectors, and
/// `filler_sentences` off-topic sentences, shuffled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub connectors: usize,
    pub children: usize,
    pub filler_sentences: usize,
    pub vocab_size: usize,
    /// Inclusive sentence length range.
    pub sentence_len: (usize, usize),
    pub topics_per_connector: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            connectors: 2,
            children: 2,
            filler_sentences: 4,
            vocab_size: 200,
            sentence_len: (4, 7),
            topics_per_connector: 2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.connectors == 0 {
            return bad("need at least one connector".into());
        }
        if self.vocab_size < MIN_SYNTH_VOCAB {
            return bad(format!("vocab_size {} < {MIN_SYNTH_VOCAB}", self.vocab_size));
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return bad(format!("sentence length range {lo}..={hi}"));
        }
        if self.topics_per_connector == 0 || self.topics_per_connector > lo {
            return bad(format!(
                "topics_per_connector {} must be in 1..={lo}",
                self.topics_per_connector
            ));
        }
        let (topics, _, _) = self.pools();
        if topics.len() < self.connectors * self.topics_per_connector {
            return bad("vocabulary too small for distinct connector topics".into());
        }
        Ok(())
    }

    pub fn sentences_per_doc(&self) -> usize {
        self.connectors + self.children + self.filler_sentences
    }

    /// Topic, detail and filler id ranges partitioning the word ids.
    pub fn pools(&self) -> (core::ops::Range<usize>, core::ops::Range<usize>, core::ops::Range<usize>) {
        let words = self.vocab_size - FIRST_WORD_ID;
        let topic_end = FIRST_WORD_ID + words * 2 / 5;
        let detail_end = topic_end + words * 3 / 10;
        (FIRST_WORD_ID..topic_end, topic_end..detail_end, detail_end..self.vocab_size)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Connector(usize),
    Child(usize),
    Filler,
}

/// Generates `n_docs` documents deterministically from `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec, n_docs: usize) -> Result<Vec<Example>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (topic_pool, detail_pool, filler_pool) = spec.pools();
    let topic_ids: Vec<usize> = topic_pool.collect();
    let (lo, hi) = spec.sentence_len;

    let mut docs = Vec::with_capacity(n_docs);
    for doc in 0..n_docs {
        let mut chosen = topic_ids.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(spec.connectors * spec.topics_per_connector);
        let topics: Vec<&[usize]> = chosen.chunks(spec.topics_per_connector).collect();

        let mut roles: Vec<Role> = (0..spec.connectors).map(Role::Connector).collect();
        roles.extend((0..spec.children).map(|k| Role::Child(k % spec.connectors)));
        roles.extend((0..spec.filler_sentences).map(|_| Role::Filler));
        roles.shuffle(&mut rng);

        let mut sentences = Vec::with_capacity(roles.len());
        for role in &roles {
            let len = rng.gen_range(lo..=hi);
            let mut s: Vec<usize> = match role {
                Role::Connector(c) => topics[*c].to_vec(),
                Role::Child(c) => vec![*topics[*c].choose(&mut rng).expect("nonempty topics")],
                Role::Filler => vec![],
            };
            let pool = if *role == Role::Filler { &filler_pool } else { &detail_pool };
            while s.len() < len {
                s.push(rng.gen_range(pool.clone()));
            }
            s.shuffle(&mut rng);
            sentences.push(s);
        }

        let position = |target: Role| roles.iter().position(|r| *r == target).expect("role present");
        let mut connector_order: Vec<usize> = (0..spec.connectors).collect();
        connector_order.sort_by_key(|&c| position(Role::Connector(c)));
        let root_sentence = position(Role::Connector(connector_order[0]));

        let mut summary = Vec::new();
        for &c in &connector_order {
            let sent = &sentences[position(Role::Connector(c))];
            summary.extend(sent.iter().copied().filter(|t| topics[c].contains(t)));
        }
        summary.push(EOS);

        let true_tree = roles
            .iter()
            .enumerate()
            .map(|(i, role)| match role {
                _ if i == root_sentence => None,
                Role::Child(c) => Some(position(Role::Connector(*c))),
                _ => Some(root_sentence),
            })
            .collect();

        docs.push(Example {
            doc_id: format!("synth-{}-{doc}", spec.seed),
            sentences,
            summary,
            true_tree: Some(true_tree),
        });
    }
    Ok(docs)
}

/// Surface form used when writing synthetic ids out as text.
pub fn synthetic_word(id: usize) -> String {
    format!("w{id}")
}

const ABBREVIATIONS: [&str; 9] = ["mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "u.s.", "e.g.", "i.e."];

/// Rule-based sentence splitter: breaks after `.`, `!` or `?` when the
/// next word starts uppercase (after any opening quote), unless the word
/// ending in the period is a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for (k, &(byte, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        // terminal punctuation may be followed by closing quotes/brackets
        let mut end = k + 1;
        while end < chars.len() && matches!(chars[end].1, '"' | '\'' | ')' | '\u{201d}') {
            end += 1;
        }
        if end >= chars.len() || !chars[end].1.is_whitespace() {
            continue;
        }
        let mut next = end;
        while next < chars.len() && chars[next].1.is_whitespace() {
            next += 1;
        }
        let mut first = next;
        while first < chars.len() && matches!(chars[first].1, '"' | '\'' | '(' | '\u{201c}') {
            first += 1;
        }
        if first >= chars.len() || !chars[first].1.is_uppercase() {
            continue;
        }
        if ch == '.' {
            let word_start = text[..byte]
                .rfind(char::is_whitespace)
                .map_or(0, |p| p + 1);
            let word = text[word_start..=byte].to_lowercase();
            if ABBREVIATIONS.contains(&word.as_str()) {
                continue;
            }
        }
        let cut = chars[end].0;
        let piece = text[start..cut].trim();
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
        start = chars[next].0;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word ↔ id mapping with the special tokens in the first three slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    /// Most frequent words first, ties broken alphabetically, capped so
    /// the total size including specials is at most `max_size`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for w in text {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words: Vec<String> = ["<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        words.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(FIRST_WORD_ID))
                .map(|(w, _)| w.to_string()),
        );
        Vocabulary::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Builds an example from raw article/summary text.
pub fn example_from_text(doc_id: &str, article: &str, summary: &str, vocab: &Vocabulary) -> Example {
    let sentences = split_sentences(article)
        .iter()
        .map(|s| vocab.encode(&tokenize(s)))
        .filter(|s| !s.is_empty())
        .collect();
    let mut target = vocab.encode(&tokenize(summary));
    target.push(EOS);
    Example {
        doc_id: doc_id.to_string(),
        sentences,
        summary: target,
        true_tree: None,
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of unigrams into `dim` buckets, ℓ2-normalized
/// unless every bucket is zero.
pub fn hash_features(tokens: &[String], dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 8, "hash_features needs dim >= 8");
    let mut v = vec![0.0; dim];
    for t in tokens {
        let h = fnv1a(t.as_bytes(), seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}
