//! Tokenization, vocabulary, fixed-length encoding, triple construction,
//! train/test splitting, and synthetic corpus generation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synth;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Fixed sequence length for encoder inputs.
pub const INPUT_LEN: usize = 30;
/// Fixed sequence length for decoder outputs.
pub const OUTPUT_LEN: usize = 50;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("vocabulary cap {0} leaves no room for the special tokens")]
    CapTooSmall(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary words must start with {0:?}")]
    MissingSpecials(Vec<String>),
    #[error("need at least 5 examples to split 4:1, got {0}")]
    TooFewExamples(usize),
    #[error("detail class count must be in 2..=64, got {0}")]
    InvalidDetailCount(usize),
    #[error("feature dimension {dim} cannot embed {k} detail classes")]
    FeatureDimTooSmall { dim: usize, k: usize },
    #[error("synthetic corpus size must be positive")]
    EmptySynth,
}

/// Word-to-id mapping with the five special tokens pinned at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Vocab {
    /// Keep the `cap - 5` most frequent corpus words, breaking frequency
    /// ties lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: usize) -> Result<Vocab, TextError> {
        if cap < SPECIAL_TOKENS.len() {
            return Err(TextError::CapTooSmall(cap));
        }
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for token in normalize(line.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap - SPECIAL_TOKENS.len());

        let words = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_words(words)
    }

    /// Rebuild a vocabulary from its word list (checkpoint loading).
    pub fn from_words(words: Vec<String>) -> Result<Vocab, TextError> {
        let ok = words.len() >= SPECIAL_TOKENS.len()
            && words.iter().zip(SPECIAL_TOKENS).all(|(w, s)| w == s);
        if !ok {
            return Err(TextError::MissingSpecials(
                SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            ));
        }
        let word_to_id = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Vocab { word_to_id, id_to_word: words })
    }

    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    /// Id for a word, falling back to `UNK`.
    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_word.get(id as usize).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Output,
}

impl Role {
    pub fn max_len(self) -> usize {
        match self {
            Role::Input => INPUT_LEN,
            Role::Output => OUTPUT_LEN,
        }
    }
}

/// Fixed-length encoded text: `BOS tokens.. EOS PAD..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_length: usize,
    pub role: Role,
}

impl TokenSequence {
    /// The non-PAD prefix.
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }
}

/// Lowercase, detach `? ! . ,` as their own tokens, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if matches!(ch, '?' | '!' | '.' | ',') {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Encode to the fixed role length. Truncation always retains EOS.
pub fn encode(text: &str, role: Role, vocab: &Vocab) -> TokenSequence {
    let limit = role.max_len();
    let words = normalize(text);
    let body_limit = limit - 2;
    let mut ids = Vec::with_capacity(limit);
    ids.push(BOS);
    for w in words.iter().take(body_limit) {
        ids.push(vocab.id(w));
    }
    ids.push(EOS);
    let true_length = ids.len();
    ids.resize(limit, PAD);
    TokenSequence { ids, true_length, role }
}

/// Inverse of [`encode`] up to truncation and UNK replacement: stops at the
/// first EOS and strips special tokens (UNK keeps its placeholder).
pub fn decode_tokens(ids: &[u32], vocab: &Vocab) -> Result<String, TextError> {
    Ok(decode_words(ids, vocab)?.join(" "))
}

/// Token-level decode used by the metrics path.
pub fn decode_words(ids: &[u32], vocab: &Vocab) -> Result<Vec<String>, TextError> {
    let mut words = Vec::new();
    for &id in ids {
        if id as usize >= vocab.size() {
            return Err(TextError::IdOutOfRange { id, size: vocab.size() });
        }
        if id == EOS {
            break;
        }
        if id == PAD || id == BOS || id == SEP {
            continue;
        }
        words.push(vocab.word(id).expect("checked above").to_string());
    }
    Ok(words)
}

/// One crawled question with its response count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawQA {
    pub id: String,
    pub image_ref: String,
    pub question_text: String,
    pub response_count: u32,
}

/// One training record: a side-feature key, the bland question, and the
/// attractive rewrite that contains it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleExample {
    pub id: String,
    pub feature_ref: String,
    pub bland: String,
    pub attractive: String,
}

/// Split into sentences on `? ! .`, keeping the terminator. Slices of the
/// original text, trimmed, so each sentence is a verbatim substring.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0usize;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '?' | '!' | '.') {
            let end = i + ch.len_utf8();
            let sentence = text[start..end].trim();
            if !sentence.is_empty() {
                out.push(sentence);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Build triples from raw Q&A records. A record is kept when it has at
/// least one response and more than one sentence; the attractive question
/// is the full text and the bland question is the first sentence ending in
/// `?` (first sentence if none does). Returns the triples and the number
/// of dropped records.
pub fn construct_triples(raw: &[RawQA]) -> (Vec<TripleExample>, usize) {
    let mut triples = Vec::new();
    let mut dropped = 0usize;
    for record in raw {
        let sentences = split_sentences(&record.question_text);
        if record.response_count < 1 || sentences.len() < 2 {
            dropped += 1;
            continue;
        }
        let bland = sentences
            .iter()
            .find(|s| s.ends_with('?'))
            .unwrap_or(&sentences[0]);
        triples.push(TripleExample {
            id: record.id.clone(),
            feature_ref: record.image_ref.clone(),
            bland: bland.to_string(),
            attractive: record.question_text.trim().to_string(),
        });
    }
    (triples, dropped)
}

/// Deterministic 4:1 split: shuffle by seed, first `ceil(0.8 n)` train.
pub fn split(
    data: Vec<TripleExample>,
    seed: u64,
) -> Result<(Vec<TripleExample>, Vec<TripleExample>), TextError> {
    if data.len() < 5 {
        return Err(TextError::TooFewExamples(data.len()));
    }
    let mut shuffled = data;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (shuffled.len() * 4).div_ceil(5);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// FNV-1a over the UTF-8 bytes; used wherever a stable string hash is
/// needed (emotion prefixes, pseudo features).
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Standard normal draw (Box-Muller) so modules only need `rand` core.
pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.random::<f32>().max(1e-7);
    let u2: f32 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests;
