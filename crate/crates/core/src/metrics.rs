//! BLEU, ROUGE-1/2/L, checkpoint evaluation, and pairwise human-judgment
//! aggregation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::text::{decode_words, normalize, TripleExample};
use crate::training::{Checkpoint, Predictor, TrainError};
use crate::DecodeMode;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("candidate and reference counts differ: {candidates} vs {references}")]
    CountMismatch { candidates: usize, references: usize },
    #[error("need at least one candidate/reference pair")]
    EmptyCorpus,
    #[error("reference must not be empty")]
    EmptyReference,
    #[error("item {0} has an even number of votes; majority is undefined")]
    EvenVotes(String),
    #[error("item {0} has no votes")]
    NoVotes(String),
    #[error("example {0} has no feature vector")]
    MissingFeature(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    AddOne,
}

/// Corpus BLEU: geometric mean of clipped n-gram precisions (n = 1..max_n)
/// times the brevity penalty exp(1 - r/c) for short candidates. Add-one
/// smoothing, when enabled, applies to orders above unigram.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let max_n = max_n.max(1);

    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let (m, t) = clipped_ngram_matches(cand, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 {
        // Degenerate corpus: the brevity penalty drives the score to zero.
        return Ok(0.0);
    }

    let mut log_sum = 0.0f64;
    for n in 0..max_n {
        let (m, t) = (matched[n] as f64, total[n] as f64);
        let p = match smoothing {
            Smoothing::AddOne if n > 0 => (m + 1.0) / (t + 1.0),
            _ => {
                if t == 0.0 || m == 0.0 {
                    return Ok(0.0);
                }
                m / t
            }
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * precision)
}

/// Count candidate n-grams and how many are matched in the reference,
/// clipping each n-gram by its reference count.
fn clipped_ngram_matches(cand: &[String], reference: &[String], n: usize) -> (u64, u64) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_default() += 1;
        }
    }
    let mut cand_counts: HashMap<&[String], u64> = HashMap::new();
    for gram in cand.windows(n) {
        *cand_counts.entry(gram).or_default() += 1;
    }
    let total = (cand.len() - n + 1) as u64;
    let matched = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RougeVariant {
    Rouge1,
    Rouge2,
    RougeL,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(overlap: f64, cand_total: f64, ref_total: f64) -> RougeScore {
    let precision = if cand_total > 0.0 { overlap / cand_total } else { 0.0 };
    let recall = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore { precision, recall, f1 }
}

/// ROUGE-1/2 via clipped n-gram overlap, ROUGE-L via the longest common
/// subsequence.
pub fn rouge(
    candidate: &[String],
    reference: &[String],
    variant: RougeVariant,
) -> Result<RougeScore, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(match variant {
        RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
            let n = if variant == RougeVariant::Rouge1 { 1 } else { 2 };
            let (overlap, cand_total) = clipped_ngram_matches(candidate, reference, n);
            let ref_total = reference.len().saturating_sub(n - 1) as f64;
            prf(overlap as f64, cand_total as f64, ref_total)
        }
        RougeVariant::RougeL => {
            let lcs = lcs_length(candidate, reference) as f64;
            prf(lcs, candidate.len() as f64, reference.len() as f64)
        }
    })
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level scores: BLEU plus mean ROUGE precision/recall/F1 per
/// variant. The reported ROUGE numbers are F1-based means labeled as such.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    pub n_examples: usize,
}

/// Score a list of (candidate, reference) token pairs.
pub fn score_pairs(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<ScoreReport, MetricError> {
    let bleu_score = bleu(candidates, references, 4, Smoothing::None)?;
    let mut sums = [RougeScore::default(); 3];
    for (cand, reference) in candidates.iter().zip(references) {
        for (slot, variant) in
            [RougeVariant::Rouge1, RougeVariant::Rouge2, RougeVariant::RougeL].iter().enumerate()
        {
            let s = rouge(cand, reference, *variant)?;
            sums[slot].precision += s.precision;
            sums[slot].recall += s.recall;
            sums[slot].f1 += s.f1;
        }
    }
    let n = candidates.len() as f64;
    let mean = |s: RougeScore| RougeScore {
        precision: s.precision / n,
        recall: s.recall / n,
        f1: s.f1 / n,
    };
    Ok(ScoreReport {
        bleu: bleu_score,
        rouge1: mean(sums[0]),
        rouge2: mean(sums[1]),
        rouge_l: mean(sums[2]),
        n_examples: candidates.len(),
    })
}

/// Generate a rewrite for every test example and score against the
/// attractive reference. Metric tokens use the pipeline normalization
/// without truncation or padding.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    test_set: &[TripleExample],
    features: Option<&FeatureSet>,
    mode: DecodeMode,
) -> Result<ScoreReport, MetricError> {
    if test_set.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let predictor = Predictor::new(ckpt)?;
    let mut candidates = Vec::with_capacity(test_set.len());
    let mut references = Vec::with_capacity(test_set.len());
    for ex in test_set {
        let feature = if predictor.uses_features() {
            Some(
                features
                    .and_then(|f| f.get(&ex.feature_ref))
                    .ok_or_else(|| MetricError::MissingFeature(ex.id.clone()))?,
            )
        } else {
            None
        };
        let generated = predictor.generate(&ex.bland, feature, mode)?;
        candidates.push(decode_words(&generated.ids, predictor.vocab())?);
        references.push(normalize(&ex.attractive));
    }
    score_pairs(&candidates, &references)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    A,
    B,
}

/// One item's judge votes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Judgment {
    pub id: String,
    pub votes: Vec<Vote>,
}

/// Aggregated pairwise preference counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub n_items: usize,
    pub n_prefer_a: usize,
    pub rate_a: f64,
}

/// Majority vote per item; rejects items without a strict majority
/// (even or zero vote counts) rather than inventing a tie-break.
pub fn aggregate_preferences(judgments: &[Judgment]) -> Result<PreferenceReport, MetricError> {
    let mut n_prefer_a = 0usize;
    for j in judgments {
        if j.votes.is_empty() {
            return Err(MetricError::NoVotes(j.id.clone()));
        }
        if j.votes.len() % 2 == 0 {
            return Err(MetricError::EvenVotes(j.id.clone()));
        }
        let a = j.votes.iter().filter(|&&v| v == Vote::A).count();
        if a * 2 > j.votes.len() {
            n_prefer_a += 1;
        }
    }
    let n_items = judgments.len();
    let rate_a = if n_items > 0 { n_prefer_a as f64 / n_items as f64 } else { 0.0 };
    Ok(PreferenceReport { n_items, n_prefer_a, rate_a })
}
