//! ROUGE-1/2/L, sentence-level BLEU-1..4 and METEOR, implemented from scratch.
//!
//! All metrics operate on [`TokenSequence`]s produced by [`tokenize`]:
//! lowercased, whitespace-split, with leading and trailing punctuation
//! stripped from every token.

mod stem;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use stem::stem;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Wraps already-normalized tokens (used by tests and the demo).
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let tokens: Vec<String> = tokens
            .iter()
            .map(|t| t.as_ref().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        let source_text = tokens.join(" ");
        Self {
            tokens,
            source_text,
        }
    }
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}'
                | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00A1}' | '\u{00BF}'
        )
}

pub fn tokenize(text: &str) -> TokenSequence {
    let tokens = text
        .split_whitespace()
        .map(|raw| raw.trim_matches(is_punctuation).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    TokenSequence {
        tokens,
        source_text: text.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricTriple {
    pub const ZERO: MetricTriple = MetricTriple {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    /// Precision and recall from an overlap count; zero denominators give 0.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self::from_pr(
            ratio(overlap, candidate_total),
            ratio(overlap, reference_total),
        )
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn ngram_total(tokens: &[String], n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (tokens.len() + 1).saturating_sub(n)
    }
}

/// Clipped n-gram overlap between candidate and reference.
pub fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    cand.iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> MetricTriple {
    let overlap = ngram_overlap(&candidate.tokens, &reference.tokens, n);
    MetricTriple::from_counts(
        overlap,
        ngram_total(&candidate.tokens, n),
        ngram_total(&reference.tokens, n),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> MetricTriple {
    let lcs = lcs_len(&candidate.tokens, &reference.tokens);
    MetricTriple::from_counts(lcs, candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    None,
    #[default]
    Epsilon,
}

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuResult {
    pub score: f64,
    pub per_n_precision: [f64; 4],
    pub brevity_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BleuError {
    #[error("max_n must be in 1..=4, got {0}")]
    Order(usize),
    #[error("at least one reference is required")]
    NoReferences,
}

/// Sentence-level BLEU with clipped n-gram precision and uniform weights.
///
/// Only orders the candidate actually has n-grams for take part in the
/// geometric mean (effective order), so a short candidate identical to its
/// reference still scores 1.0. Per-order precisions are reported unsmoothed.
pub fn bleu(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuResult, BleuError> {
    if !(1..=4).contains(&max_n) {
        return Err(BleuError::Order(max_n));
    }
    if references.is_empty() {
        return Err(BleuError::NoReferences);
    }
    let c = candidate.len();
    // closest reference length, shorter on ties
    let r = references
        .iter()
        .map(|rf| rf.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);

    let mut per_n = [0.0; 4];
    for (i, slot) in per_n.iter_mut().enumerate() {
        let n = i + 1;
        let total = ngram_total(&candidate.tokens, n);
        if total == 0 {
            continue;
        }
        let cand = ngram_counts(&candidate.tokens, n);
        let ref_counts: Vec<_> = references
            .iter()
            .map(|rf| ngram_counts(&rf.tokens, n))
            .collect();
        let clipped: usize = cand
            .iter()
            .map(|(gram, &count)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                count.min(max_ref)
            })
            .sum();
        *slot = clipped as f64 / total as f64;
    }

    let brevity_penalty = if c == 0 {
        (1.0 - r as f64).exp().max(f64::MIN_POSITIVE)
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };

    let effective = max_n.min(c);
    let score = if effective == 0 {
        0.0
    } else {
        let mut log_sum = 0.0;
        let mut zero = false;
        for &p in &per_n[..effective] {
            let p = match (p == 0.0, smoothing) {
                (true, Smoothing::Epsilon) => BLEU_EPSILON,
                (true, Smoothing::None) => {
                    zero = true;
                    break;
                }
                (false, _) => p,
            };
            log_sum += p.ln();
        }
        if zero {
            0.0
        } else {
            brevity_penalty * (log_sum / effective as f64).exp()
        }
    };

    Ok(BleuResult {
        score,
        per_n_precision: per_n,
        brevity_penalty,
    })
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeteorBreakdown {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_mean: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Unigram alignment: exact matches first, then stem matches among the
/// remaining tokens. Each candidate token, left to right, takes the earliest
/// unused reference token. Returns (candidate index, reference index) pairs
/// sorted by candidate index.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut cand_used = vec![false; candidate.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut pairs = Vec::new();

    let mut stage = |key: &dyn Fn(&str) -> String| {
        let ref_keys: Vec<String> = reference.iter().map(|t| key(t)).collect();
        for (i, tok) in candidate.iter().enumerate() {
            if cand_used[i] {
                continue;
            }
            let k = key(tok);
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_keys[j] == k) {
                cand_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    };
    stage(&|t| t.to_string());
    stage(&|t| stem(t));

    pairs.sort_unstable();
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor_breakdown(candidate: &TokenSequence, reference: &TokenSequence) -> MeteorBreakdown {
    let pairs = meteor_alignment(&candidate.tokens, &reference.tokens);
    let matches = pairs.len();
    if matches == 0 {
        return MeteorBreakdown {
            matches: 0,
            chunks: 0,
            precision: 0.0,
            recall: 0.0,
            f_mean: 0.0,
            penalty: 0.0,
            score: 0.0,
        };
    }
    let chunks = count_chunks(&pairs);
    let precision = matches as f64 / candidate.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean =
        precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    MeteorBreakdown {
        matches,
        chunks,
        precision,
        recall,
        f_mean,
        penalty,
        score: f_mean * (1.0 - penalty),
    }
}

pub fn meteor(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    meteor_breakdown(candidate, reference).score
}

/// One row of the text metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
}

impl TextScores {
    /// Scores a candidate against one reference: ROUGE as F1, BLEU-k with
    /// epsilon smoothing.
    pub fn compute(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let refs = std::slice::from_ref(&r);
        let bleu_k = |k| {
            bleu(&c, refs, k, Smoothing::Epsilon)
                .map(|b| b.score)
                .unwrap_or(0.0)
        };
        Self {
            rouge1: rouge_n(&c, &r, 1).f1,
            rouge2: rouge_n(&c, &r, 2).f1,
            rouge_l: rouge_l(&c, &r).f1,
            bleu1: bleu_k(1),
            bleu2: bleu_k(2),
            bleu3: bleu_k(3),
            bleu4: bleu_k(4),
            meteor: meteor(&c, &r),
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.meteor,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            rouge1: v[0],
            rouge2: v[1],
            rouge_l: v[2],
            bleu1: v[3],
            bleu2: v[4],
            bleu3: v[5],
            bleu4: v[6],
            meteor: v[7],
        }
    }

    pub fn mean(rows: &[TextScores]) -> Option<TextScores> {
        if rows.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for row in rows {
            for (a, v) in acc.iter_mut().zip(row.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }
}
