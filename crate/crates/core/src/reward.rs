//! Sentence similarity scores, sparse terminal rewards and returns.
//!
//! Sentences are plain token-id slices holding content tokens only (no SOS,
//! EOS or PAD).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("n-gram order must be in 1..={MAX_NGRAM}, got {0}")]
    NgramOrder(usize),
    #[error("step {t} out of range for a {len}-step record")]
    StepOutOfRange { t: usize, len: usize },
    #[error("a reward record needs at least one step")]
    EmptyRecord,
    #[error("unknown similarity metric {0:?}")]
    UnknownMetric(String),
    #[error("discount must be in [0, 1], got {0}")]
    Discount(f64),
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total.
fn clipped_counts(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let total = candidate.len().saturating_sub(n - 1);
    if total == 0 {
        return (0, 0);
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Clipped n-gram precision; 0 when the candidate has no n-grams.
pub fn bleu_ngram_precision(candidate: &[u32], reference: &[u32], n: usize) -> Result<f64, RewardError> {
    if !(1..=MAX_NGRAM).contains(&n) {
        return Err(RewardError::NgramOrder(n));
    }
    let (matched, total) = clipped_counts(candidate, reference, n);
    Ok(if total == 0 { 0.0 } else { matched as f64 / total as f64 })
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Single-order score `BP · p_n` (no smoothing), as reported in evaluation
/// tables.
pub fn bleu_n(candidate: &[u32], reference: &[u32], n: usize) -> Result<f64, RewardError> {
    Ok(brevity_penalty(candidate.len(), reference.len()) * bleu_ngram_precision(candidate, reference, n)?)
}

/// Equal-weight geometric mean of the 1..4-gram precisions times the brevity
/// penalty. A zero precision is floored at `1 / (2·count)` where `count` is
/// the candidate's n-gram total (`1/2` when it has none).
pub fn combined_bleu(candidate: &[u32], reference: &[u32]) -> f64 {
    let bp = brevity_penalty(candidate.len(), reference.len());
    if bp == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (matched, total) = clipped_counts(candidate, reference, n);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if total == 0 && reference.len() < n {
            1.0
        } else {
            1.0 / (2.0 * total.max(1) as f64)
        };
        log_sum += 0.25 * p.ln();
    }
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Word accuracy rate: positionwise matches over the reference length.
pub fn war(candidate: &[u32], reference: &[u32]) -> f64 {
    if reference.is_empty() {
        return if candidate.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = candidate.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / reference.len() as f64
}

/// A sentence-level similarity in `[0, 1]` with `score(m, m) = 1`.
pub trait SimilarityMetric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &[u32], reference: &[u32]) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CombinedBleu;

impl SimilarityMetric for CombinedBleu {
    fn name(&self) -> &str {
        "bleu"
    }
    fn score(&self, candidate: &[u32], reference: &[u32]) -> f64 {
        combined_bleu(candidate, reference)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WordAccuracy;

impl SimilarityMetric for WordAccuracy {
    fn name(&self) -> &str {
        "war"
    }
    fn score(&self, candidate: &[u32], reference: &[u32]) -> f64 {
        war(candidate, reference)
    }
}

/// Metrics addressable by name. Starts with `bleu` and `war`.
#[derive(Clone)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, Arc<dyn SimilarityMetric>>,
}

impl fmt::Debug for MetricRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.metrics.keys()).finish()
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self {
            metrics: BTreeMap::new(),
        };
        r.register(Arc::new(CombinedBleu));
        r.register(Arc::new(WordAccuracy));
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, metric: Arc<dyn SimilarityMetric>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SimilarityMetric>, RewardError> {
        self.metrics
            .get(name)
            .cloned()
            .ok_or_else(|| RewardError::UnknownMetric(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}

/// Per-step rewards of one decoded trajectory. `rewards[k - 1]` holds the
/// reward of step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl RewardRecord {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn terminal(&self) -> f64 {
        self.rewards.last().copied().unwrap_or(0.0)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self, RewardError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(RewardError::Discount(gamma));
        }
        self.gamma = gamma;
        Ok(self)
    }
}

/// Zero reward on every one of `steps` decoding steps except the last, which
/// carries `metric(candidate, reference)`.
pub fn sparse_rewards(
    reference: &[u32],
    candidate: &[u32],
    steps: usize,
    metric: &dyn SimilarityMetric,
) -> Result<RewardRecord, RewardError> {
    if steps == 0 {
        return Err(RewardError::EmptyRecord);
    }
    let mut rewards = vec![0.0; steps];
    rewards[steps - 1] = metric.score(candidate, reference);
    Ok(RewardRecord { rewards, gamma: 1.0 })
}

/// Discounted return after step `t`: `Σ_{k>t} γ^(k−t−1)·r_k`.
pub fn return_of(record: &RewardRecord, t: usize) -> Result<f64, RewardError> {
    let len = record.steps();
    if t >= len {
        return Err(RewardError::StepOutOfRange { t, len });
    }
    let mut g = 0.0;
    let mut w = 1.0;
    for k in t + 1..=len {
        g += w * record.rewards[k - 1];
        w *= record.gamma;
    }
    Ok(g)
}
