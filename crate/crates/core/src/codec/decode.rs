use rand::Rng;

use super::model::{DecoderState, Receiver};
use super::vocab::{EOS, SOS};
use super::CodecError;
use crate::diffcore::Tensor;

/// One decoded token sequence with the log-probability of every emitted
/// token under the policy that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Emitted tokens; ends with the end marker unless the step cap was hit.
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<f64>,
    /// Terminal similarity score, filled in once scored.
    pub reward: Option<f64>,
}

impl Trajectory {
    /// Tokens without the trailing end marker.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.tokens.len()
    }
}

/// `K` sampled trajectories for one source.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub samples: Vec<Trajectory>,
}

impl TrajectoryBundle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Scores every sample against `reference` content.
    pub fn score_with(&mut self, reference: &[u32], score: impl Fn(&[u32], &[u32]) -> f64) {
        for s in &mut self.samples {
            s.reward = Some(score(s.content(), reference));
        }
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.samples.iter().map(|s| s.reward).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a log-probability row.
pub fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

fn run<F>(mut state: DecoderState<'_>, max_steps: usize, mut pick: F) -> Trajectory
where
    F: FnMut(&[f64]) -> usize,
{
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    let mut prev = SOS;
    for _ in 0..max_steps {
        let lp = state.next_log_probs(prev);
        let id = pick(&lp);
        tokens.push(id as u32);
        lps.push(lp[id]);
        if id as u32 == EOS {
            break;
        }
        prev = id as u32;
    }
    Trajectory {
        tokens,
        step_log_probs: lps,
        reward: None,
    }
}

fn check_memory(rx: &Receiver, memory: &Tensor) -> Result<(), CodecError> {
    let d = rx.config().d_model;
    if memory.cols() != d || memory.rows() == 0 {
        return Err(CodecError::Shape {
            what: "decoder memory",
            expected: d,
            got: memory.cols(),
        });
    }
    Ok(())
}

/// Argmax decoding from the start marker until the end marker or
/// `max_steps` emitted tokens.
pub fn decode_greedy(rx: &Receiver, memory: &Tensor, max_steps: usize) -> Result<Trajectory, CodecError> {
    check_memory(rx, memory)?;
    Ok(run(rx.start(memory), max_steps.min(rx.config().max_steps()), argmax))
}

/// `k` independent multinomial samples.
pub fn decode_sample<R: Rng + ?Sized>(
    rx: &Receiver,
    memory: &Tensor,
    k: usize,
    max_steps: usize,
    rng: &mut R,
) -> Result<TrajectoryBundle, CodecError> {
    if k < 2 {
        return Err(CodecError::TooFewSamples(k));
    }
    check_memory(rx, memory)?;
    let start = rx.start(memory);
    let cap = max_steps.min(rx.config().max_steps());
    let samples = (0..k)
        .map(|_| run(start.clone(), cap, |lp| sample_index(lp, rng)))
        .collect();
    Ok(TrajectoryBundle { samples })
}

/// A single multinomial sample.
pub fn decode_one_sample<R: Rng + ?Sized>(
    rx: &Receiver,
    memory: &Tensor,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory, CodecError> {
    check_memory(rx, memory)?;
    Ok(run(rx.start(memory), max_steps.min(rx.config().max_steps()), |lp| sample_index(lp, rng)))
}
