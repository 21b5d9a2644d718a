use super::TrainError;
use crate::diffcore::Tensor;

/// Rewards of `K` peer samples and their leave-one-out advantages
/// `A_i = Θ_i − mean_{k≠i} Θ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageRecord {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl AdvantageRecord {
    pub fn new(rewards: Vec<f64>) -> Result<Self, TrainError> {
        let k = rewards.len();
        if k < 2 {
            return Err(TrainError::TooFewSamples(k));
        }
        if rewards.iter().all(|&r| r == rewards[0]) {
            return Ok(Self {
                advantages: vec![0.0; k],
                rewards,
            });
        }
        let total: f64 = rewards.iter().sum();
        let advantages = rewards.iter().map(|&r| r - (total - r) / (k - 1) as f64).collect();
        Ok(Self { rewards, advantages })
    }

    pub fn k(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_flat(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.k() as f64
    }

    /// Leave-one-out peer means, the baseline each sample is judged against.
    pub fn baselines(&self) -> Vec<f64> {
        self.rewards.iter().zip(&self.advantages).map(|(r, a)| r - a).collect()
    }
}

/// Per-sample weights of the encoder update: `(1/(N·K)) Σ_n A_{n,i}` over the
/// receivers' records for the same `K` samples.
pub fn encoder_sample_weights(records: &[AdvantageRecord]) -> Vec<f64> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    let k = first.k();
    let scale = 1.0 / (records.len() * k) as f64;
    (0..k)
        .map(|i| records.iter().map(|r| r.advantages[i]).sum::<f64>() * scale)
        .collect()
}

/// Weight matrix that turns stacked per-token log-probabilities into
/// `(1/K) Σ_i A_i Σ_t log π(ŵ_i,t)` through a weighted sum. Rows follow the
/// sequences in order, one per emitted token; columns span the vocabulary.
pub fn sequence_weights(sequences: &[&[u32]], weights: &[f64], vocab: usize) -> Tensor {
    let rows: usize = sequences.iter().map(|s| s.len()).sum();
    let mut w = Tensor::zeros(rows, vocab);
    let k = sequences.len() as f64;
    let mut row = 0;
    for (seq, &a) in sequences.iter().zip(weights) {
        for &tok in *seq {
            w.set(row, tok as usize, a / k);
            row += 1;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_rewards_give_zero_advantages() {
        let r = AdvantageRecord::new(vec![0.1; 5]).unwrap();
        assert!(r.is_flat());
    }

    #[test]
    fn hand_computed_advantages() {
        let r = AdvantageRecord::new(vec![1.0, 0.0, 0.5]).unwrap();
        assert_eq!(r.advantages, vec![0.75, -0.75, 0.0]);
        assert_eq!(r.baselines(), vec![0.25, 0.75, 0.5]);
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(matches!(AdvantageRecord::new(vec![0.3]), Err(TrainError::TooFewSamples(1))));
    }

    #[test]
    fn encoder_weights_average_receivers() {
        let a = AdvantageRecord::new(vec![1.0, 0.0]).unwrap();
        let b = AdvantageRecord::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(encoder_sample_weights(&[a, b]), vec![0.25, -0.25]);
    }

    #[test]
    fn weights_place_advantage_on_emitted_tokens() {
        let w = sequence_weights(&[&[3, 2], &[4]], &[0.5, -1.0], 5);
        assert_eq!(w.dims(), (3, 5));
        assert_eq!(w.get(0, 3), 0.25);
        assert_eq!(w.get(1, 2), 0.25);
        assert_eq!(w.get(2, 4), -0.5);
        assert_eq!(w.data().iter().filter(|&&v| v != 0.0).count(), 3);
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rewards in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let r = AdvantageRecord::new(rewards).unwrap();
            prop_assert!(r.advantages.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
