//! Small browser-facing wrappers around the `semlink` scoring, channel and
//! advantage code. Each operation returns a JSON string.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use semlink::channel::{demodulate_hard, modulate, noise_variance, transmit_awgn};
use semlink::codec::Vocabulary;
use semlink::diffcore::Tensor;
use semlink::reward::{bleu_n, combined_bleu, war};
use semlink::trainer::AdvantageRecord;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("reference sentence is empty")]
    EmptyReference,
    #[error("bit string may contain only 0 and 1, found {0:?}")]
    BadBit(char),
    #[error("bit string is empty")]
    NoBits,
    #[error("SNR must be finite")]
    BadSnr,
    #[error("could not parse reward {0:?}")]
    BadReward(String),
    #[error("{0}")]
    Core(String),
}

#[derive(Debug, Serialize, PartialEq)]
pub struct PairScores {
    pub bleu: [f64; 4],
    pub combined: f64,
    pub war: f64,
}

pub fn score_pair(candidate: &str, reference: &str) -> Result<PairScores, DemoError> {
    if reference.split_whitespace().next().is_none() {
        return Err(DemoError::EmptyReference);
    }
    let vocab = Vocabulary::new(candidate.split_whitespace().chain(reference.split_whitespace()));
    let c = vocab.encode_text(candidate);
    let r = vocab.encode_text(reference);
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = bleu_n(&c, &r, n + 1).map_err(|e| DemoError::Core(e.to_string()))?;
    }
    Ok(PairScores {
        bleu,
        combined: combined_bleu(&c, &r),
        war: war(&c, &r),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct ChannelRun {
    pub received: Vec<f64>,
    pub decided: String,
    pub bit_errors: usize,
    pub noise_variance: f64,
}

pub fn run_channel(bits: &str, snr_db: f64, seed: u32) -> Result<ChannelRun, DemoError> {
    if !snr_db.is_finite() {
        return Err(DemoError::BadSnr);
    }
    let values = bits
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '0' => Ok(0.0),
            '1' => Ok(1.0),
            other => Err(DemoError::BadBit(other)),
        })
        .collect::<Result<Vec<f64>, _>>()?;
    if values.is_empty() {
        return Err(DemoError::NoBits);
    }
    let frame = Tensor::row(values.clone());
    let symbols = modulate(&frame).map_err(|e| DemoError::Core(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let rx = transmit_awgn(&symbols, snr_db, &mut rng);
    let hard = demodulate_hard(&rx.values);
    let decided: String = hard.data().iter().map(|&b| if b > 0.5 { '1' } else { '0' }).collect();
    let bit_errors = hard.data().iter().zip(&values).filter(|(a, b)| a != b).count();
    Ok(ChannelRun {
        received: rx.values.data().to_vec(),
        decided,
        bit_errors,
        noise_variance: noise_variance(snr_db),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Advantages {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub sum: f64,
}

pub fn leave_one_out(rewards: &str) -> Result<Advantages, DemoError> {
    let rewards = rewards
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| DemoError::BadReward(s.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let rec = AdvantageRecord::new(rewards).map_err(|e| DemoError::Core(e.to_string()))?;
    let sum = rec.advantages.iter().sum();
    Ok(Advantages {
        rewards: rec.rewards,
        advantages: rec.advantages,
        sum,
    })
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn score(candidate: &str, reference: &str) -> Result<String, JsError> {
    to_js(score_pair(candidate, reference))
}

#[wasm_bindgen]
pub fn channel(bits: &str, snr_db: f64, seed: u32) -> Result<String, JsError> {
    to_js(run_channel(bits, snr_db, seed))
}

#[wasm_bindgen]
pub fn advantages(rewards: &str) -> Result<String, JsError> {
    to_js(leave_one_out(rewards))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sentences_score_one() {
        let s = score_pair("the cat sat on the mat", "the cat sat on the mat").unwrap();
        assert_eq!(s.bleu, [1.0; 4]);
        assert_eq!(s.combined, 1.0);
        assert_eq!(s.war, 1.0);
    }

    #[test]
    fn shifted_sentence_loses_war_not_unigrams() {
        let s = score_pair("a the cat sat", "the cat sat a").unwrap();
        assert_eq!(s.bleu[0], 1.0);
        assert_eq!(s.war, 0.0);
    }

    #[test]
    fn empty_reference_is_rejected() {
        assert!(matches!(score_pair("x", "  "), Err(DemoError::EmptyReference)));
    }

    #[test]
    fn high_snr_channel_is_error_free() {
        let run = run_channel("1011 0010", 30.0, 1).unwrap();
        assert_eq!(run.decided, "10110010");
        assert_eq!(run.bit_errors, 0);
        assert_eq!(run.received.len(), 8);
    }

    #[test]
    fn low_snr_channel_flips_some_bits() {
        let bits = "01".repeat(500);
        let run = run_channel(&bits, -5.0, 3).unwrap();
        assert!(run.bit_errors > 50);
    }

    #[test]
    fn channel_rejects_bad_input() {
        assert!(matches!(run_channel("012", 10.0, 0), Err(DemoError::BadBit('2'))));
        assert!(matches!(run_channel("", 10.0, 0), Err(DemoError::NoBits)));
        assert!(matches!(run_channel("1", f64::NAN, 0), Err(DemoError::BadSnr)));
    }

    #[test]
    fn advantages_match_hand_computation() {
        let a = leave_one_out("1, 0, 0.5").unwrap();
        let expect = [1.0 - 0.25, 0.0 - 0.75, 0.5 - 0.5];
        for (got, want) in a.advantages.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(a.sum.abs() < 1e-12);
    }

    #[test]
    fn single_reward_is_rejected() {
        assert!(leave_one_out("0.3").is_err());
        assert!(matches!(leave_one_out("0.3, x"), Err(DemoError::BadReward(_))));
    }

    #[test]
    fn json_round_trip() {
        let text = advantages("0.2 0.4").unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["rewards"].as_array().unwrap().len(), 2);
    }
}
