//! Transmitter and receiver networks.
//!
//! The transmitter maps a sentence to a continuous `T × code_dim` code, adds
//! Gaussian exploration noise during encoder training, and thresholds a
//! learned projection into a `T × bits` frame. Each receiver dequantizes the
//! soft channel output into a memory and decodes it autoregressively with a
//! small transformer.

mod checkpoint;
mod decode;
pub mod layers;
mod model;
mod policy;
mod vocab;

use thiserror::Error;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use decode::{argmax, decode_greedy, decode_one_sample, decode_sample, sample_index, Trajectory, TrajectoryBundle};
pub use model::{
    receiver_group, threshold, DecoderState, ModelConfig, Receiver, Transmitter, ENCODER_GROUP, QUANTIZER_GROUP,
    SHARED_DECODER_GROUP,
};
pub use policy::{
    gaussian_log_density, gaussian_score, sample_encoder_policy, score_seed, weighted_gaussian_score, EncoderPolicySample,
};
pub use vocab::{Sentence, Vocabulary, EOS, PAD, RESERVED, SOS, UNK};

use crate::diffcore::DiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocabulary { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    BadVocabulary(String),
    #[error("sentence of {len} tokens outside [{min}, {max}]")]
    SentenceLength { len: usize, min: usize, max: usize },
    #[error("marker id {0} inside sentence content")]
    MarkerInContent(u32),
    #[error("sequence of {len} tokens exceeds the {max}-step limit or is empty")]
    SourceLength { len: usize, max: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("need at least 2 samples for a peer baseline, got {0}")]
    TooFewSamples(usize),
    #[error("policy standard deviation must be positive, got {0}")]
    Sigma(f64),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint vocabulary {found} does not match {expected}")]
    VocabularyMismatch { expected: String, found: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference_check, kernels, Gradients, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            code_dim: 6,
            bits: 5,
            ffn_hidden: 10,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 6,
            csi: false,
        }
    }

    fn models(seed: u64) -> (Transmitter, Receiver) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tx = Transmitter::new(&cfg(), &mut rng).unwrap();
        let rx = Receiver::new(&cfg(), receiver_group(0), &mut rng).unwrap();
        (tx, rx)
    }

    const SRC: [u32; 5] = [4, 7, 5, 9, EOS];

    fn memory_for(tx: &Transmitter, rx: &Receiver) -> Tensor {
        let bits = tx.quantize(&tx.encode(&SRC).unwrap()).unwrap();
        let y = Tensor::from_vec(bits.rows(), bits.cols(), bits.data().iter().map(|b| 2.0 * b - 1.0).collect());
        rx.dequantize(&y).unwrap()
    }

    #[test]
    fn encode_is_deterministic_with_expected_shape() {
        let (tx, _) = models(1);
        let a = tx.encode(&SRC).unwrap();
        assert_eq!(a, tx.encode(&SRC).unwrap());
        assert_eq!(a.dims(), (5, 6));
        assert!(a.all_finite());
    }

    #[test]
    fn encoder_parameters_matter() {
        let (mut tx, _) = models(2);
        let before = tx.encode(&SRC).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..tx.encoder().len() {
            let t = tx.encoder_mut().tensor_mut(i);
            for v in t.data_mut() {
                *v += 0.1 * rand::Rng::random::<f64>(&mut rng);
            }
        }
        assert_ne!(before, tx.encode(&SRC).unwrap());
    }

    #[test]
    fn encode_rejects_unknown_ids() {
        let (tx, _) = models(3);
        assert!(matches!(
            tx.encode(&[4, 40, EOS]),
            Err(CodecError::OutOfVocabulary { id: 40, size: 12 })
        ));
    }

    #[test]
    fn positive_preactivations_give_all_ones() {
        let (mut tx, _) = models(4);
        let q = tx.quantizer_mut();
        for v in q.tensor_mut(0).data_mut() {
            *v = 0.0;
        }
        for v in q.tensor_mut(1).data_mut() {
            *v = 0.5;
        }
        let bits = tx.quantize(&tx.encode(&SRC).unwrap()).unwrap();
        assert!(bits.data().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn frame_entries_are_binary() {
        let (tx, _) = models(5);
        let bits = tx.quantize(&tx.encode(&SRC).unwrap()).unwrap();
        assert_eq!(bits.dims(), (5, 5));
        assert!(bits.data().iter().all(|&b| b == 0.0 || b == 1.0));
    }

    /// Loss linear in the bits; the straight-through gradient must equal the
    /// gradient of the same linear loss applied to the pre-activations.
    #[test]
    fn straight_through_gradient_matches_surrogate_path() {
        let (tx, _) = models(6);
        let w: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let w = Tensor::from_vec(5, 5, w);
        let mut tape = Tape::new();
        let p = tx.encoder().bind(&mut tape, true);
        let q = tx.quantizer().bind(&mut tape, true);
        let x = tx.encode_on_tape(&mut tape, &p, &SRC).unwrap();
        let z = tx.quantizer_logits_on_tape(&mut tape, &q, x).unwrap();
        let b = tape.threshold_ste(z);
        let loss = tape.weighted_sum(b, &w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.max_abs() > 0.0);

        let mut qstore = tx.quantizer().clone();
        let code = tx.encode(&SRC).unwrap();
        let report = finite_difference_check(
            &mut qstore,
            &grads.restrict_to_group(QUANTIZER_GROUP),
            |s| {
                let t = Transmitter::from_stores(tx.config(), tx.encoder().clone(), s.clone()).unwrap();
                kernels::dot(t.quantizer_logits(&code).unwrap().data(), w.data())
            },
            1e-6,
            100,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn tiny_sigma_samples_equal_mean() {
        let mean = Tensor::from_vec(2, 3, vec![0.1, 0.5, -0.2, 1.0, 0.0, 3.0]);
        let s = sample_encoder_policy(&mean, 1e-14, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for x in &s {
            for (a, b) in x.noisy.data().iter().zip(mean.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_sample_moments() {
        let mean = Tensor::row(vec![0.3, -1.2]);
        let sigma = 0.1;
        let n = 100_000;
        let s = sample_encoder_policy(&mean, sigma, n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for j in 0..2 {
            let vals: Vec<f64> = s.iter().map(|x| x.noisy.data()[j]).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((m - mean.data()[j]).abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {m}");
            assert!((sd - sigma).abs() / sigma < 0.03, "sd {sd}");
        }
    }

    #[test]
    fn policy_rejects_bad_inputs() {
        let mean = Tensor::row(vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_encoder_policy(&mean, 0.1, 1, &mut rng).unwrap_err(), CodecError::TooFewSamples(1));
        assert_eq!(sample_encoder_policy(&mean, 0.0, 2, &mut rng).unwrap_err(), CodecError::Sigma(0.0));
    }

    #[test]
    fn log_density_matches_closed_form() {
        let mean = Tensor::row(vec![0.3, -0.1, 0.7]);
        let x = Tensor::row(vec![0.35, -0.2, 0.61]);
        let sigma = 0.1;
        let want: f64 = x
            .data()
            .iter()
            .zip(mean.data())
            .map(|(a, m)| {
                let z = (a - m) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            })
            .map(f64::ln)
            .sum();
        assert!((gaussian_log_density(&x, &mean, sigma).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn score_vanishes_at_mean_and_is_linear() {
        let (tx, _) = models(7);
        let mu = tx.encode(&SRC).unwrap();
        let g = gaussian_score(&tx, &SRC, &mu, 0.1).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let dir: Vec<f64> = (0..mu.len()).map(|i| ((i % 5) as f64 - 2.0) * 0.01).collect();
        let shifted = |c: f64| {
            let d: Vec<f64> = mu.data().iter().zip(&dir).map(|(m, v)| m + c * v).collect();
            Tensor::from_vec(mu.rows(), mu.cols(), d)
        };
        let g1 = gaussian_score(&tx, &SRC, &shifted(1.0), 0.1).unwrap();
        let g3 = gaussian_score(&tx, &SRC, &shifted(3.0), 0.1).unwrap();
        for (k, t) in g1.iter() {
            let t3 = g3.get(*k).unwrap();
            for (a, b) in t.data().iter().zip(t3.data()) {
                assert!((3.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let (tx, _) = models(8);
        let mu = tx.encode(&SRC).unwrap();
        let noisy = sample_encoder_policy(&mu, 0.1, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()[0]
            .noisy
            .clone();
        let g = gaussian_score(&tx, &SRC, &noisy, 0.1).unwrap();
        let mut store = tx.encoder().clone();
        let report = finite_difference_check(
            &mut store,
            &g,
            |s| {
                let t = Transmitter::from_stores(tx.config(), s.clone(), tx.quantizer().clone()).unwrap();
                gaussian_log_density(&noisy, &t.encode(&SRC).unwrap(), 0.1).unwrap()
            },
            1e-5,
            150,
            11,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dequantize_contract() {
        let (tx, rx) = models(9);
        let y = Tensor::filled(5, 5, 0.3);
        let m = rx.dequantize(&y).unwrap();
        assert_eq!(m, rx.dequantize(&y).unwrap());
        assert_eq!(m.dims(), (5, 8));
        assert!(m.all_finite());
        assert!(matches!(rx.dequantize(&Tensor::zeros(5, 4)), Err(CodecError::Shape { .. })));
        assert_eq!(memory_for(&tx, &rx).dims(), (5, 8));
    }

    #[test]
    fn cached_decoder_matches_teacher_forced_tape() {
        let (tx, rx) = models(10);
        let mem = memory_for(&tx, &rx);
        let bundle = decode_sample(&rx, &mem, 4, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let seqs: Vec<&[u32]> = bundle.samples.iter().map(|s| s.tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let p = rx.store().bind(&mut tape, false);
        let m = tape.constant(mem.clone());
        let lp = rx.sequence_log_probs_on_tape(&mut tape, &p, m, &seqs).unwrap();
        let lp = tape.value(lp);
        let mut row = 0;
        for s in &bundle.samples {
            for (t, &tok) in s.tokens.iter().enumerate() {
                assert!((lp.get(row, tok as usize) - s.step_log_probs[t]).abs() < 1e-9);
                assert!(s.step_log_probs[t] <= 0.0);
                let total: f64 = lp.row_slice(row).iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
                row += 1;
            }
        }
        assert_eq!(row, lp.rows());
    }

    #[test]
    fn greedy_respects_cap_and_has_positive_probability() {
        let (tx, rx) = models(11);
        let mem = memory_for(&tx, &rx);
        let g = decode_greedy(&rx, &mem, 100).unwrap();
        assert!(g.tokens.len() <= cfg().max_len + 1);
        assert!(g.log_prob().is_finite());
        assert!(!g.tokens.contains(&PAD) && !g.tokens.contains(&SOS));
    }

    #[test]
    fn forced_output_is_emitted_exactly() {
        let (tx, mut rx) = models(12);
        let mem = memory_for(&tx, &rx);
        let n = rx.store().len();
        // output projection is the last dense layer: weight then bias
        for v in rx.store_mut().tensor_mut(n - 2).data_mut() {
            *v = 0.0;
        }
        let bias = rx.store_mut().tensor_mut(n - 1);
        for (i, v) in bias.data_mut().iter_mut().enumerate() {
            *v = if i == 6 { 50.0 } else { 0.0 };
        }
        let g = decode_greedy(&rx, &mem, 100).unwrap();
        assert_eq!(g.tokens, vec![6; cfg().max_len + 1]);
        let b = decode_sample(&rx, &mem, 5, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.samples.iter().all(|s| s.tokens == g.tokens));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn sampling_frequencies_follow_softmax() {
        let mut row = vec![0.3, -1.0, 1.2, 0.0, 0.5];
        kernels::log_softmax_in_place(&mut row);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_index(&row, &mut rng)] += 1;
        }
        for (c, lp) in counts.iter().zip(&row) {
            assert!((*c as f64 / n as f64 - lp.exp()).abs() < 0.01);
        }
    }

    #[test]
    fn identical_receivers_behave_identically() {
        let (tx, rx) = models(13);
        let twin = rx.regrouped(receiver_group(1));
        let y = Tensor::from_vec(5, 5, (0..25).map(|i| (i as f64 * 0.3).sin()).collect());
        let (ma, mb) = (rx.dequantize(&y).unwrap(), twin.dequantize(&y).unwrap());
        assert_eq!(ma, mb);
        assert_eq!(decode_greedy(&rx, &ma, 9).unwrap(), decode_greedy(&twin, &mb, 9).unwrap());
        let _ = tx;
    }

    #[test]
    fn sample_count_below_two_is_rejected() {
        let (tx, rx) = models(14);
        let mem = memory_for(&tx, &rx);
        assert_eq!(
            decode_sample(&rx, &mem, 1, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err(),
            CodecError::TooFewSamples(1)
        );
    }

    #[test]
    fn checkpoint_round_trip_and_vocabulary_guard() {
        let (tx, rx) = models(15);
        let vocab = Vocabulary::new((0..8).map(|i| format!("w{i}")));
        let ck = Checkpoint {
            vocabulary: vocab.clone(),
            transmitter: tx,
            receivers: vec![rx.clone(), rx.regrouped(receiver_group(1))],
            metadata: serde_json::json!({"cycle": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, &vocab).unwrap();
        assert_eq!(back, ck);
        let other = Vocabulary::new((0..8).map(|i| format!("v{i}")));
        assert!(matches!(
            Checkpoint::load(&path, &other),
            Err(CodecError::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn gradients_route_to_owning_groups() {
        let (tx, rx) = models(16);
        let mut tape = Tape::new();
        let p = tx.encoder().bind(&mut tape, true);
        let q = tx.quantizer().bind(&mut tape, false);
        let d = rx.store().bind(&mut tape, true);
        let x = tx.encode_on_tape(&mut tape, &p, &SRC).unwrap();
        let z = tx.quantizer_logits_on_tape(&mut tape, &q, x).unwrap();
        let b = tape.threshold_ste(z);
        let mem = rx.dequantize_on_tape(&mut tape, &d, b).unwrap();
        let lp = rx.sequence_log_probs_on_tape(&mut tape, &d, mem, &[&[4, 7, EOS]]).unwrap();
        let loss = tape.sum(lp);
        let g: Gradients = tape.backward(loss).unwrap();
        assert!(g.keys().all(|k| k.group == ENCODER_GROUP || k.group == receiver_group(0)));
        assert!(g.restrict_to_group(ENCODER_GROUP).max_abs() > 0.0);
    }
}
