//! Cross-entropy warm-up, self-critical decoder and encoder updates, and the
//! alternate schedule that interleaves them.
//!
//! Decoder updates weight each sampled trajectory's summed log-probability by
//! its leave-one-out advantage. Encoder updates weight the Gaussian score of
//! each noisy code by the advantage averaged over all receivers. Frozen
//! components never enter a tape as parameters.

mod advantage;
mod config;
mod monitor;

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use thiserror::Error;

pub use advantage::{encoder_sample_weights, sequence_weights, AdvantageRecord};
pub use config::{EncoderDecoding, PretrainChannel, ScheduleVariant, TrainConfig};
pub use monitor::{convergence_check, ConvergenceMonitor, DivergenceTrip, Verdict};

use crate::channel::{self, ChannelConfig, ChannelError, ReceivedFrame};
use crate::codec::{
    decode_greedy, decode_one_sample, decode_sample, receiver_group, sample_encoder_policy, score_seed,
    Checkpoint, CodecError, EncoderPolicySample, ModelConfig, Receiver, Sentence, Transmitter, Vocabulary,
    SHARED_DECODER_GROUP,
};
use crate::diffcore::{Axis, DiffError, Direction, OptimizerState, Tape, Tensor, Var};
use crate::reward::{bleu_n, war, MetricRegistry, RewardError, SimilarityMetric};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least 2 samples per source, got {0}")]
    TooFewSamples(usize),
    #[error("{have} cycles recorded, verdict needs {need}")]
    TooFewCycles { have: usize, need: usize },
    #[error("no training sentences")]
    EmptyData,
    #[error(
        "mean reward {reward:.4} stayed below the guard threshold of its running max {running_max:.4}; aborted at cycle {cycle}"
    )]
    Diverged { cycle: usize, reward: f64, running_max: f64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One parameter update, in the order applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Pretrain,
    Decoder(usize),
    Encoder,
}

/// Running means of per-sentence scores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreSums {
    pub count: usize,
    pub reward: f64,
    pub bleu: [f64; 4],
    pub war: f64,
}

impl ScoreSums {
    pub fn add(&mut self, candidate: &[u32], reference: &[u32], reward: f64) {
        self.count += 1;
        self.reward += reward;
        for n in 1..=4 {
            self.bleu[n - 1] += bleu_n(candidate, reference, n).unwrap_or(0.0);
        }
        self.war += war(candidate, reference);
    }

    pub fn merge(&mut self, other: &ScoreSums) {
        self.count += other.count;
        self.reward += other.reward;
        for n in 0..4 {
            self.bleu[n] += other.bleu[n];
        }
        self.war += other.war;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            v / self.count as f64
        }
    }

    pub fn mean_reward(&self) -> f64 {
        self.mean(self.reward)
    }

    pub fn mean_bleu(&self, n: usize) -> f64 {
        self.mean(self.bleu[n - 1])
    }

    pub fn mean_war(&self) -> f64 {
        self.mean(self.war)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStepReport {
    pub receiver: usize,
    pub scores: ScoreSums,
    /// Value of the surrogate whose gradient is the update direction.
    pub surrogate: f64,
    pub updated: bool,
    pub records: Vec<AdvantageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStepReport {
    pub per_receiver: Vec<ScoreSums>,
    pub surrogate: f64,
    pub updated: bool,
}

impl EncoderStepReport {
    pub fn mean_reward(&self) -> f64 {
        let mut all = ScoreSums::default();
        for s in &self.per_receiver {
            all.merge(s);
        }
        all.mean_reward()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_time: f64,
}

/// Everything logged for one update cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub epoch: usize,
    pub cycle: usize,
    /// Decoder-phase scores of each receiver's sampled trajectories.
    pub decoder: Vec<ScoreSums>,
    pub decoder_surrogate: Vec<f64>,
    pub encoder: EncoderStepReport,
    pub wall_time: f64,
}

impl CycleRecord {
    /// Mean decoder-phase reward over receivers; the monitored quantity.
    pub fn mean_reward(&self) -> f64 {
        self.decoder.iter().map(ScoreSums::mean_reward).sum::<f64>() / self.decoder.len().max(1) as f64
    }
}

/// Endless shuffled pass over training indices.
#[derive(Debug, Clone)]
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Soft channel output as the dequantizer expects it.
pub fn receiver_input(frame: &ReceivedFrame, csi: bool) -> Tensor {
    if !csi {
        return frame.values.clone();
    }
    let (r, c) = frame.values.dims();
    let gain = frame.csi();
    let mut out = Vec::with_capacity(r * (c + 1));
    for i in 0..r {
        out.extend_from_slice(frame.values.row_slice(i));
        out.push(gain.data()[i]);
    }
    Tensor::from_vec(r, c + 1, out)
}

/// Reward of each noisy frame after one channel draw and decoding at `rx`.
#[allow(clippy::too_many_arguments)]
fn receiver_rewards<R: rand::Rng + ?Sized>(
    rx: &Receiver,
    decoding: EncoderDecoding,
    metric: &dyn SimilarityMetric,
    channel_config: &ChannelConfig,
    symbols: &[Tensor],
    reference: &[u32],
    rng: &mut R,
    sums: &mut ScoreSums,
) -> Result<Vec<f64>, TrainError> {
    let csi = rx.config().csi;
    let cap = rx.config().max_steps();
    let mut rewards = Vec::with_capacity(symbols.len());
    for sym in symbols {
        let frame = channel::transmit(sym, channel_config, rng);
        let memory = rx.dequantize(&receiver_input(&frame, csi))?;
        let traj = match decoding {
            EncoderDecoding::Greedy => decode_greedy(rx, &memory, cap)?,
            EncoderDecoding::Sampled => decode_one_sample(rx, &memory, cap, rng)?,
        };
        let r = metric.score(traj.content(), reference);
        sums.add(traj.content(), reference, r);
        rewards.push(r);
    }
    Ok(rewards)
}

/// Owns the transmitter, the shared warm-up decoder, the per-receiver
/// decoders and every random stream of one training run.
pub struct Trainer {
    config: TrainConfig,
    channels: Vec<ChannelConfig>,
    tx: Transmitter,
    shared: Receiver,
    receivers: Vec<Receiver>,
    encoder_opt: OptimizerState,
    quantizer_opt: OptimizerState,
    shared_opt: OptimizerState,
    receiver_opts: Vec<OptimizerState>,
    metric: Arc<dyn SimilarityMetric>,
    batches: Option<BatchStream>,
    pretrain_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    decoder_rngs: Vec<ChaCha8Rng>,
    encoder_rngs: Vec<ChaCha8Rng>,
    steps: Vec<StepKind>,
    monitor: ConvergenceMonitor,
    pretrain_log: Vec<PretrainRecord>,
    cycle_log: Vec<CycleRecord>,
    pretrained: bool,
    epochs_done: usize,
    force_mean_samples: bool,
    started: Instant,
}

impl Trainer {
    pub fn new(
        model: &ModelConfig,
        config: TrainConfig,
        channels: Vec<ChannelConfig>,
        metrics: &MetricRegistry,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if channels.is_empty() {
            return Err(ChannelError::NoReceivers.into());
        }
        for c in &channels {
            c.validate()?;
        }
        let mut init = stream(config.seed, 0);
        let tx = Transmitter::new(model, &mut init)?;
        let shared = Receiver::new(model, SHARED_DECODER_GROUP, &mut init)?;
        let n = channels.len();
        let opt = |lr: Option<f64>| -> Result<OptimizerState, TrainError> {
            Ok(OptimizerState::new(config.optimizer, lr.unwrap_or(config.lr))?.with_clip_norm(config.clip_norm))
        };
        let monitor = ConvergenceMonitor::new(
            config.monitor_window,
            config.converge_slope_tol,
            config.converge_var_tol,
            config.divergence_ratio,
            config.divergence_patience,
        )?;
        Ok(Self {
            encoder_opt: opt(config.pretrain_lr)?,
            quantizer_opt: opt(config.pretrain_lr)?,
            shared_opt: opt(config.pretrain_lr)?,
            receiver_opts: Vec::new(),
            metric: metrics.get(&config.metric)?,
            batches: None,
            pretrain_rng: stream(config.seed, 2),
            policy_rng: stream(config.seed, 3),
            decoder_rngs: (0..n).map(|i| stream(config.seed, 100 + i as u64)).collect(),
            encoder_rngs: (0..n).map(|i| stream(config.seed, 200 + i as u64)).collect(),
            receivers: Vec::new(),
            steps: Vec::new(),
            monitor,
            pretrain_log: Vec::new(),
            cycle_log: Vec::new(),
            pretrained: false,
            epochs_done: 0,
            force_mean_samples: false,
            started: Instant::now(),
            tx,
            shared,
            channels,
            config,
        })
    }

    /// Continues from a checkpoint whose receivers are already specialized.
    pub fn resume(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainError> {
        if checkpoint.receivers.len() != self.channels.len() {
            return Err(TrainError::Config(format!(
                "checkpoint holds {} receivers, config has {}",
                checkpoint.receivers.len(),
                self.channels.len()
            )));
        }
        self.tx = checkpoint.transmitter.clone();
        self.receivers = checkpoint.receivers.clone();
        self.start_alternate_phase()?;
        self.epochs_done = self.config.pretrain_epochs;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn channels(&self) -> &[ChannelConfig] {
        &self.channels
    }

    pub fn transmitter(&self) -> &Transmitter {
        &self.tx
    }

    pub fn shared_decoder(&self) -> &Receiver {
        &self.shared
    }

    pub fn receivers(&self) -> &[Receiver] {
        &self.receivers
    }

    pub fn steps(&self) -> &[StepKind] {
        &self.steps
    }

    pub fn monitor(&self) -> &ConvergenceMonitor {
        &self.monitor
    }

    pub fn pretrain_log(&self) -> &[PretrainRecord] {
        &self.pretrain_log
    }

    pub fn cycle_log(&self) -> &[CycleRecord] {
        &self.cycle_log
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    /// Test hook: every encoder-policy sample equals the mean code.
    pub fn set_force_mean_samples(&mut self, on: bool) {
        self.force_mean_samples = on;
    }

    pub fn checkpoint(&self, vocabulary: &Vocabulary, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            vocabulary: vocabulary.clone(),
            transmitter: self.tx.clone(),
            receivers: self.receivers.clone(),
            metadata,
        }
    }

    fn next_batch<'a>(&mut self, data: &'a [Sentence]) -> Result<Vec<&'a Sentence>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let size = self.config.batch_size;
        let seed = self.config.seed;
        let stream_ref = self
            .batches
            .get_or_insert_with(|| BatchStream::new(data.len(), stream(seed, 1)));
        if stream_ref.order.len() != data.len() {
            *stream_ref = BatchStream::new(data.len(), stream(seed, 1));
        }
        Ok(stream_ref.next(size).into_iter().map(|i| &data[i]).collect())
    }

    /// One cross-entropy step through encoder, straight-through quantizer,
    /// channel and the shared decoder. Returns the mean per-token loss.
    pub fn pretrain_step(&mut self, batch: &[&Sentence]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let csi = self.tx.config().csi;
        let vocab = self.tx.config().vocab_size;
        let mut tape = Tape::new();
        let p = self.tx.encoder().bind(&mut tape, true);
        let q = self.tx.quantizer().bind(&mut tape, true);
        let d = self.shared.store().bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for (i, s) in batch.iter().enumerate() {
            let src = s.with_eos();
            let x = self.tx.encode_on_tape(&mut tape, &p, &src)?;
            let z = self.tx.quantizer_logits_on_tape(&mut tape, &q, x)?;
            let b = tape.threshold_ste(z);
            let (rows, cols) = tape.value(b).dims();
            let sym = tape.scale(b, 2.0);
            let shift = tape.constant(Tensor::filled(rows, cols, -1.0));
            let sym = tape.add(sym, shift)?;
            let y = match self.config.pretrain_channel {
                PretrainChannel::Identity => {
                    if csi {
                        let ones = tape.constant(Tensor::filled(rows, 1, 1.0));
                        tape.concat(&[sym, ones], Axis::Cols)?
                    } else {
                        sym
                    }
                }
                PretrainChannel::Receivers => {
                    let cfg = &self.channels[i % self.channels.len()];
                    let clean = tape.value(sym).clone();
                    let frame = channel::transmit(&clean, cfg, &mut self.pretrain_rng);
                    let gains: Vec<f64> = (0..clean.len()).map(|j| frame.realization.gain_at(j)).collect();
                    let noise: Vec<f64> = (0..clean.len())
                        .map(|j| frame.values.data()[j] - gains[j] * clean.data()[j])
                        .collect();
                    let g = tape.constant(Tensor::from_vec(rows, cols, gains));
                    let n = tape.constant(Tensor::from_vec(rows, cols, noise));
                    let faded = tape.mul(sym, g)?;
                    let y = tape.add(faded, n)?;
                    if csi {
                        let col = tape.constant(frame.csi());
                        tape.concat(&[y, col], Axis::Cols)?
                    } else {
                        y
                    }
                }
            };
            let mem = self.shared.dequantize_on_tape(&mut tape, &d, y)?;
            let lp = self.shared.sequence_log_probs_on_tape(&mut tape, &d, mem, &[&src])?;
            let w = sequence_weights(&[&src], &[-1.0 / src.len() as f64], vocab);
            let term = tape.weighted_sum(lp, &w)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        self.encoder_opt.step(self.tx.encoder_mut(), &grads, Direction::Descent)?;
        self.quantizer_opt.step(self.tx.quantizer_mut(), &grads, Direction::Descent)?;
        self.shared_opt.step(self.shared.store_mut(), &grads, Direction::Descent)?;
        self.steps.push(StepKind::Pretrain);
        Ok(value)
    }

    /// Runs the cross-entropy epochs and then hands the shared decoder to
    /// every receiver.
    pub fn pretrain(&mut self, data: &[Sentence]) -> Result<(), TrainError> {
        let eb = self.config.epoch_batches(data.len());
        while self.epochs_done < self.config.pretrain_epochs {
            let mut sum = 0.0;
            for _ in 0..eb {
                let batch = self.next_batch(data)?;
                sum += self.pretrain_step(&batch)?;
            }
            self.pretrain_log.push(PretrainRecord {
                epoch: self.epochs_done,
                loss: sum / eb as f64,
                wall_time: self.started.elapsed().as_secs_f64(),
            });
            self.epochs_done += 1;
        }
        self.finish_pretraining()
    }

    /// Copies the shared decoder into every receiver.
    pub fn finish_pretraining(&mut self) -> Result<(), TrainError> {
        self.receivers = (0..self.channels.len())
            .map(|n| self.shared.regrouped(receiver_group(n)))
            .collect();
        self.start_alternate_phase()
    }

    fn start_alternate_phase(&mut self) -> Result<(), TrainError> {
        let cfg = &self.config;
        let make = |lr: Option<f64>| -> Result<OptimizerState, TrainError> {
            Ok(OptimizerState::new(cfg.optimizer, lr.unwrap_or(cfg.lr))?.with_clip_norm(cfg.clip_norm))
        };
        self.receiver_opts = (0..self.channels.len())
            .map(|_| make(cfg.decoder_lr))
            .collect::<Result<_, _>>()?;
        self.encoder_opt = make(cfg.encoder_lr)?;
        self.pretrained = true;
        Ok(())
    }

    fn ensure_receivers(&self) -> Result<(), TrainError> {
        if self.receivers.len() != self.channels.len() {
            return Err(TrainError::Config("receivers are not initialized; pretrain or resume first".into()));
        }
        Ok(())
    }

    /// Self-critical update of receiver `n` with the transmitter frozen.
    pub fn decoder_selfcritical_step(&mut self, batch: &[&Sentence], n: usize) -> Result<DecoderStepReport, TrainError> {
        self.ensure_receivers()?;
        let k = self.config.k;
        let csi = self.tx.config().csi;
        let vocab = self.tx.config().vocab_size;
        let rx = &self.receivers[n];
        let rng = &mut self.decoder_rngs[n];
        let mut tape = Tape::new();
        let p = rx.store().bind(&mut tape, true);
        let mut total: Option<Var> = None;
        let mut scores = ScoreSums::default();
        let mut records = Vec::with_capacity(batch.len());
        for s in batch {
            let src = s.with_eos();
            let bits = self.tx.quantize(&self.tx.encode(&src)?)?;
            let frame = channel::transmit(&channel::modulate(&bits)?, &self.channels[n], rng);
            let y = tape.constant(receiver_input(&frame, csi));
            let mem = rx.dequantize_on_tape(&mut tape, &p, y)?;
            let memory = tape.value(mem).clone();
            let mut bundle = decode_sample(rx, &memory, k, rx.config().max_steps(), rng)?;
            let metric = &self.metric;
            bundle.score_with(s.ids(), |c, r| metric.score(c, r));
            let rewards: Vec<f64> = bundle.samples.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
            for (t, &r) in bundle.samples.iter().zip(&rewards) {
                scores.add(t.content(), s.ids(), r);
            }
            let record = AdvantageRecord::new(rewards)?;
            if !record.is_flat() {
                let seqs: Vec<&[u32]> = bundle.samples.iter().map(|t| t.tokens.as_slice()).collect();
                let lp = rx.sequence_log_probs_on_tape(&mut tape, &p, mem, &seqs)?;
                let w = sequence_weights(&seqs, &record.advantages, vocab);
                let term = tape.weighted_sum(lp, &w)?;
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            records.push(record);
        }
        let mut surrogate = 0.0;
        let updated = total.is_some();
        if let Some(t) = total {
            let obj = tape.scale(t, 1.0 / batch.len() as f64);
            surrogate = tape.value(obj).data()[0];
            let grads = tape.backward(obj)?;
            self.receiver_opts[n].step(self.receivers[n].store_mut(), &grads, Direction::Ascent)?;
        }
        self.steps.push(StepKind::Decoder(n));
        Ok(DecoderStepReport {
            receiver: n,
            scores,
            surrogate,
            updated,
            records,
        })
    }

    /// Self-critical update of the encoder with every receiver frozen.
    pub fn encoder_selfcritical_step(&mut self, batch: &[&Sentence]) -> Result<EncoderStepReport, TrainError> {
        self.ensure_receivers()?;
        let k = self.config.k;
        let sigma = self.config.sigma;
        let mut tape = Tape::new();
        let p = self.tx.encoder().bind(&mut tape, true);
        let mut total: Option<Var> = None;
        let mut per_receiver = vec![ScoreSums::default(); self.receivers.len()];
        for s in batch {
            let src = s.with_eos();
            let mu = self.tx.encode_on_tape(&mut tape, &p, &src)?;
            let mean = tape.value(mu).clone();
            let samples = if self.force_mean_samples {
                vec![
                    EncoderPolicySample {
                        noisy: mean.clone(),
                        mean: mean.clone(),
                        sigma,
                    };
                    k
                ]
            } else {
                sample_encoder_policy(&mean, sigma, k, &mut self.policy_rng)?
            };
            let symbols = samples
                .iter()
                .map(|x| Ok(channel::modulate(&self.tx.quantize(&x.noisy)?)?))
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut records = Vec::with_capacity(self.receivers.len());
            for (n, rx) in self.receivers.iter().enumerate() {
                let rewards = receiver_rewards(
                    rx,
                    self.config.encoder_decoding,
                    self.metric.as_ref(),
                    &self.channels[n],
                    &symbols,
                    s.ids(),
                    &mut self.encoder_rngs[n],
                    &mut per_receiver[n],
                )?;
                records.push(AdvantageRecord::new(rewards)?);
            }
            let weights = encoder_sample_weights(&records);
            if weights.iter().all(|&w| w == 0.0) {
                continue;
            }
            let pairs: Vec<(&Tensor, f64)> = samples.iter().map(|x| &x.noisy).zip(weights).collect();
            let seed = score_seed(&mean, &pairs, sigma)?;
            if seed.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let term = tape.weighted_sum(mu, &seed)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let mut surrogate = 0.0;
        let updated = total.is_some();
        if let Some(t) = total {
            let obj = tape.scale(t, 1.0 / batch.len() as f64);
            surrogate = tape.value(obj).data()[0];
            let grads = tape.backward(obj)?;
            self.encoder_opt.step(self.tx.encoder_mut(), &grads, Direction::Ascent)?;
        }
        self.steps.push(StepKind::Encoder);
        Ok(EncoderStepReport {
            per_receiver,
            surrogate,
            updated,
        })
    }

    /// Mean encoder-phase reward over `data`: `K` policy samples per source,
    /// decoded by every receiver, with random streams derived from `seed`.
    /// Parameters are left untouched.
    pub fn probe_encoder_reward(&self, data: &[Sentence], seed: u64) -> Result<f64, TrainError> {
        self.ensure_receivers()?;
        let mut policy = stream(seed, 3);
        let mut rngs: Vec<ChaCha8Rng> = (0..self.receivers.len()).map(|n| stream(seed, 200 + n as u64)).collect();
        let mut total = ScoreSums::default();
        for s in data {
            let mean = self.tx.encode(&s.with_eos())?;
            let symbols = sample_encoder_policy(&mean, self.config.sigma, self.config.k, &mut policy)?
                .iter()
                .map(|x| Ok(channel::modulate(&self.tx.quantize(&x.noisy)?)?))
                .collect::<Result<Vec<_>, TrainError>>()?;
            for (n, rx) in self.receivers.iter().enumerate() {
                receiver_rewards(
                    rx,
                    self.config.encoder_decoding,
                    self.metric.as_ref(),
                    &self.channels[n],
                    &symbols,
                    s.ids(),
                    &mut rngs[n],
                    &mut total,
                )?;
            }
        }
        Ok(total.mean_reward())
    }

    fn close_cycle(
        &mut self,
        epoch: usize,
        decoder: Vec<ScoreSums>,
        decoder_surrogate: Vec<f64>,
        encoder: EncoderStepReport,
    ) -> Result<(), TrainError> {
        let record = CycleRecord {
            epoch,
            cycle: self.cycle_log.len(),
            decoder,
            decoder_surrogate,
            encoder,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        let reward = record.mean_reward();
        self.cycle_log.push(record);
        if let Some(trip) = self.monitor.push(reward) {
            return Err(TrainError::Diverged {
                cycle: trip.cycle,
                reward: trip.reward,
                running_max: trip.running_max,
            });
        }
        Ok(())
    }

    fn decoder_round(
        &mut self,
        data: &[Sentence],
        sums: &mut [ScoreSums],
        surrogate: &mut [f64],
    ) -> Result<(), TrainError> {
        let batch = self.next_batch(data)?;
        for n in 0..self.receivers.len() {
            let rep = self.decoder_selfcritical_step(&batch, n)?;
            sums[n].merge(&rep.scores);
            surrogate[n] += rep.surrogate;
        }
        Ok(())
    }

    /// One update cycle: `κ` decoder batches for every receiver, then one
    /// encoder batch.
    pub fn run_cycle(&mut self, data: &[Sentence], epoch: usize) -> Result<(), TrainError> {
        let n = self.receivers.len();
        let mut sums = vec![ScoreSums::default(); n];
        let mut surrogate = vec![0.0; n];
        for _ in 0..self.config.kappa {
            self.decoder_round(data, &mut sums, &mut surrogate)?;
        }
        for s in &mut surrogate {
            *s /= self.config.kappa as f64;
        }
        let batch = self.next_batch(data)?;
        let enc = self.encoder_selfcritical_step(&batch)?;
        self.close_cycle(epoch, sums, surrogate, enc)
    }

    /// Alternate learning from the current epoch up to the configured total.
    pub fn run_alternate_schedule(&mut self, data: &[Sentence]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        if !self.pretrained {
            self.finish_pretraining()?;
        }
        self.epochs_done = self.epochs_done.max(self.config.pretrain_epochs);
        let eb = self.config.epoch_batches(data.len());
        if self.config.schedule == ScheduleVariant::Cycles && self.config.cycles_per_epoch(eb) == 0 {
            return Err(TrainError::Config(format!(
                "kappa {} exceeds the {eb} batches of an epoch",
                self.config.kappa
            )));
        }
        while self.epochs_done < self.config.total_epochs {
            let epoch = self.epochs_done;
            match self.config.schedule {
                ScheduleVariant::Cycles => {
                    for _ in 0..self.config.cycles_per_epoch(eb) {
                        self.run_cycle(data, epoch)?;
                    }
                }
                ScheduleVariant::ModuloGate => {
                    let n = self.receivers.len();
                    let mut sums = vec![ScoreSums::default(); n];
                    let mut surrogate = vec![0.0; n];
                    let mut rounds = 0usize;
                    for i in 1..=eb {
                        if i % self.config.kappa != 0 {
                            self.decoder_round(data, &mut sums, &mut surrogate)?;
                            rounds += 1;
                        } else {
                            for s in &mut surrogate {
                                *s /= rounds.max(1) as f64;
                            }
                            let batch = self.next_batch(data)?;
                            let enc = self.encoder_selfcritical_step(&batch)?;
                            let done_sums = std::mem::replace(&mut sums, vec![ScoreSums::default(); n]);
                            let done_sur = std::mem::replace(&mut surrogate, vec![0.0; n]);
                            self.close_cycle(epoch, done_sums, done_sur, enc)?;
                            rounds = 0;
                        }
                    }
                }
            }
            self.epochs_done += 1;
        }
        Ok(())
    }

    /// Warm-up followed by alternate learning.
    pub fn run(&mut self, data: &[Sentence]) -> Result<(), TrainError> {
        self.pretrain(data)?;
        self.run_alternate_schedule(data)
    }

    pub fn verdict(&self) -> Result<Verdict, TrainError> {
        convergence_check(&self.monitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::OptimizerKind;

    const VOCAB: usize = 12;

    fn corpus(n: usize) -> Vec<Sentence> {
        (0..n)
            .map(|i| {
                let len = 2 + i % 3;
                let ids = (0..len).map(|j| 4 + ((i * 3 + j * 5) % (VOCAB - 4)) as u32).collect();
                Sentence::new(ids, 1, 4).unwrap()
            })
            .collect()
    }

    fn model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            code_dim: 8,
            bits: 8,
            ffn_hidden: 32,
            ..ModelConfig::desk(VOCAB, 4)
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 0.05,
            k: 3,
            kappa: 1,
            pretrain_epochs: 1,
            total_epochs: 2,
            batches_per_epoch: Some(2),
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn trainer(cfg: TrainConfig, receivers: usize) -> Trainer {
        let channels = vec![ChannelConfig::awgn(10.0, 0.0); receivers];
        let mut t = Trainer::new(&model(), cfg, channels, &MetricRegistry::default()).unwrap();
        t.finish_pretraining().unwrap();
        t
    }

    #[test]
    fn schedule_alternates_decoder_and_encoder() {
        let data = corpus(8);
        let mut t = trainer(config(), 1);
        t.run_alternate_schedule(&data).unwrap();
        assert_eq!(
            t.steps(),
            &[StepKind::Decoder(0), StepKind::Encoder, StepKind::Decoder(0), StepKind::Encoder]
        );
        assert_eq!(t.cycle_log().len(), 2);
    }

    #[test]
    fn modulo_gate_trains_encoder_on_multiples_of_kappa() {
        let data = corpus(8);
        let cfg = TrainConfig {
            kappa: 3,
            batches_per_epoch: Some(6),
            schedule: ScheduleVariant::ModuloGate,
            ..config()
        };
        let mut t = trainer(cfg, 1);
        t.run_alternate_schedule(&data).unwrap();
        let d = StepKind::Decoder(0);
        let e = StepKind::Encoder;
        assert_eq!(t.steps(), &[d, d, e, d, d, e]);
    }

    #[test]
    fn kappa_above_epoch_is_rejected() {
        let data = corpus(8);
        let cfg = TrainConfig { kappa: 5, ..config() };
        let mut t = trainer(cfg, 1);
        assert!(matches!(t.run_alternate_schedule(&data), Err(TrainError::Config(_))));
    }

    #[test]
    fn decoder_step_touches_only_its_receiver() {
        let data = corpus(8);
        let mut t = trainer(config(), 2);
        let enc = t.transmitter().encoder().fingerprint();
        let quant = t.transmitter().quantizer().fingerprint();
        let other = t.receivers()[1].store().fingerprint();
        let mine = t.receivers()[0].store().fingerprint();
        let batch: Vec<&Sentence> = data.iter().collect();
        let rep = t.decoder_selfcritical_step(&batch, 0).unwrap();
        assert_eq!(t.transmitter().encoder().fingerprint(), enc);
        assert_eq!(t.transmitter().quantizer().fingerprint(), quant);
        assert_eq!(t.receivers()[1].store().fingerprint(), other);
        assert_eq!(rep.updated, t.receivers()[0].store().fingerprint() != mine);
    }

    #[test]
    fn encoder_step_touches_only_the_encoder() {
        let data = corpus(8);
        let mut t = trainer(TrainConfig { sigma: 0.5, ..config() }, 2);
        let enc = t.transmitter().encoder().fingerprint();
        let quant = t.transmitter().quantizer().fingerprint();
        let rx: Vec<String> = t.receivers().iter().map(|r| r.store().fingerprint()).collect();
        let batch: Vec<&Sentence> = data.iter().collect();
        let rep = t.encoder_selfcritical_step(&batch).unwrap();
        assert!(rep.updated);
        assert_ne!(t.transmitter().encoder().fingerprint(), enc);
        assert_eq!(t.transmitter().quantizer().fingerprint(), quant);
        for (r, f) in t.receivers().iter().zip(&rx) {
            assert_eq!(&r.store().fingerprint(), f);
        }
    }

    #[test]
    fn noiseless_policy_gives_no_encoder_update() {
        let data = corpus(8);
        let mut t = trainer(config(), 1);
        t.set_force_mean_samples(true);
        let before = t.transmitter().encoder().clone();
        let batch: Vec<&Sentence> = data.iter().collect();
        let rep = t.encoder_selfcritical_step(&batch).unwrap();
        assert!(!rep.updated);
        assert_eq!(t.transmitter().encoder(), &before);
    }

    #[test]
    fn equal_rewards_leave_decoder_unchanged() {
        let data = corpus(4);
        let mut t = trainer(config(), 1)
            .with_metric_for_test(Arc::new(Constant));
        let before = t.receivers()[0].store().clone();
        let batch: Vec<&Sentence> = data.iter().collect();
        let rep = t.decoder_selfcritical_step(&batch, 0).unwrap();
        assert!(!rep.updated);
        assert!(rep.records.iter().all(AdvantageRecord::is_flat));
        assert_eq!(t.receivers()[0].store(), &before);
    }

    struct Constant;

    impl SimilarityMetric for Constant {
        fn name(&self) -> &str {
            "const"
        }

        fn score(&self, _: &[u32], _: &[u32]) -> f64 {
            0.4
        }
    }

    impl Trainer {
        fn with_metric_for_test(mut self, m: Arc<dyn SimilarityMetric>) -> Self {
            self.metric = m;
            self
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = corpus(8);
        let run = || {
            let mut t = trainer(config(), 2);
            t.run_alternate_schedule(&data).unwrap();
            (
                t.transmitter().encoder().fingerprint(),
                t.receivers()[1].store().fingerprint(),
                t.cycle_log()
                    .iter()
                    .map(|c| CycleRecord { wall_time: 0.0, ..c.clone() })
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_entropy_halves_on_small_corpus() {
        let data = corpus(50);
        let cfg = TrainConfig {
            batch_size: 10,
            lr: 3e-3,
            optimizer: OptimizerKind::adam(),
            pretrain_channel: PretrainChannel::Identity,
            ..config()
        };
        let channels = vec![ChannelConfig::awgn(10.0, 0.0)];
        let mut t = Trainer::new(&model(), cfg, channels, &MetricRegistry::default()).unwrap();
        let mut losses = Vec::new();
        for _ in 0..100 {
            let batch = t.next_batch(&data).unwrap();
            losses.push(t.pretrain_step(&batch).unwrap());
        }
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[95..].iter().sum::<f64>() / 5.0;
        assert!(tail <= 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn receivers_start_from_the_shared_decoder() {
        let t = trainer(config(), 3);
        for (n, r) in t.receivers().iter().enumerate() {
            assert_eq!(r.store().group(), receiver_group(n));
            assert_eq!(r.store().tensors(), t.shared_decoder().store().tensors());
        }
    }

    #[test]
    fn steps_before_pretraining_are_rejected() {
        let data = corpus(4);
        let channels = vec![ChannelConfig::awgn(10.0, 0.0)];
        let mut t = Trainer::new(&model(), config(), channels, &MetricRegistry::default()).unwrap();
        let batch: Vec<&Sentence> = data.iter().collect();
        assert!(matches!(t.decoder_selfcritical_step(&batch, 0), Err(TrainError::Config(_))));
    }
}
