use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffcore::OptimizerKind;

/// How decoder and encoder updates interleave within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleVariant {
    /// `κ` decoder batches, then one encoder batch; `⌊E_b/κ⌋` cycles per epoch.
    #[default]
    Cycles,
    /// Batch `i` of the epoch trains the decoders unless `i mod κ = 0`, in
    /// which case it trains the encoder.
    ModuloGate,
}

/// Receiver decoding rule while the encoder is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderDecoding {
    #[default]
    Greedy,
    Sampled,
}

/// Channel seen by the cross-entropy warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainChannel {
    /// Noiseless BPSK symbols.
    Identity,
    /// Sources rotate over the configured receiver channels.
    #[default]
    Receivers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Per-phase learning rates; fall back to `lr`.
    pub pretrain_lr: Option<f64>,
    pub decoder_lr: Option<f64>,
    pub encoder_lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    /// Parallel samples per source.
    pub k: usize,
    /// Decoder batches per encoder batch.
    pub kappa: usize,
    pub pretrain_epochs: usize,
    pub total_epochs: usize,
    /// Batches per epoch; defaults to one pass over the training split.
    pub batches_per_epoch: Option<usize>,
    pub sigma: f64,
    pub gamma: f64,
    pub seed: u64,
    pub metric: String,
    pub schedule: ScheduleVariant,
    pub encoder_decoding: EncoderDecoding,
    pub pretrain_channel: PretrainChannel,
    pub monitor_window: usize,
    pub converge_slope_tol: f64,
    pub converge_var_tol: f64,
    pub divergence_ratio: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-5,
            pretrain_lr: None,
            decoder_lr: None,
            encoder_lr: None,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            k: 5,
            kappa: 1000,
            pretrain_epochs: 50,
            total_epochs: 180,
            batches_per_epoch: None,
            sigma: 0.1,
            gamma: 1.0,
            seed: 0,
            metric: "bleu".into(),
            schedule: ScheduleVariant::Cycles,
            encoder_decoding: EncoderDecoding::Greedy,
            pretrain_channel: PretrainChannel::Receivers,
            monitor_window: 10,
            converge_slope_tol: 1e-3,
            converge_var_tol: 1e-4,
            divergence_ratio: 0.5,
            divergence_patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.kappa == 0 {
            return bad("kappa must be at least 1");
        }
        if self.pretrain_epochs >= self.total_epochs {
            return bad("pretrain_epochs must be below total_epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if self.monitor_window < 10 {
            return bad("monitor_window must be at least 10 cycles");
        }
        if !(0.0..1.0).contains(&self.divergence_ratio) || self.divergence_patience == 0 {
            return bad("divergence guard needs ratio in [0, 1) and positive patience");
        }
        for lr in [Some(self.lr), self.pretrain_lr, self.decoder_lr, self.encoder_lr].into_iter().flatten() {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        Ok(())
    }

    pub fn epoch_batches(&self, train_len: usize) -> usize {
        self.batches_per_epoch.unwrap_or_else(|| train_len.div_ceil(self.batch_size).max(1))
    }

    /// Update cycles in one alternate-learning epoch.
    pub fn cycles_per_epoch(&self, epoch_batches: usize) -> usize {
        epoch_batches / self.kappa
    }
}
