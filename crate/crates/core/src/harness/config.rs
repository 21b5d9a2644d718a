use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::CorpusConfig;
use super::HarnessError;
use crate::channel::{ChannelConfig, ChannelKind, FadingGranularity};
use crate::codec::ModelConfig;
use crate::trainer::TrainConfig;

/// Model widths; vocabulary size and sentence length come from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub code_dim: usize,
    pub bits: usize,
    pub ffn_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub csi: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 128,
            code_dim: 16,
            bits: 30,
            ffn_hidden: 512,
            enc_layers: 2,
            dec_layers: 2,
            csi: false,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            code_dim: self.code_dim,
            bits: self.bits,
            ffn_hidden: self.ffn_hidden,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len,
            csi: self.csi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_grid: Vec<f64>,
    /// Channel draws averaged per sentence per SNR point.
    pub realizations: usize,
    pub split: EvalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_grid: (0..=10).map(|i| 2.0 * i as f64).collect(),
            realizations: 20,
            split: EvalSplit::Test,
        }
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<(), HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("SNR grid is empty".into()));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(format!("SNR grid must be finite and strictly ascending: {grid:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub receivers: Vec<ChannelConfig>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let awgn = |receiver, mu, delta| ChannelConfig {
            receiver,
            kind: ChannelKind::Awgn,
            mu_snr_db: mu,
            delta_snr_db: delta,
            fading: FadingGranularity::Block,
        };
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            receivers: vec![awgn(0, 6.0, 1.0), awgn(1, 10.0, 1.0), awgn(2, 10.0, 2.0)],
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.corpus.validate()?;
        self.train.validate()?;
        validate_grid(&self.eval.snr_grid)?;
        if self.eval.realizations == 0 {
            return Err(HarnessError::Config("eval.realizations must be positive".into()));
        }
        if self.receivers.is_empty() {
            return Err(HarnessError::Config("at least one receiver must be configured".into()));
        }
        for (i, r) in self.receivers.iter().enumerate() {
            r.validate()?;
            if r.receiver != i {
                return Err(HarnessError::Config(format!(
                    "receiver entries must be numbered 0.. in order; entry {i} says {}",
                    r.receiver
                )));
            }
        }
        Ok(())
    }

    /// Canonical text of the fully resolved config.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the resolved config with the output directory left out.
    pub fn hash(&self) -> String {
        let located = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(located.resolved().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with `n` receivers, reusing the configured channels cyclically.
    pub fn with_receiver_count(&self, n: usize) -> Self {
        let receivers = (0..n)
            .map(|i| ChannelConfig {
                receiver: i,
                ..self.receivers[i % self.receivers.len()].clone()
            })
            .collect();
        Self {
            receivers,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.resolved()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 4
            [train]
            kappa = 50
            [[receivers]]
            kind = "rayleigh"
            mu_snr_db = 12.0
            delta_snr_db = 0.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.kappa, 50);
        assert_eq!(cfg.train.k, 5);
        assert_eq!(cfg.receivers.len(), 1);
        assert_eq!(cfg.model.bits, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
    }

    #[test]
    fn grid_must_ascend() {
        assert!(validate_grid(&[0.0, 2.0, 2.0]).is_err());
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.0, 5.0]).is_ok());
    }

    #[test]
    fn receiver_count_copies_channels() {
        let cfg = ExperimentConfig::default().with_receiver_count(5);
        assert_eq!(cfg.receivers.len(), 5);
        assert_eq!(cfg.receivers[3].mu_snr_db, 6.0);
        assert_eq!(cfg.receivers[4].receiver, 4);
        cfg.validate().unwrap();
    }
}
