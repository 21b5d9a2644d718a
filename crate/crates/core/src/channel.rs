//! Simulated broadcast physical layer.
//!
//! Bits are BPSK-mapped (`0 → −1`, `1 → +1`, unit symbol energy) and sent
//! through per-receiver AWGN or Rayleigh block-fading channels. Receivers get
//! soft real-valued observations `y = h·s + n` with `n ~ N(0, 10^(−SNR/10))`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

/// Per-transmission SNR draws are clamped to this range (dB).
pub const SNR_CLAMP_DB: (f64, f64) = (-10.0, 40.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("frame entry {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f64 },
    #[error("broadcast needs at least one receiver")]
    NoReceivers,
    #[error("{configs} receiver configs but {streams} rng streams")]
    StreamCount { configs: usize, streams: usize },
    #[error("delta_snr_db must be >= 0, got {0}")]
    NegativeDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FadingGranularity {
    /// One gain per frame.
    #[default]
    Block,
    PerSymbol,
}

/// Channel settings of one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(default)]
    pub receiver: usize,
    pub kind: ChannelKind,
    pub mu_snr_db: f64,
    /// Standard deviation of the per-transmission SNR draw.
    pub delta_snr_db: f64,
    #[serde(default)]
    pub fading: FadingGranularity,
}

impl ChannelConfig {
    pub fn awgn(mu_snr_db: f64, delta_snr_db: f64) -> Self {
        Self {
            receiver: 0,
            kind: ChannelKind::Awgn,
            mu_snr_db,
            delta_snr_db,
            fading: FadingGranularity::Block,
        }
    }

    pub fn rayleigh(mu_snr_db: f64, delta_snr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Rayleigh,
            ..Self::awgn(mu_snr_db, delta_snr_db)
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.delta_snr_db < 0.0 || !self.delta_snr_db.is_finite() {
            return Err(ChannelError::NegativeDelta(self.delta_snr_db));
        }
        Ok(())
    }

    /// Same channel pinned at a fixed SNR, used by evaluation sweeps.
    pub fn at_snr(&self, snr_db: f64) -> Self {
        Self {
            mu_snr_db: snr_db,
            delta_snr_db: 0.0,
            ..self.clone()
        }
    }
}

/// What one transmission drew.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub snr_db: f64,
    pub noise_var: f64,
    /// Fading magnitudes: one entry for block fading, one per symbol
    /// otherwise; `[1.0]` on AWGN.
    pub gains: Vec<f64>,
}

impl ChannelRealization {
    /// Gain applied to symbol `i`.
    pub fn gain_at(&self, i: usize) -> f64 {
        if self.gains.len() == 1 {
            self.gains[0]
        } else {
            self.gains[i]
        }
    }
}

/// Soft channel output delivered to a receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub values: Tensor,
    pub realization: ChannelRealization,
}

impl ReceivedFrame {
    /// Perfect CSI as one column per frame row: the block gain, or the row
    /// mean of the per-symbol gains.
    pub fn csi(&self) -> Tensor {
        let (r, c) = self.values.dims();
        let col = (0..r)
            .map(|i| (0..c).map(|j| self.realization.gain_at(i * c + j)).sum::<f64>() / c as f64)
            .collect();
        Tensor::from_vec(r, 1, col)
    }
}

pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Draws `snr ~ N(μ, δ²)` clamped to [`SNR_CLAMP_DB`].
pub fn sample_snr<R: Rng + ?Sized>(config: &ChannelConfig, rng: &mut R) -> f64 {
    if config.delta_snr_db == 0.0 {
        return config.mu_snr_db.clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1);
    }
    let z: f64 = StandardNormal.sample(rng);
    (config.mu_snr_db + config.delta_snr_db * z).clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1)
}

/// BPSK map of a `{0,1}` frame.
pub fn modulate(bits: &Tensor) -> Result<Tensor, ChannelError> {
    let (r, c) = bits.dims();
    let mut out = Vec::with_capacity(bits.len());
    for (index, &b) in bits.data().iter().enumerate() {
        let s = if b == 0.0 {
            -1.0
        } else if b == 1.0 {
            1.0
        } else {
            return Err(ChannelError::NonBinary { index, value: b });
        };
        out.push(s);
    }
    Ok(Tensor::from_vec(r, c, out))
}

/// Hard decision: positive symbols become 1.
pub fn demodulate_hard(symbols: &Tensor) -> Tensor {
    let (r, c) = symbols.dims();
    Tensor::from_vec(r, c, symbols.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
}

fn add_noise<R: Rng + ?Sized>(values: &mut [f64], noise_var: f64, rng: &mut R) {
    let sd = noise_var.sqrt();
    let normal = Normal::new(0.0, sd).expect("finite noise sd");
    for v in values {
        *v += normal.sample(rng);
    }
}

pub fn transmit_awgn<R: Rng + ?Sized>(symbols: &Tensor, snr_db: f64, rng: &mut R) -> ReceivedFrame {
    let noise_var = noise_variance(snr_db);
    let mut values = symbols.clone();
    add_noise(values.data_mut(), noise_var, rng);
    ReceivedFrame {
        values,
        realization: ChannelRealization {
            snr_db,
            noise_var,
            gains: vec![1.0],
        },
    }
}

/// Rayleigh magnitude with unit mean square: `|h| = sqrt((x² + y²)/2)`.
pub fn sample_rayleigh_gain<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    ((x * x + y * y) / 2.0).sqrt()
}

/// How the fading gain of a Rayleigh transmission is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fading {
    Random(FadingGranularity),
    /// Forces `h` (test hook).
    Fixed(f64),
}

pub fn transmit_rayleigh<R: Rng + ?Sized>(symbols: &Tensor, snr_db: f64, fading: Fading, rng: &mut R) -> ReceivedFrame {
    let gains = match fading {
        Fading::Fixed(h) => vec![h],
        Fading::Random(FadingGranularity::Block) => vec![sample_rayleigh_gain(rng)],
        Fading::Random(FadingGranularity::PerSymbol) => (0..symbols.len()).map(|_| sample_rayleigh_gain(rng)).collect(),
    };
    let noise_var = noise_variance(snr_db);
    let realization = ChannelRealization {
        snr_db,
        noise_var,
        gains,
    };
    let mut values = symbols.clone();
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        *v *= realization.gain_at(i);
    }
    add_noise(values.data_mut(), noise_var, rng);
    ReceivedFrame { values, realization }
}

/// One transmission through `config`: SNR draw, then the channel.
pub fn transmit<R: Rng + ?Sized>(symbols: &Tensor, config: &ChannelConfig, rng: &mut R) -> ReceivedFrame {
    let snr = sample_snr(config, rng);
    match config.kind {
        ChannelKind::Awgn => transmit_awgn(symbols, snr, rng),
        ChannelKind::Rayleigh => transmit_rayleigh(symbols, snr, Fading::Random(config.fading), rng),
    }
}

/// Sends the same bit frame to every receiver, each through its own channel
/// and its own random stream.
pub fn broadcast<R: Rng>(bits: &Tensor, configs: &[ChannelConfig], streams: &mut [R]) -> Result<Vec<ReceivedFrame>, ChannelError> {
    if configs.is_empty() {
        return Err(ChannelError::NoReceivers);
    }
    if configs.len() != streams.len() {
        return Err(ChannelError::StreamCount {
            configs: configs.len(),
            streams: streams.len(),
        });
    }
    let symbols = modulate(bits)?;
    Ok(configs
        .iter()
        .zip(streams.iter_mut())
        .map(|(cfg, rng)| transmit(&symbols, cfg, rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_delta_always_returns_mean() {
        let cfg = ChannelConfig::awgn(7.5, 0.0);
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(sample_snr(&cfg, &mut r), 7.5);
        }
    }

    #[test]
    fn snr_draw_mean_matches_config() {
        let cfg = ChannelConfig::awgn(10.0, 1.0);
        let mut r = rng(2);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_snr(&cfg, &mut r)).sum::<f64>() / n as f64;
        assert!((mean - 10.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn snr_draw_is_clamped() {
        let cfg = ChannelConfig::awgn(39.0, 30.0);
        let mut r = rng(3);
        for _ in 0..10_000 {
            let s = sample_snr(&cfg, &mut r);
            assert!((SNR_CLAMP_DB.0..=SNR_CLAMP_DB.1).contains(&s));
        }
    }

    #[test]
    fn bpsk_maps_and_inverts() {
        let bits = Tensor::from_vec(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let s = modulate(&bits).unwrap();
        assert_eq!(s.data(), &[-1.0, -1.0, 1.0, 1.0, -1.0, 1.0]);
        assert_eq!(demodulate_hard(&s), bits);
        let power = s.data().iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        assert_eq!(power, 1.0);
        let zeros = modulate(&Tensor::zeros(3, 4)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn non_binary_frame_is_rejected() {
        let err = modulate(&Tensor::row(vec![0.0, 0.5])).unwrap_err();
        assert_eq!(err, ChannelError::NonBinary { index: 1, value: 0.5 });
    }

    #[test]
    fn high_snr_leaves_symbols_nearly_intact() {
        let s = modulate(&Tensor::from_vec(4, 8, vec![1.0; 32])).unwrap();
        let y = transmit_awgn(&s, SNR_CLAMP_DB.1, &mut rng(4));
        for (a, b) in y.values.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 0.06);
        }
    }

    #[test]
    fn fixed_unit_gain_reduces_to_awgn() {
        let s = modulate(&Tensor::from_vec(3, 5, [0.0, 1.0, 1.0, 0.0, 1.0].repeat(3))).unwrap();
        let a = transmit_awgn(&s, 3.0, &mut rng(9));
        let b = transmit_rayleigh(&s, 3.0, Fading::Fixed(1.0), &mut rng(9));
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn rayleigh_mean_magnitude_is_sqrt_pi_over_four() {
        let mut r = rng(5);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_rayleigh_gain(&mut r)).sum::<f64>() / n as f64;
        let want = (std::f64::consts::PI / 4.0).sqrt();
        assert!((mean - want).abs() / want < 0.02, "{mean}");
    }

    #[test]
    fn single_receiver_broadcast_equals_one_transmission() {
        let bits = Tensor::from_vec(2, 4, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let cfg = ChannelConfig::awgn(6.0, 1.0);
        let mut streams = vec![rng(42)];
        let out = broadcast(&bits, std::slice::from_ref(&cfg), &mut streams).unwrap();
        let single = transmit(&modulate(&bits).unwrap(), &cfg, &mut rng(42));
        assert_eq!(out[0], single);
    }

    #[test]
    fn broadcast_validates_inputs() {
        let bits = Tensor::row(vec![1.0]);
        let mut none: Vec<ChaCha8Rng> = vec![];
        assert_eq!(broadcast(&bits, &[], &mut none).unwrap_err(), ChannelError::NoReceivers);
        let mut one = vec![rng(0)];
        let cfgs = vec![ChannelConfig::awgn(0.0, 0.0); 2];
        assert!(matches!(broadcast(&bits, &cfgs, &mut one), Err(ChannelError::StreamCount { .. })));
    }

    #[test]
    fn heterogeneous_receivers_are_accepted() {
        let cfgs = vec![
            ChannelConfig::awgn(6.0, 1.0),
            ChannelConfig::awgn(10.0, 1.0),
            ChannelConfig::awgn(10.0, 2.0),
        ];
        let mut streams: Vec<_> = (0..3).map(|i| rng(100 + i)).collect();
        let bits = Tensor::from_vec(3, 4, vec![1.0; 12]);
        let out = broadcast(&bits, &cfgs, &mut streams).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|f| f.values.dims() == (3, 4)));
    }

    #[test]
    fn distinct_streams_give_uncorrelated_noise() {
        let cfgs = vec![ChannelConfig::awgn(0.0, 0.0); 2];
        let mut streams = vec![rng(1), rng(2)];
        streams[1].set_stream(1);
        let bits = Tensor::zeros(1, 1);
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let n = 10_000;
        for _ in 0..n {
            let out = broadcast(&bits, &cfgs, &mut streams).unwrap();
            let a = out[0].values.data()[0] + 1.0;
            let b = out[1].values.data()[0] + 1.0;
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let nf = n as f64;
        let cov = sab / nf - sa * sb / nf / nf;
        let corr = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn csi_column_carries_block_gain() {
        let s = modulate(&Tensor::zeros(3, 4)).unwrap();
        let y = transmit_rayleigh(&s, 10.0, Fading::Fixed(0.4), &mut rng(3));
        assert_eq!(y.csi(), Tensor::from_vec(3, 1, vec![0.4; 3]));
    }

    #[test]
    fn same_seed_reproduces_realizations() {
        let s = modulate(&Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let cfg = ChannelConfig::rayleigh(5.0, 2.0);
        let a: Vec<_> = {
            let mut r = rng(77);
            (0..10).map(|_| transmit(&s, &cfg, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = rng(77);
            (0..10).map(|_| transmit(&s, &cfg, &mut r)).collect()
        };
        assert_eq!(a, b);
    }
}
