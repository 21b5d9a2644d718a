use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::Transmitter;
use super::CodecError;
use crate::diffcore::{Gradients, Tape, Tensor};

/// One draw `x̃ = μ + σ·ε` of the transmitter's Gaussian policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPolicySample {
    pub noisy: Tensor,
    pub mean: Tensor,
    pub sigma: f64,
}

fn check_sigma(sigma: f64) -> Result<(), CodecError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CodecError::Sigma(sigma))
    }
}

/// `k` independent isotropic Gaussian perturbations of `mean`.
pub fn sample_encoder_policy<R: Rng + ?Sized>(
    mean: &Tensor,
    sigma: f64,
    k: usize,
    rng: &mut R,
) -> Result<Vec<EncoderPolicySample>, CodecError> {
    check_sigma(sigma)?;
    if k < 2 {
        return Err(CodecError::TooFewSamples(k));
    }
    let (r, c) = mean.dims();
    Ok((0..k)
        .map(|_| {
            let noisy = mean
                .data()
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + sigma * z
                })
                .collect();
            EncoderPolicySample {
                noisy: Tensor::from_vec(r, c, noisy),
                mean: mean.clone(),
                sigma,
            }
        })
        .collect())
}

/// `log N(x̃; μ, σ²I)`.
pub fn gaussian_log_density(noisy: &Tensor, mean: &Tensor, sigma: f64) -> Result<f64, CodecError> {
    check_sigma(sigma)?;
    if noisy.shape() != mean.shape() {
        return Err(CodecError::Shape {
            what: "policy sample",
            expected: mean.len(),
            got: noisy.len(),
        });
    }
    let sq: f64 = noisy.data().iter().zip(mean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = mean.len() as f64;
    Ok(-sq / (2.0 * sigma * sigma) - 0.5 * n * (2.0 * std::f64::consts::PI * sigma * sigma).ln())
}

/// Upstream gradient `Σ_j w_j (x̃_j − μ) / σ²` that turns a vector-Jacobian
/// product through `μ` into the weighted Gaussian score.
pub fn score_seed(mean: &Tensor, samples: &[(&Tensor, f64)], sigma: f64) -> Result<Tensor, CodecError> {
    check_sigma(sigma)?;
    let mut seed = vec![0.0; mean.len()];
    for &(noisy, w) in samples {
        if noisy.shape() != mean.shape() {
            return Err(CodecError::Shape {
                what: "policy sample",
                expected: mean.len(),
                got: noisy.len(),
            });
        }
        let c = w / (sigma * sigma);
        for ((s, &x), &m) in seed.iter_mut().zip(noisy.data()).zip(mean.data()) {
            *s += c * (x - m);
        }
    }
    let (r, c) = mean.dims();
    Ok(Tensor::from_vec(r, c, seed))
}

/// `Σ_j w_j · (x̃_j − μ)ᵀ σ⁻² ∂μ/∂θ_en` for one source, as a vector-Jacobian
/// product through the encoder. Only encoder parameters receive gradient.
pub fn weighted_gaussian_score(
    tx: &Transmitter,
    source: &[u32],
    samples: &[(&Tensor, f64)],
    sigma: f64,
) -> Result<Gradients, CodecError> {
    check_sigma(sigma)?;
    let mut tape = Tape::new();
    let p = tx.encoder().bind(&mut tape, true);
    let mu = tx.encode_on_tape(&mut tape, &p, source)?;
    let seed = score_seed(tape.value(mu), samples, sigma)?;
    let loss = tape.weighted_sum(mu, &seed)?;
    Ok(tape.backward(loss)?)
}

/// Score `∇_θ log π_θ(x̃)` of a single draw.
pub fn gaussian_score(tx: &Transmitter, source: &[u32], noisy: &Tensor, sigma: f64) -> Result<Gradients, CodecError> {
    weighted_gaussian_score(tx, source, &[(noisy, 1.0)], sigma)
}
