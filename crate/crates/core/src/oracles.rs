//! Independent checks of the learning machinery: finite-difference gradient
//! checks of the model components, a tabular micro-MDP whose policy gradient
//! is known by enumeration, and a two-parameter encoder toy whose expected
//! reward can be differenced with common random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::codec::{
    gaussian_log_density, gaussian_score, receiver_group, sample_encoder_policy, score_seed,
    CodecError, ModelConfig, Receiver, Transmitter, EOS, PAD, QUANTIZER_GROUP, SOS,
};
use crate::diffcore::{
    finite_difference_check, kernels, Axis, DiffError, GradCheckReport, Gradients, ParamStore, Tape, Tensor, Var,
};
use crate::trainer::{encoder_sample_weights, sequence_weights, AdvantageRecord, TrainError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Per-coordinate running mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    /// Standard error of each mean.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Largest `|a − b| / se` over coordinates.
pub fn max_z(estimate: &[f64], target: &[f64], se: &[f64]) -> f64 {
    estimate
        .iter()
        .zip(target)
        .zip(se)
        .map(|((a, b), s)| {
            let d = (a - b).abs();
            if d == 0.0 {
                0.0
            } else {
                d / s
            }
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks of the model components.

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub report: GradCheckReport,
}

/// Small model whose every store has a few hundred coordinates.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 12,
        code_dim: 10,
        bits: 24,
        ffn_hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 6,
        csi: false,
    }
}

const GRADCHECK_SOURCE: [u32; 5] = [4, 9, 13, 6, EOS];
const GRADCHECK_TARGET: [u32; 4] = [7, 5, 11, EOS];

fn fixed_weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Gradient checks of the encoder, the teacher-forced decoder, the
/// straight-through quantizer against its linear surrogate, and the Gaussian
/// policy log-density. Each samples up to `coords` coordinates.
pub fn component_gradchecks(coords: usize, seed: u64) -> Result<Vec<ComponentCheck>, OracleError> {
    let cfg = gradcheck_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tx = Transmitter::new(&cfg, &mut rng)?;
    let rx = Receiver::new(&cfg, receiver_group(0), &mut rng)?;
    let mut out = Vec::new();

    // encoder: linear functional of the code
    let code = tx.encode(&GRADCHECK_SOURCE)?;
    let w = fixed_weights(code.rows(), code.cols(), &mut rng);
    let mut tape = Tape::new();
    let p = tx.encoder().bind(&mut tape, true);
    let mu = tx.encode_on_tape(&mut tape, &p, &GRADCHECK_SOURCE)?;
    let loss = tape.weighted_sum(mu, &w)?;
    let grads = tape.backward(loss)?;
    let mut store = tx.encoder().clone();
    let report = finite_difference_check(
        &mut store,
        &grads,
        |s| {
            let t = Transmitter::from_stores(&cfg, s.clone(), tx.quantizer().clone()).expect("same layout");
            kernels::dot(t.encode(&GRADCHECK_SOURCE).expect("valid source").data(), w.data())
        },
        1e-6,
        coords,
        seed,
    )?;
    out.push(ComponentCheck {
        component: "encoder",
        report,
    });

    // decoder: weighted teacher-forced log-probabilities from a fixed frame
    let received = Tensor::from_vec(
        code.rows(),
        cfg.bits,
        (0..code.rows() * cfg.bits).map(|_| rng.random_range(-1.5..1.5)).collect(),
    );
    let targets: [&[u32]; 1] = [&GRADCHECK_TARGET];
    let mut lw = fixed_weights(GRADCHECK_TARGET.len(), cfg.vocab_size, &mut rng);
    // masked columns hold constants near -1e9
    for r in 0..lw.rows() {
        lw.set(r, PAD as usize, 0.0);
        lw.set(r, SOS as usize, 0.0);
    }
    let decoder_loss = |r: &Receiver, tape: &mut Tape, p: &[Var]| -> Result<Var, OracleError> {
        let y = tape.constant(received.clone());
        let mem = r.dequantize_on_tape(tape, p, y)?;
        let lp = r.sequence_log_probs_on_tape(tape, p, mem, &targets)?;
        Ok(tape.weighted_sum(lp, &lw)?)
    };
    let mut tape = Tape::new();
    let p = rx.store().bind(&mut tape, true);
    let loss = decoder_loss(&rx, &mut tape, &p)?;
    let grads = tape.backward(loss)?;
    let mut store = rx.store().clone();
    let report = finite_difference_check(
        &mut store,
        &grads,
        |s| {
            let r = Receiver::from_store(&cfg, s.clone()).expect("same layout");
            let mut tape = Tape::new();
            let p = r.store().bind(&mut tape, false);
            let l = decoder_loss(&r, &mut tape, &p).expect("valid decode");
            tape.value(l).data()[0]
        },
        1e-6,
        coords,
        seed,
    )?;
    out.push(ComponentCheck {
        component: "decoder",
        report,
    });

    // quantizer: gradient through the hard threshold vs the linear surrogate
    let bw = fixed_weights(code.rows(), cfg.bits, &mut rng);
    let mut tape = Tape::new();
    let q = tx.quantizer().bind(&mut tape, true);
    let c = tape.constant(code.clone());
    let z = tx.quantizer_logits_on_tape(&mut tape, &q, c)?;
    let bits = tape.threshold_ste(z);
    let loss = tape.weighted_sum(bits, &bw)?;
    let grads = tape.backward(loss)?.restrict_to_group(QUANTIZER_GROUP);
    let mut store = tx.quantizer().clone();
    let report = finite_difference_check(
        &mut store,
        &grads,
        |s| {
            let t = Transmitter::from_stores(&cfg, tx.encoder().clone(), s.clone()).expect("same layout");
            kernels::dot(t.quantizer_logits(&code).expect("valid code").data(), bw.data())
        },
        1e-6,
        coords,
        seed,
    )?;
    out.push(ComponentCheck {
        component: "quantizer-surrogate",
        report,
    });

    // Gaussian policy log-density
    let sigma = 0.3;
    let noisy = sample_encoder_policy(&code, sigma, 2, &mut rng)?.swap_remove(0).noisy;
    let grads = gaussian_score(&tx, &GRADCHECK_SOURCE, &noisy, sigma)?;
    let mut store = tx.encoder().clone();
    let report = finite_difference_check(
        &mut store,
        &grads,
        |s| {
            let t = Transmitter::from_stores(&cfg, s.clone(), tx.quantizer().clone()).expect("same layout");
            gaussian_log_density(&noisy, &t.encode(&GRADCHECK_SOURCE).expect("valid source"), sigma)
                .expect("positive sigma")
        },
        1e-6,
        coords,
        seed,
    )?;
    out.push(ComponentCheck {
        component: "gaussian-log-density",
        report,
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Micro-MDP: two decoding steps over three tokens with a tabular policy.

pub const MDP_TOKENS: usize = 3;

/// `π(w₁) = softmax(a)`, `π(w₂ | w₁) = softmax(B[w₁])`, reward `R[w₁][w₂]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMdp {
    pub store: ParamStore,
    pub reward: [[f64; MDP_TOKENS]; MDP_TOKENS],
}

/// Draws of the self-critical decoder estimator and of its baseline term.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpEstimate {
    pub estimator: Vec<f64>,
    pub baseline_term: Vec<f64>,
}

impl MicroMdp {
    pub fn standard() -> Self {
        let mut store = ParamStore::new(0);
        store.add("a", Tensor::row(vec![0.3, -0.2, 0.1]));
        store.add(
            "b",
            Tensor::from_vec(3, 3, vec![0.5, -0.4, 0.0, -0.1, 0.2, 0.3, 0.0, 0.6, -0.5]),
        );
        Self {
            store,
            reward: [[0.9, 0.1, 0.4], [0.2, 0.8, 0.0], [0.5, 0.3, 1.0]],
        }
    }

    pub fn dim(&self) -> usize {
        self.store.scalar_count()
    }

    fn softmax(row: &[f64]) -> [f64; MDP_TOKENS] {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        [e[0] / s, e[1] / s, e[2] / s]
    }

    fn policy(store: &ParamStore) -> ([f64; MDP_TOKENS], [[f64; MDP_TOKENS]; MDP_TOKENS]) {
        let p1 = Self::softmax(store.tensor(0).data());
        let b = store.tensor(1);
        let p2 = [0, 1, 2].map(|i| Self::softmax(b.row_slice(i)));
        (p1, p2)
    }

    /// `E[R]` by enumerating all nine trajectories.
    pub fn expected_reward(&self, store: &ParamStore) -> f64 {
        let (p1, p2) = Self::policy(store);
        let mut j = 0.0;
        for w1 in 0..MDP_TOKENS {
            for w2 in 0..MDP_TOKENS {
                j += p1[w1] * p2[w1][w2] * self.reward[w1][w2];
            }
        }
        j
    }

    /// Exact `∇E[R]`, flattened as `a` then `B` row-major.
    pub fn exact_gradient(&self) -> Vec<f64> {
        let (p1, p2) = Self::policy(&self.store);
        let mut ga = [0.0; MDP_TOKENS];
        let mut gb = [[0.0; MDP_TOKENS]; MDP_TOKENS];
        for w1 in 0..MDP_TOKENS {
            for w2 in 0..MDP_TOKENS {
                let pr = p1[w1] * p2[w1][w2] * self.reward[w1][w2];
                for j in 0..MDP_TOKENS {
                    ga[j] += pr * (f64::from(u8::from(j == w1)) - p1[j]);
                    gb[w1][j] += pr * (f64::from(u8::from(j == w2)) - p2[w1][j]);
                }
            }
        }
        let mut g = ga.to_vec();
        for row in gb {
            g.extend(row);
        }
        g
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [u32; 2] {
        let (p1, p2) = Self::policy(&self.store);
        let draw = |p: &[f64; MDP_TOKENS], rng: &mut R| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i as u32;
                }
            }
            (MDP_TOKENS - 1) as u32
        };
        let w1 = draw(&p1, rng);
        let w2 = draw(&p2[w1 as usize], rng);
        [w1, w2]
    }

    fn weighted_score(&self, trajectories: &[[u32; 2]], weights: &[f64]) -> Result<Vec<f64>, OracleError> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, true);
        let mut rows = Vec::with_capacity(2 * trajectories.len());
        for t in trajectories {
            rows.push(tape.embedding(p[0], &[0])?);
            rows.push(tape.embedding(p[1], &[t[0] as usize])?);
        }
        let logits = tape.concat(&rows, Axis::Rows)?;
        let lp = tape.log_softmax(logits);
        let seqs: Vec<&[u32]> = trajectories.iter().map(|t| t.as_slice()).collect();
        let w = sequence_weights(&seqs, weights, MDP_TOKENS);
        let loss = tape.weighted_sum(lp, &w)?;
        Ok(flatten(&self.store, &tape.backward(loss)?))
    }

    /// One estimate from `k` peer trajectories.
    pub fn estimate<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<MdpEstimate, OracleError> {
        let trajectories: Vec<[u32; 2]> = (0..k).map(|_| self.sample(rng)).collect();
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| self.reward[t[0] as usize][t[1] as usize])
            .collect();
        let record = AdvantageRecord::new(rewards)?;
        Ok(MdpEstimate {
            estimator: self.weighted_score(&trajectories, &record.advantages)?,
            baseline_term: self.weighted_score(&trajectories, &record.baselines())?,
        })
    }
}

fn flatten(store: &ParamStore, grads: &Gradients) -> Vec<f64> {
    (0..store.len())
        .flat_map(|i| {
            grads
                .get(store.key(i))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.tensor(i).len()])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessResult {
    pub exact: Vec<f64>,
    pub estimator: Moments,
    pub baseline_term: Moments,
}

impl UnbiasednessResult {
    /// Worst per-coordinate deviation of the estimator mean from the exact
    /// gradient, in standard errors.
    pub fn estimator_z(&self) -> f64 {
        max_z(self.estimator.mean(), &self.exact, &self.estimator.std_error())
    }

    /// Worst per-coordinate deviation of the baseline-term mean from zero.
    pub fn baseline_z(&self) -> f64 {
        let zero = vec![0.0; self.exact.len()];
        max_z(self.baseline_term.mean(), &zero, &self.baseline_term.std_error())
    }
}

pub fn mdp_unbiasedness(k: usize, draws: usize, seed: u64) -> Result<UnbiasednessResult, OracleError> {
    let mdp = MicroMdp::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = Moments::new(mdp.dim());
    let mut base = Moments::new(mdp.dim());
    for _ in 0..draws {
        let e = mdp.estimate(k, &mut rng)?;
        est.push(&e.estimator);
        base.push(&e.baseline_term);
    }
    Ok(UnbiasednessResult {
        exact: mdp.exact_gradient(),
        estimator: est,
        baseline_term: base,
    })
}

/// Coordinate-averaged estimator variance and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceAtK {
    pub k: usize,
    pub variance: f64,
    pub std_error: f64,
}

pub fn mdp_variance(k: usize, draws: usize, seed: u64) -> Result<VarianceAtK, OracleError> {
    let mdp = MicroMdp::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<f64>> = (0..draws)
        .map(|_| Ok(mdp.estimate(k, &mut rng)?.estimator))
        .collect::<Result<_, OracleError>>()?;
    let dim = mdp.dim();
    let mut mean = vec![0.0; dim];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / draws as f64;
        }
    }
    // per-draw coordinate-averaged squared deviation
    let q: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>() / dim as f64)
        .collect();
    let n = draws as f64;
    let qbar = q.iter().sum::<f64>() / n;
    let qvar = q.iter().map(|v| (v - qbar) * (v - qbar)).sum::<f64>() / (n - 1.0);
    Ok(VarianceAtK {
        k,
        variance: qbar * n / (n - 1.0),
        std_error: (qvar / n).sqrt() * n / (n - 1.0),
    })
}

// ---------------------------------------------------------------------------
// Encoder toy: two parameters, Gaussian policy on a 2-wide code, sign bits,
// one noiseless receiver whose greedy output is a lookup on the bits.

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderToy {
    pub store: ParamStore,
    pub sigma: f64,
    /// Reward of each bit pattern, indexed by `2·b₀ + b₁`.
    pub reward: [f64; 4],
}

impl EncoderToy {
    pub fn standard() -> Self {
        let mut store = ParamStore::new(0);
        store.add("theta", Tensor::row(vec![0.1, -0.2]));
        Self {
            store,
            sigma: 0.2,
            reward: [0.1, 0.6, 0.3, 1.0],
        }
    }

    /// `μ = 2·softmax([θ₁, θ₂, 0])[..2] − 0.6`.
    pub fn mean_on_tape(tape: &mut Tape, theta: Var) -> Result<Var, OracleError> {
        let zero = tape.constant(Tensor::row(vec![0.0]));
        let logits = tape.concat(&[theta, zero], Axis::Cols)?;
        let probs = tape.softmax(logits);
        let head = tape.slice(probs, Axis::Cols, 0, 2)?;
        let scaled = tape.scale(head, 2.0);
        let shift = tape.constant(Tensor::row(vec![-0.6, -0.6]));
        Ok(tape.add(scaled, shift)?)
    }

    pub fn mean(store: &ParamStore) -> Tensor {
        let mut tape = Tape::new();
        let theta = store.leaf(&mut tape, 0, false);
        let mu = Self::mean_on_tape(&mut tape, theta).expect("fixed shapes");
        tape.value(mu).clone()
    }

    pub fn reward_of(&self, noisy: &[f64]) -> f64 {
        let b0 = usize::from(noisy[0] > 0.0);
        let b1 = usize::from(noisy[1] > 0.0);
        self.reward[2 * b0 + b1]
    }

    /// One self-critical estimate from `k` policy samples.
    pub fn estimate<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<f64>, OracleError> {
        let mut tape = Tape::new();
        let theta = self.store.leaf(&mut tape, 0, true);
        let mu = Self::mean_on_tape(&mut tape, theta)?;
        let mean = tape.value(mu).clone();
        let samples = sample_encoder_policy(&mean, self.sigma, k, rng)?;
        let rewards = samples.iter().map(|s| self.reward_of(s.noisy.data())).collect();
        let weights = encoder_sample_weights(&[AdvantageRecord::new(rewards)?]);
        let pairs: Vec<(&Tensor, f64)> = samples.iter().map(|s| &s.noisy).zip(weights).collect();
        let seed = score_seed(&mean, &pairs, self.sigma)?;
        let loss = tape.weighted_sum(mu, &seed)?;
        Ok(flatten(&self.store, &tape.backward(loss)?))
    }

    /// Central difference of the sampled expected reward, reusing the same
    /// `draws` standard-normal pairs at `θ ± h·e_j`. Returns the gradient and
    /// its standard errors.
    pub fn crn_finite_difference(&self, h: f64, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<[f64; 2]> = (0..draws)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let mut grad = Vec::new();
        let mut se = Vec::new();
        for j in 0..2 {
            let at = |delta: f64| {
                let mut s = self.store.clone();
                s.tensor_mut(0).data_mut()[j] += delta;
                Self::mean(&s)
            };
            let (up, down) = (at(h), at(-h));
            let mut m = Moments::new(1);
            for e in &eps {
                let x = |mu: &Tensor| [mu.data()[0] + self.sigma * e[0], mu.data()[1] + self.sigma * e[1]];
                let d = (self.reward_of(&x(&up)) - self.reward_of(&x(&down))) / (2.0 * h);
                m.push(&[d]);
            }
            grad.push(m.mean()[0]);
            se.push(m.std_error()[0]);
        }
        (grad, se)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOracleResult {
    pub estimator: Moments,
    pub finite_difference: Vec<f64>,
    pub finite_difference_se: Vec<f64>,
}

impl EncoderOracleResult {
    /// Worst deviation in combined standard errors of both estimates.
    pub fn z(&self) -> f64 {
        let se: Vec<f64> = self
            .estimator
            .std_error()
            .iter()
            .zip(&self.finite_difference_se)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect();
        max_z(self.estimator.mean(), &self.finite_difference, &se)
    }
}

pub fn encoder_oracle(k: usize, draws: usize, h: f64, seed: u64) -> Result<EncoderOracleResult, OracleError> {
    let toy = EncoderToy::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = Moments::new(2);
    for _ in 0..draws {
        est.push(&toy.estimate(k, &mut rng)?);
    }
    let (fd, fd_se) = toy.crn_finite_difference(h, draws, seed ^ 0x5eed);
    Ok(EncoderOracleResult {
        estimator: est,
        finite_difference: fd,
        finite_difference_se: fd_se,
    })
}
