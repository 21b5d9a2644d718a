//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Built with `harness = false`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semlink::channel::{modulate, sample_rayleigh_gain, transmit_awgn};
use semlink::diffcore::Tensor;
use semlink::harness::{run_experiment, spearman, trainer_for, ExperimentConfig, ExperimentOutcome};
use semlink::oracles::{component_gradchecks, encoder_oracle, mdp_unbiasedness, mdp_variance};
use semlink::reward::{bleu_ngram_precision, brevity_penalty, combined_bleu};
use semlink::trainer::AdvantageRecord;

// criterion 1
const GRADCHECK_COORDS: usize = 250;
const GRADCHECK_MIN_COORDS: usize = 200;
const GRADCHECK_REL_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
// criteria 2, 3, 5
const ESTIMATOR_DRAWS: usize = 100_000;
const ESTIMATOR_K: usize = 5;
const Z_LIMIT: f64 = 3.0;
const FD_STEP: f64 = 0.01;
const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const VARIANCE_DRAWS: usize = 10_000;
const VARIANCE_REDUCTION: f64 = 0.8;
const VARIANCE_SE_SLACK: f64 = 2.0;
// criterion 4
const ADVANTAGE_RECORDS: usize = 10_000;
const ZERO_SUM_TOL: f64 = 1e-9;
// criterion 6
const CHANNEL_SAMPLES: usize = 1_000_000;
const CHANNEL_REL_TOL: f64 = 0.02;
// criterion 7
const BLEU_PAIRS: usize = 500;
const SELF_BLEU_SENTENCES: usize = 100;
// criteria 8-10
const T1_CONFIG: &str = "configs/t1.toml";
const T1_EVAL_SNR: f64 = 20.0;
const T1_MIN_BLEU1: f64 = 0.90;
const T1_MIN_WAR: f64 = 0.90;
const MOVING_AVERAGE: usize = 10;
const T1_BUDGET: Duration = Duration::from_secs(30 * 60);
const PROBE_SEED: u64 = 0xacce97;
const MIN_SPEARMAN: f64 = 0.8;

struct Gate {
    results: Vec<(u32, bool)>,
}

impl Gate {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id:>2}] {name}: {detail}");
        self.results.push((id, pass));
    }
}

fn gradient_correctness(gate: &mut Gate) {
    let start = Instant::now();
    let checks = component_gradchecks(GRADCHECK_COORDS, 17).expect("gradient checks run");
    let took = start.elapsed();
    let mut pass = took < GRADCHECK_BUDGET;
    let mut parts = Vec::new();
    for c in &checks {
        pass &= c.report.checked >= GRADCHECK_MIN_COORDS && c.report.max_rel_error < GRADCHECK_REL_TOL;
        parts.push(format!("{} {} coords max rel {:.2e}", c.component, c.report.checked, c.report.max_rel_error));
    }
    pass &= checks.len() == 4;
    gate.record(1, "gradient correctness", pass, format!("{}; {:.1?}", parts.join(", "), took));
}

fn decoder_estimator(gate: &mut Gate) {
    let start = Instant::now();
    let r = mdp_unbiasedness(ESTIMATOR_K, ESTIMATOR_DRAWS, 21).expect("micro-MDP runs");
    let took = start.elapsed();
    let (ez, bz) = (r.estimator_z(), r.baseline_z());
    gate.record(
        2,
        "decoder estimator vs enumerated gradient",
        ez <= Z_LIMIT && bz <= Z_LIMIT && took < ORACLE_BUDGET,
        format!("{ESTIMATOR_DRAWS} draws, K={ESTIMATOR_K}: estimator max z {ez:.2}, baseline term max z {bz:.2}; {took:.1?}"),
    );
}

fn encoder_estimator(gate: &mut Gate) {
    let start = Instant::now();
    let r = encoder_oracle(ESTIMATOR_K, ESTIMATOR_DRAWS, FD_STEP, 33).expect("encoder toy runs");
    let took = start.elapsed();
    let z = r.z();
    gate.record(
        3,
        "encoder estimator vs common-random-number difference",
        z <= Z_LIMIT && took < ORACLE_BUDGET,
        format!(
            "estimate {:?} vs difference {:?}, max z {z:.2}; {took:.1?}",
            r.estimator.mean().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            r.finite_difference.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    );
}

fn advantage_identity(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..ADVANTAGE_RECORDS {
        let k = rng.random_range(2..=16);
        let levels = rng.random_range(1..=k);
        let pool: Vec<f64> = (0..levels).map(|_| rng.random::<f64>()).collect();
        let rewards: Vec<f64> = (0..k).map(|_| pool[rng.random_range(0..levels)]).collect();
        let rec = AdvantageRecord::new(rewards).expect("k >= 2");
        worst = worst.max(rec.advantages.iter().sum::<f64>().abs());
    }
    gate.record(
        4,
        "leave-one-out advantages sum to zero",
        worst <= ZERO_SUM_TOL,
        format!("{ADVANTAGE_RECORDS} records, max |sum| {worst:.2e}"),
    );
}

fn variance_in_k(gate: &mut Gate) {
    let start = Instant::now();
    let v: Vec<_> = [2, 5, 10]
        .iter()
        .map(|&k| mdp_variance(k, VARIANCE_DRAWS, 40 + k as u64).expect("micro-MDP runs"))
        .collect();
    let took = start.elapsed();
    let reduced = v[2].variance <= VARIANCE_REDUCTION * v[0].variance;
    let monotone = v.windows(2).all(|w| {
        let slack = VARIANCE_SE_SLACK * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].variance <= w[0].variance + slack
    });
    gate.record(
        5,
        "estimator variance falls with K",
        reduced && monotone && took < ORACLE_BUDGET,
        format!(
            "mean per-coordinate variance K=2 {:.3e}, K=5 {:.3e}, K=10 {:.3e} (ratio {:.3}); {took:.1?}",
            v[0].variance,
            v[1].variance,
            v[2].variance,
            v[2].variance / v[0].variance
        ),
    );
}

fn channel_statistics(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let side = 1000;
    let bits = Tensor::from_vec(
        side,
        side,
        (0..side * side).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect(),
    );
    let clean = modulate(&bits).expect("binary frame");
    let mut pass = true;
    let mut parts = Vec::new();
    for snr in [0.0, 10.0, 20.0] {
        let y = transmit_awgn(&clean, snr, &mut rng);
        let noise: Vec<f64> = y.values.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var = noise.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (noise.len() - 1) as f64;
        let target = 10f64.powf(-snr / 10.0);
        let rel = (var / target - 1.0).abs();
        pass &= rel <= CHANNEL_REL_TOL;
        parts.push(format!("{snr} dB var {var:.5} vs {target:.5}"));
    }
    let power = (0..CHANNEL_SAMPLES)
        .map(|_| sample_rayleigh_gain(&mut rng).powi(2))
        .sum::<f64>()
        / CHANNEL_SAMPLES as f64;
    pass &= (power - 1.0).abs() <= CHANNEL_REL_TOL;
    gate.record(
        6,
        "channel statistics",
        pass,
        format!("{}; Rayleigh E|h|^2 {power:.4}", parts.join(", ")),
    );
}

/// Clipped n-gram matches and candidate n-gram count by exhaustive scanning.
fn brute_clipped(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    if candidate.len() < n {
        return (0, 0);
    }
    let grams = |s: &[u32]| -> Vec<Vec<u32>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let c = grams(candidate);
    let r = grams(reference);
    let mut distinct = c.clone();
    distinct.sort();
    distinct.dedup();
    let matched = distinct
        .iter()
        .map(|g| {
            let in_c = c.iter().filter(|x| *x == g).count();
            let in_r = r.iter().filter(|x| *x == g).count();
            in_c.min(in_r)
        })
        .sum();
    (matched, c.len())
}

fn brute_combined(candidate: &[u32], reference: &[u32]) -> f64 {
    let (c, r) = (candidate.len(), reference.len());
    let bp = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    if bp == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, t) = brute_clipped(candidate, reference, n);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if t == 0 && r < n {
            1.0
        } else {
            1.0 / (2.0 * t.max(1) as f64)
        };
        log_sum += 0.25 * p.ln();
    }
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

fn bleu_oracle(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sentence = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<u32> {
        let len = rng.random_range(lo..=12);
        (0..len).map(|_| rng.random_range(4..10)).collect()
    };
    let mut mismatches = 0;
    for _ in 0..BLEU_PAIRS {
        let cand = sentence(&mut rng, 0);
        let refr = sentence(&mut rng, 1);
        for n in 1..=4 {
            let (m, t) = brute_clipped(&cand, &refr, n);
            let expect = if t == 0 { 0.0 } else { m as f64 / t as f64 };
            if bleu_ngram_precision(&cand, &refr, n).unwrap() != expect {
                mismatches += 1;
            }
        }
        if brevity_penalty(cand.len(), refr.len()) != brute_combined_bp(cand.len(), refr.len()) {
            mismatches += 1;
        }
        if combined_bleu(&cand, &refr) != brute_combined(&cand, &refr) {
            mismatches += 1;
        }
    }
    let mut self_fail = 0;
    for _ in 0..SELF_BLEU_SENTENCES {
        let s = sentence(&mut rng, 1);
        if combined_bleu(&s, &s) != 1.0 {
            self_fail += 1;
        }
    }
    gate.record(
        7,
        "BLEU against brute-force counter",
        mismatches == 0 && self_fail == 0,
        format!("{BLEU_PAIRS} pairs, {mismatches} mismatches; self-BLEU != 1 on {self_fail} of {SELF_BLEU_SENTENCES}"),
    );
}

fn brute_combined_bp(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn t1_config(dir: &std::path::Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(T1_CONFIG);
    let mut cfg = ExperimentConfig::load(&path).expect("T1 config loads");
    cfg.out_dir = dir.to_path_buf();
    cfg
}

/// Trailing `MOVING_AVERAGE`-cycle means at every cycle of the final third.
fn final_third_moving_average(rewards: &[f64]) -> Vec<f64> {
    let start = (rewards.len() - rewards.len() / 3).max(MOVING_AVERAGE - 1);
    (start..rewards.len())
        .map(|t| rewards[t + 1 - MOVING_AVERAGE..=t].iter().sum::<f64>() / MOVING_AVERAGE as f64)
        .collect()
}

fn toy_convergence(gate: &mut Gate, out: &ExperimentOutcome, took: Duration) {
    let mut pass = took < T1_BUDGET;
    let mut parts = Vec::new();
    for n in 0..out.config.receivers.len() {
        match out.report.cell(n, T1_EVAL_SNR) {
            Some(row) => {
                pass &= row.bleu1 >= T1_MIN_BLEU1 && row.war >= T1_MIN_WAR;
                parts.push(format!("RX{} BLEU-1 {:.4} WAR {:.4}", n + 1, row.bleu1, row.war));
            }
            None => pass = false,
        }
    }
    let rewards: Vec<f64> = out.trainer.cycle_log().iter().map(|c| c.mean_reward()).collect();
    let ma = final_third_moving_average(&rewards);
    let monotone = !ma.is_empty() && ma.windows(2).all(|w| w[1] >= w[0]);
    pass &= monotone;
    gate.record(
        8,
        "toy run T1 converges",
        pass,
        format!(
            "at {T1_EVAL_SNR} dB on the training split: {}; {}-cycle moving average over the last {} of {} cycles {} ({:.4} -> {:.4}); {took:.1?}",
            parts.join(", "),
            MOVING_AVERAGE,
            ma.len(),
            rewards.len(),
            if monotone { "non-decreasing" } else { "decreases" },
            ma.first().copied().unwrap_or(f64::NAN),
            ma.last().copied().unwrap_or(f64::NAN),
        ),
    );
}

fn schedule_sensitivity(gate: &mut Gate, out: &ExperimentOutcome) {
    let mut fast = out.config.clone();
    fast.train.kappa = 1;
    let mut trainer = trainer_for(&fast, &out.dataset).expect("kappa=1 trainer");
    trainer.resume(&out.pretrained).expect("pretrained checkpoint fits");
    let run = trainer.run_alternate_schedule(&out.dataset.train);
    let decoder_steps = |t: &semlink::trainer::Trainer| {
        t.steps()
            .iter()
            .filter(|s| matches!(s, semlink::trainer::StepKind::Decoder(_)))
            .count()
    };
    let rl_steps_t1 = decoder_steps(&out.trainer);
    let rl_steps_fast = decoder_steps(&trainer);
    let slow_reward = out
        .trainer
        .probe_encoder_reward(&out.dataset.train, PROBE_SEED)
        .expect("probe runs");
    let fast_reward = trainer.probe_encoder_reward(&out.dataset.train, PROBE_SEED).expect("probe runs");
    gate.record(
        9,
        "schedule sensitivity, kappa=1 vs kappa=50",
        run.is_ok() && rl_steps_t1 == rl_steps_fast && fast_reward < slow_reward,
        format!(
            "encoder-phase mean reward kappa=1 {fast_reward:.4} vs kappa={} {slow_reward:.4}; decoder steps {rl_steps_fast} vs {rl_steps_t1}{}",
            out.config.train.kappa,
            run.err().map(|e| format!("; kappa=1 run failed: {e}")).unwrap_or_default()
        ),
    );
}

fn snr_trend(gate: &mut Gate, out: &ExperimentOutcome) {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in 0..out.config.receivers.len() {
        let rows = out.report.receiver_rows(n);
        let snr: Vec<f64> = rows.iter().map(|r| r.snr_db).collect();
        let b1: Vec<f64> = rows.iter().map(|r| r.bleu1).collect();
        let rho = spearman(&snr, &b1);
        pass &= rho.is_some_and(|r| r >= MIN_SPEARMAN);
        parts.push(format!("RX{} rho {}", n + 1, rho.map_or("undefined".into(), |r| format!("{r:.3}"))));
    }
    pass &= out.report.is_complete(out.config.receivers.len(), &out.config.eval.snr_grid);
    gate.record(10, "BLEU-1 rises with SNR", pass, parts.join(", "));
}

fn main() {
    let mut gate = Gate { results: Vec::new() };
    gradient_correctness(&mut gate);
    decoder_estimator(&mut gate);
    encoder_estimator(&mut gate);
    advantage_identity(&mut gate);
    variance_in_k(&mut gate);
    channel_statistics(&mut gate);
    bleu_oracle(&mut gate);

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    match run_experiment(&t1_config(dir.path())) {
        Ok(out) => {
            let took = start.elapsed();
            toy_convergence(&mut gate, &out, took);
            schedule_sensitivity(&mut gate, &out);
            snr_trend(&mut gate, &out);
        }
        Err(e) => {
            for (id, name) in [(8, "toy run T1 converges"), (9, "schedule sensitivity"), (10, "BLEU-1 rises with SNR")] {
                gate.record(id, name, false, format!("T1 run failed: {e}"));
            }
        }
    }

    let failed: Vec<u32> = gate.results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        gate.results.len() - failed.len(),
        gate.results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
