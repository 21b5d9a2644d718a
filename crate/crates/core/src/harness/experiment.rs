use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{validate_grid, EvalSplit, ExperimentConfig};
use super::corpus::{ingest_corpus, Dataset};
use super::report::{training_log_rows, write_plots, write_rows, EvaluationReport, ReportRow, RunMetadata};
use super::HarnessError;
use crate::channel::{self, ChannelConfig};
use crate::codec::{decode_greedy, Checkpoint, Receiver, Sentence, Transmitter, Vocabulary};
use crate::reward::{MetricRegistry, SimilarityMetric};
use crate::trainer::{receiver_input, ScoreSums, TrainError, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.csv";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config_resolved.txt";

/// Greedy-decoding scores of every receiver at every grid SNR, averaged over
/// `realizations` channel draws per sentence.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    tx: &Transmitter,
    receivers: &[Receiver],
    channels: &[ChannelConfig],
    sentences: &[Sentence],
    grid: &[f64],
    realizations: usize,
    metric: &dyn SimilarityMetric,
    seed: u64,
) -> Result<Vec<ReportRow>, HarnessError> {
    validate_grid(grid)?;
    if receivers.len() != channels.len() {
        return Err(HarnessError::Config(format!(
            "{} receivers but {} channel configs",
            receivers.len(),
            channels.len()
        )));
    }
    let csi = tx.config().csi;
    let symbols = sentences
        .iter()
        .map(|s| {
            let bits = tx.quantize(&tx.encode(&s.with_eos())?)?;
            Ok(channel::modulate(&bits)?)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut rows = Vec::with_capacity(receivers.len() * grid.len());
    for (n, (rx, ch)) in receivers.iter().zip(channels).enumerate() {
        for (g, &snr) in grid.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((n as u64) << 32) | g as u64);
            let fixed = ch.at_snr(snr);
            let mut sums = ScoreSums::default();
            for (s, sym) in sentences.iter().zip(&symbols) {
                for _ in 0..realizations {
                    let frame = channel::transmit(sym, &fixed, &mut rng);
                    let memory = rx.dequantize(&receiver_input(&frame, csi))?;
                    let out = decode_greedy(rx, &memory, rx.config().max_steps())?;
                    sums.add(out.content(), s.ids(), metric.score(out.content(), s.ids()));
                }
            }
            rows.push(ReportRow::from_scores(n, snr, &sums));
        }
    }
    Ok(rows)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn metadata(config: &ExperimentConfig) -> RunMetadata {
    RunMetadata {
        seed: config.seed,
        config_hash: config.hash(),
        version: concat!("semlink ", env!("CARGO_PKG_VERSION")).to_string(),
    }
}

fn eval_sentences<'a>(config: &ExperimentConfig, data: &'a Dataset) -> &'a [Sentence] {
    match config.eval.split {
        EvalSplit::Train => &data.train,
        EvalSplit::Test => &data.test,
    }
}

/// Everything a finished run produced.
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub trainer: Trainer,
    /// Transmitter and receivers right after pre-training.
    pub pretrained: Checkpoint,
    pub report: EvaluationReport,
    pub out_dir: PathBuf,
}

/// Builds a trainer for `config` on `data`.
pub fn trainer_for(config: &ExperimentConfig, data: &Dataset) -> Result<Trainer, HarnessError> {
    let model = config.model.model_config(data.vocabulary.len(), data.max_len);
    let mut train = config.train.clone();
    train.seed = config.seed;
    Ok(Trainer::new(&model, train, config.receivers.clone(), &MetricRegistry::default())?)
}

fn write_training_log(trainer: &Trainer, dir: &Path) -> Result<(), HarnessError> {
    write_rows(
        &dir.join(TRAINING_LOG_FILE),
        &training_log_rows(trainer.pretrain_log(), trainer.cycle_log()),
    )
}

/// Pre-training, alternate learning, checkpoint and grid evaluation. Outputs
/// go under `config.out_dir`. A divergence abort still writes the training log.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved, config.resolved()).map_err(|e| io_err(&resolved, e))?;

    let data = ingest_corpus(&config.corpus, config.seed)?;
    let mut trainer = trainer_for(config, &data)?;
    let meta = serde_json::json!({ "seed": config.seed, "config_hash": config.hash() });
    let step = trainer.pretrain(&data.train);
    if let Err(e) = step {
        write_training_log(&trainer, &dir)?;
        return Err(e.into());
    }
    let pretrained = trainer.checkpoint(&data.vocabulary, meta.clone());
    let step = trainer.run_alternate_schedule(&data.train);
    write_training_log(&trainer, &dir)?;
    step?;

    let checkpoint = trainer.checkpoint(&data.vocabulary, meta);
    checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let metric = MetricRegistry::default().get(&config.train.metric)?;
    let rows = evaluate(
        trainer.transmitter(),
        trainer.receivers(),
        &config.receivers,
        eval_sentences(config, &data),
        &config.eval.snr_grid,
        config.eval.realizations,
        metric.as_ref(),
        config.seed,
    )?;
    let report = EvaluationReport {
        rows,
        metadata: metadata(config),
    };
    report.write_csv(&dir.join(REPORT_FILE))?;
    write_plots(&report, &dir.join("plots"))?;
    Ok(ExperimentOutcome {
        config: config.clone(),
        dataset: data,
        trainer,
        pretrained,
        report,
        out_dir: dir,
    })
}

/// Evaluates a saved checkpoint over `grid` on the corpus of `config`.
pub fn sweep_snr(config: &ExperimentConfig, checkpoint: &Path, grid: &[f64]) -> Result<EvaluationReport, HarnessError> {
    validate_grid(grid)?;
    let data = ingest_corpus(&config.corpus, config.seed)?;
    sweep_loaded(config, &data.vocabulary, eval_sentences(config, &data), checkpoint, grid)
}

pub fn sweep_loaded(
    config: &ExperimentConfig,
    vocabulary: &Vocabulary,
    sentences: &[Sentence],
    checkpoint: &Path,
    grid: &[f64],
) -> Result<EvaluationReport, HarnessError> {
    validate_grid(grid)?;
    let ckpt = Checkpoint::load(checkpoint, vocabulary)?;
    if ckpt.receivers.len() != config.receivers.len() {
        return Err(HarnessError::Config(format!(
            "checkpoint has {} receivers, config has {}",
            ckpt.receivers.len(),
            config.receivers.len()
        )));
    }
    let metric = MetricRegistry::default().get(&config.train.metric)?;
    let rows = evaluate(
        &ckpt.transmitter,
        &ckpt.receivers,
        &config.receivers,
        sentences,
        grid,
        config.eval.realizations,
        metric.as_ref(),
        config.seed,
    )?;
    Ok(EvaluationReport {
        rows,
        metadata: metadata(config),
    })
}

/// One row of the receiver-count comparison: SNR-averaged metrics, then
/// averaged over receivers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub receivers: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub war: f64,
}

pub fn scaling_row(report: &EvaluationReport) -> ScalingRow {
    let n = report.receivers();
    let mut acc = [0.0; 5];
    for r in 0..n {
        let avg = report.averaged(r);
        for (a, v) in acc.iter_mut().zip(avg) {
            *a += v / n as f64;
        }
    }
    ScalingRow {
        receivers: n,
        bleu1: acc[0],
        bleu2: acc[1],
        bleu3: acc[2],
        bleu4: acc[3],
        war: acc[4],
    }
}

/// Trains one experiment per receiver count with the shared seed and corpus;
/// each run writes under `<out_dir>/rx<n>` and the table goes to
/// `<out_dir>/compare_rx.csv`.
pub fn compare_rx_counts(base: &ExperimentConfig, counts: &[usize]) -> Result<Vec<ScalingRow>, HarnessError> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(HarnessError::Config(format!("receiver counts must be positive: {counts:?}")));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut cfg = base.with_receiver_count(n);
        cfg.out_dir = base.out_dir.join(format!("rx{n}"));
        let outcome = run_experiment(&cfg)?;
        rows.push(scaling_row(&outcome.report));
    }
    std::fs::create_dir_all(&base.out_dir).map_err(|e| io_err(&base.out_dir, e))?;
    write_rows(&base.out_dir.join("compare_rx.csv"), &rows)?;
    Ok(rows)
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Train(e)
    }
}
