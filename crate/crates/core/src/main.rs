use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semlink::harness::{
    compare_rx_counts, ingest_corpus, run_experiment, sweep_snr, write_plots, ExperimentConfig, CHECKPOINT_FILE,
    REPORT_FILE,
};
use semlink::oracles::{component_gradchecks, encoder_oracle, mdp_unbiasedness, mdp_variance};

#[derive(Parser)]
#[command(name = "semlink", version, about = "Broadcast semantic text transmission experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Tokenize and split the configured corpus, writing vocab.txt, train.txt and test.txt.
    Ingest(Common),
    /// Pre-train, run alternate learning, then evaluate over the SNR grid.
    Train(Common),
    /// Evaluate a saved checkpoint over an SNR grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated SNR values in dB, ascending.
        #[arg(long, value_delimiter = ',')]
        snr_grid: Option<Vec<f64>>,
    },
    /// Train one experiment per receiver count and summarize.
    CompareRx {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
        counts: Vec<usize>,
    },
    /// Run the gradient, micro-MDP and finite-difference oracles.
    OracleTests {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let text: String = lines.map(|l| l + "\n").collect();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(cfg: &ExperimentConfig) -> Result<()> {
    let data = ingest_corpus(&cfg.corpus, cfg.seed)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_lines(&dir.join("vocab.txt"), data.vocabulary.tokens().iter().cloned())?;
    for (name, split) in [("train.txt", &data.train), ("test.txt", &data.test)] {
        write_lines(&dir.join(name), split.iter().map(|s| data.vocabulary.decode_ids(s.ids())))?;
    }
    println!(
        "vocabulary {} tokens, {} train / {} test sentences, {} excluded by length; written to {}",
        data.vocabulary.len(),
        data.train.len(),
        data.test.len(),
        data.excluded,
        dir.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = run_experiment(cfg)?;
    let cycles = outcome.trainer.cycle_log();
    if let (Some(first), Some(last)) = (cycles.first(), cycles.last()) {
        println!(
            "{} cycles, mean reward {:.4} -> {:.4}",
            cycles.len(),
            first.mean_reward(),
            last.mean_reward()
        );
    }
    print_report_summary(&outcome.report);
    println!("outputs in {}", outcome.out_dir.display());
    Ok(())
}

fn print_report_summary(report: &semlink::harness::EvaluationReport) {
    println!("receiver  BLEU-1  BLEU-2  BLEU-3  BLEU-4  WAR     (averaged over SNR)");
    for n in 0..report.receivers() {
        let a = report.averaged(n);
        println!(
            "RX{:<7} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            n + 1,
            a[0],
            a[1],
            a[2],
            a[3],
            a[4]
        );
    }
}

fn sweep(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>, grid: Option<Vec<f64>>) -> Result<()> {
    let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let grid = grid.unwrap_or_else(|| cfg.eval.snr_grid.clone());
    let report = sweep_snr(cfg, &checkpoint, &grid).with_context(|| format!("sweeping {}", checkpoint.display()))?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    report.write_csv(&cfg.out_dir.join(REPORT_FILE))?;
    write_plots(&report, &cfg.out_dir.join("plots"))?;
    print_report_summary(&report);
    println!("{} rows written to {}", report.rows.len(), cfg.out_dir.join(REPORT_FILE).display());
    Ok(())
}

fn compare(cfg: &ExperimentConfig, counts: &[usize]) -> Result<()> {
    let rows = compare_rx_counts(cfg, counts)?;
    println!("RXs  BLEU-1  BLEU-2  BLEU-3  BLEU-4  WAR");
    for r in &rows {
        println!(
            "{:<4} {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            r.receivers, r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.war
        );
    }
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn oracle_tests(seed: u64, draws: usize, k: usize) -> Result<()> {
    let mut failures = 0;
    let mut report = |pass: bool, line: String| {
        println!("{} {line}", verdict(pass));
        failures += usize::from(!pass);
    };

    for c in component_gradchecks(250, seed)? {
        let pass = c.report.max_rel_error < 1e-4;
        report(
            pass,
            format!(
                "gradcheck {}: {} coords, max rel error {:.2e}",
                c.component, c.report.checked, c.report.max_rel_error
            ),
        );
    }

    let mdp = mdp_unbiasedness(k, draws, seed)?;
    report(
        mdp.estimator_z() <= 3.0,
        format!("decoder estimator vs enumeration: max z {:.2}", mdp.estimator_z()),
    );
    report(
        mdp.baseline_z() <= 3.0,
        format!("peer baseline term has zero mean: max z {:.2}", mdp.baseline_z()),
    );

    let enc = encoder_oracle(k, draws, 0.01, seed)?;
    report(
        enc.z() <= 3.0,
        format!("encoder estimator vs finite difference: max z {:.2}", enc.z()),
    );

    let var_draws = (draws / 10).max(100);
    let v2 = mdp_variance(2, var_draws, seed)?;
    let v10 = mdp_variance(10, var_draws, seed)?;
    report(
        v10.variance <= 0.8 * v2.variance,
        format!("estimator variance K=2 {:.3e}, K=10 {:.3e}", v2.variance, v10.variance),
    );

    if failures > 0 {
        bail!("{failures} oracle check(s) failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().verb {
        Verb::Ingest(c) => ingest(&c.resolve()?),
        Verb::Train(c) => train(&c.resolve()?),
        Verb::Sweep {
            common,
            checkpoint,
            snr_grid,
        } => sweep(&common.resolve()?, checkpoint, snr_grid),
        Verb::CompareRx { common, counts } => compare(&common.resolve()?, &counts),
        Verb::OracleTests { seed, draws, k } => oracle_tests(seed, draws, k),
    }
}
