use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::HarnessError;
use crate::trainer::{CycleRecord, PretrainRecord, ScoreSums};

/// One (receiver, SNR) cell of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub receiver: usize,
    pub snr_db: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub war: f64,
    pub mean_reward: f64,
}

impl ReportRow {
    pub fn from_scores(receiver: usize, snr_db: f64, s: &ScoreSums) -> Self {
        Self {
            receiver,
            snr_db,
            bleu1: s.mean_bleu(1),
            bleu2: s.mean_bleu(2),
            bleu3: s.mean_bleu(3),
            bleu4: s.mean_bleu(4),
            war: s.mean_war(),
            mean_reward: s.mean_reward(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "bleu1" => self.bleu1,
            "bleu2" => self.bleu2,
            "bleu3" => self.bleu3,
            "bleu4" => self.bleu4,
            "war" => self.war,
            "mean_reward" => self.mean_reward,
            _ => return None,
        })
    }
}

pub const REPORT_METRICS: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "war", "mean_reward"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub metadata: RunMetadata,
}

impl EvaluationReport {
    pub fn receivers(&self) -> usize {
        self.rows.iter().map(|r| r.receiver + 1).max().unwrap_or(0)
    }

    pub fn receiver_rows(&self, receiver: usize) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.receiver == receiver).collect()
    }

    pub fn cell(&self, receiver: usize, snr_db: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.receiver == receiver && r.snr_db == snr_db)
    }

    /// Every receiver has one row per grid point and every metric is in [0, 1].
    pub fn is_complete(&self, receivers: usize, grid: &[f64]) -> bool {
        self.rows.len() == receivers * grid.len()
            && (0..receivers).all(|n| grid.iter().all(|&s| self.cell(n, s).is_some()))
            && self
                .rows
                .iter()
                .all(|r| REPORT_METRICS.iter().all(|m| (0.0..=1.0).contains(&r.metric(m).unwrap())))
    }

    /// SNR-averaged metrics of one receiver, in `REPORT_METRICS` order.
    pub fn averaged(&self, receiver: usize) -> [f64; 6] {
        let rows = self.receiver_rows(receiver);
        let mut out = [0.0; 6];
        for (i, m) in REPORT_METRICS.iter().enumerate() {
            out[i] = rows.iter().map(|r| r.metric(m).unwrap()).sum::<f64>() / rows.len().max(1) as f64;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        write_rows(path, &self.rows)
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

/// One line of `training_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub cycle: Option<usize>,
    pub receiver: Option<usize>,
    pub mean_reward: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub bleu4: Option<f64>,
    pub war: Option<f64>,
    pub loss: Option<f64>,
    pub wall_time_s: f64,
}

fn score_row(
    phase: &'static str,
    c: &CycleRecord,
    receiver: usize,
    s: &ScoreSums,
    loss: Option<f64>,
) -> LogRow {
    LogRow {
        phase,
        epoch: c.epoch,
        cycle: Some(c.cycle),
        receiver: Some(receiver),
        mean_reward: Some(s.mean_reward()),
        bleu1: Some(s.mean_bleu(1)),
        bleu2: Some(s.mean_bleu(2)),
        bleu3: Some(s.mean_bleu(3)),
        bleu4: Some(s.mean_bleu(4)),
        war: Some(s.mean_war()),
        loss,
        wall_time_s: c.wall_time,
    }
}

/// Pre-training epochs, then decoder-phase and encoder-phase rows of every
/// cycle. The loss column carries the negated surrogate in the RL phase.
pub fn training_log_rows(pretrain: &[PretrainRecord], cycles: &[CycleRecord]) -> Vec<LogRow> {
    let mut rows: Vec<LogRow> = pretrain
        .iter()
        .map(|p| LogRow {
            phase: "pretrain",
            epoch: p.epoch,
            cycle: None,
            receiver: None,
            mean_reward: None,
            bleu1: None,
            bleu2: None,
            bleu3: None,
            bleu4: None,
            war: None,
            loss: Some(p.loss),
            wall_time_s: p.wall_time,
        })
        .collect();
    for c in cycles {
        for (n, s) in c.decoder.iter().enumerate() {
            rows.push(score_row("decoder", c, n, s, Some(-c.decoder_surrogate[n])));
        }
        for (n, s) in c.encoder.per_receiver.iter().enumerate() {
            rows.push(score_row("encoder", c, n, s, Some(-c.encoder.surrogate)));
        }
    }
    rows
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Line plot of `metric` against SNR, one series per receiver.
pub fn svg_plot(report: &EvaluationReport, metric: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let snrs: Vec<f64> = report.rows.iter().map(|r| r.snr_db).collect();
    let lo = snrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = snrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |s: f64| pad + (s - lo) / span * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            pad - 6.0,
            y(v) + 4.0
        );
    }
    for s in [lo, hi] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{s} dB</text>"#,
            x(s),
            h - pad + 18.0
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{metric} vs SNR</text>"#, w / 2.0);
    for n in 0..report.receivers() {
        let color = PALETTE[n % PALETTE.len()];
        let pts: Vec<String> = report
            .receiver_rows(n)
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.snr_db), y(r.metric(metric).unwrap_or(0.0))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">RX{}</text>"#,
            w - pad + 4.0,
            pad + 14.0 * n as f64,
            n + 1
        );
    }
    out.push_str("</svg>\n");
    out
}

/// `plots/<metric>.svg` for every reported metric.
pub fn write_plots(report: &EvaluationReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    for m in REPORT_METRICS {
        let path = dir.join(format!("{m}.svg"));
        std::fs::write(&path, svg_plot(report, m)).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
