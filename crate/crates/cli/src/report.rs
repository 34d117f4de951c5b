//! Run reports (structured JSON plus a plain-text rendering).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lrf_core::compression::{CompressionScheme, FlopsBreakdown};
use lrf_core::trajectory::{ExperimentRecord, FinalRecord, StepRecord, Strategy};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub strategy: Strategy,
    pub baseline_error: Option<f64>,
    pub phase_epochs: Vec<usize>,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "final")]
    pub final_result: Option<FinalRecord>,
    pub total_epochs: usize,
    pub aborted: Option<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig, record: ExperimentRecord) -> Self {
        RunReport {
            command: command.to_string(),
            config: config.clone(),
            strategy: record.strategy,
            baseline_error: record.baseline_error,
            phase_epochs: record.phase_epochs,
            steps: record.steps,
            final_result: record.final_result,
            total_epochs: record.total_epochs,
            aborted: record.aborted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BakeMetrics {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Test error of the baked model.
    pub baseline_error: f64,
    pub train_error: f64,
    pub curve: Vec<lrf_core::model::EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub label: String,
    /// Mean test error over the paired seeds.
    pub error: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub seeds: Vec<u64>,
    pub iterative: Vec<f64>,
    pub one_shot: Vec<f64>,
    /// Seeds where the iterative error is at most the one-shot error.
    pub iterative_not_worse: usize,
    pub fraction: f64,
}

impl PairedSummary {
    pub fn new(seeds: Vec<u64>, iterative: Vec<f64>, one_shot: Vec<f64>) -> Self {
        let wins = iterative.iter().zip(&one_shot).filter(|(a, b)| a <= b).count();
        PairedSummary {
            fraction: wins as f64 / seeds.len().max(1) as f64,
            seeds,
            iterative,
            one_shot,
            iterative_not_worse: wins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRuns {
    pub seed: u64,
    pub iterative: ExperimentRecord,
    pub one_shot: ExperimentRecord,
    pub applied: Vec<(String, ExperimentRecord)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: RunConfig,
    pub baseline_error: f64,
    pub rows: Vec<StrategyRow>,
    pub paired: PairedSummary,
    pub runs: Vec<SeedRuns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub scheme: CompressionScheme,
    pub speedup: f64,
    pub error: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetHistogram {
    pub target: f64,
    pub energy_range: [f64; 2],
    pub samples: Vec<HistogramRecord>,
}

fn mflops(macs: u64) -> String {
    format!("{:.2}", macs as f64 / 1e6)
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{c:<w$}");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Per-layer FLOPS table: part, layer, searched, dims, original MFLOPS, rank,
/// new MFLOPS, speedup. `parts` optionally groups layers under a label.
pub fn render_breakdown(b: &FlopsBreakdown, parts: &BTreeMap<String, String>) -> String {
    let mut rows: Vec<Vec<String>> = b
        .layers
        .iter()
        .map(|l| {
            vec![
                parts.get(&l.name).cloned().unwrap_or_default(),
                l.name.clone(),
                if l.searchable { "yes" } else { "no" }.to_string(),
                format!("{}x{}", l.rows, l.cols),
                mflops(l.orig_flops),
                l.rank_choice.map_or("N/A".to_string(), |c| c.to_string()),
                mflops(l.new_flops),
                format!("{:.1}x", l.layer_speedup),
            ]
        })
        .collect();
    rows.push(vec![
        String::new(),
        "Overall".into(),
        String::new(),
        String::new(),
        mflops(b.orig_total),
        "N/A".into(),
        mflops(b.new_total),
        format!("{:.1}x", b.overall_speedup),
    ]);
    let mut out = table(
        &["Part", "Layer", "Search", "Dims", "Orig. FLOPS [M]", "Rank", "New FLOPS [M]", "Speedup"],
        &rows,
    );
    for w in b.layers.iter().filter(|l| l.non_beneficial) {
        let _ = writeln!(out, "warning: rank for {} does not reduce FLOPS", w.name);
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

pub fn render_run_report(r: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "command: {}", r.command);
    let _ = writeln!(out, "seed: {}", r.config.seed);
    let _ = writeln!(out, "baseline error: {}", opt(r.baseline_error));
    let _ = writeln!(out, "phase epochs: {:?} (total {})", r.phase_epochs, r.total_epochs);
    if !r.steps.is_empty() {
        let rows: Vec<Vec<String>> = r
            .steps
            .iter()
            .map(|s| {
                vec![
                    s.step.to_string(),
                    format!("{:.2}", s.target),
                    s.energy_range
                        .map_or("-".into(), |e| format!("[{:.2}, {:.2}]", e.lo, e.hi)),
                    s.scheme.to_string(),
                    format!("{:.2}x", s.speedup),
                    format!("{:.4}", s.pre_retrain_error),
                    format!("{:.4}", s.post_retrain_error),
                    s.epochs.to_string(),
                ]
            })
            .collect();
        out.push('\n');
        out.push_str(&table(
            &["Step", "Target", "Energy", "Scheme", "Speedup", "Pre", "Post", "Epochs"],
            &rows,
        ));
    }
    if let Some(f) = &r.final_result {
        let _ = writeln!(
            out,
            "\nfinal scheme {} at {:.2}x: error {:.4} before retraining, {:.4} after {} epochs\n",
            f.scheme, f.speedup, f.pre_retrain_error, f.error, f.epochs
        );
        out.push_str(&render_breakdown(&f.breakdown, &BTreeMap::new()));
    }
    if let Some(a) = &r.aborted {
        let _ = writeln!(out, "\naborted: {a}");
    }
    out
}

/// Strategy comparison table with errors in percent.
pub fn render_strategy_table(rows: &[StrategyRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.label.clone(), format!("{:.2}", r.error * 100.0)])
        .collect();
    table(&["Approach", "Error [%]"], &body)
}

pub fn render_compare(r: &CompareReport) -> String {
    let mut out = render_strategy_table(&r.rows);
    let _ = writeln!(
        out,
        "\niterative <= one-shot in {}/{} paired seeds ({:.2})",
        r.paired.iterative_not_worse,
        r.paired.seeds.len(),
        r.paired.fraction
    );
    out
}
