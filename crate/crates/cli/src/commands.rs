//! Subcommand implementations. Each writes its outputs under the configured
//! output directory, guarded by a lock file.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lrf_core::compression::{breakdown, CompressionScheme, RankChoice};
use lrf_core::model::{
    evaluate, generate_dataset, init_reference_model, train, Activation, Dataset, LrSchedule,
    TrainConfig, TrainMode,
};
use lrf_core::search::{construct_search_space, reward_histogram, ModelEvaluator, RewardSpec};
use lrf_core::trajectory::{
    run_apply_ranks, run_trajectory, Data, ExperimentRecord, RetrainMode, Trajectory,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Hyperparameters};
use crate::config::RunConfig;
use crate::report::{
    render_breakdown, render_compare, render_run_report, BakeMetrics, CompareReport,
    HistogramRecord, PairedSummary, RunReport, SeedRuns, StrategyRow, TargetHistogram,
};
use crate::CliError;

pub const BASELINE_FILE: &str = "baseline.lrfc";
pub const BAKE_METRICS_FILE: &str = "baseline_metrics.json";
pub const TRAJECTORY_REPORT: &str = "trajectory_report";
pub const TRAJECTORY_CHECKPOINT: &str = "trajectory_final.lrfc";
pub const APPLY_REPORT: &str = "apply_report";
pub const APPLY_CHECKPOINT: &str = "applied.lrfc";
pub const COMPARE_REPORT: &str = "compare_report";
pub const HISTOGRAM_FILE: &str = "histograms.json";

/// Exclusive claim on an output directory for the lifetime of a command.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// Timestamps go to a log beside the reports so the reports stay reproducible.
fn log(dir: &Path, command: &str, event: &str) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    if let Ok(mut f) = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("lrf.log"))
    {
        use std::io::Write;
        let _ = writeln!(f, "{secs} {command} {event}");
    }
}

fn datasets(seed: u64) -> (Dataset, Dataset) {
    generate_dataset(seed)
}

/// Trains the reference model on the synthetic task and writes the baseline
/// checkpoint and its metrics.
pub fn cmd_bake(cfg: &RunConfig) -> Result<BakeMetrics, CliError> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    log(&cfg.out, "bake", "start");
    let (train_set, test_set) = datasets(cfg.seed);
    let tc = TrainConfig {
        epochs: cfg.bake_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.bake_learning_rate,
        lr_schedule: LrSchedule::Constant,
        seed: cfg.seed,
        mode: TrainMode::Full,
    };
    let out = train(&init_reference_model(cfg.seed), &train_set, &tc)?;
    let metrics = BakeMetrics {
        seed: cfg.seed,
        epochs: cfg.bake_epochs,
        learning_rate: cfg.bake_learning_rate,
        batch_size: cfg.batch_size,
        baseline_error: evaluate(&out.model, &test_set)?,
        train_error: evaluate(&out.model, &train_set)?,
        curve: out.curve,
    };
    let ckpt = Checkpoint {
        model: out.model,
        hyperparameters: Hyperparameters {
            activation: Activation::Relu,
            epochs: cfg.bake_epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.bake_learning_rate,
            seed: cfg.seed,
        },
        dataset_seed: cfg.seed,
    };
    ckpt.save(&cfg.out.join(BASELINE_FILE))?;
    write_json(&cfg.out.join(BAKE_METRICS_FILE), &metrics)?;
    log(&cfg.out, "bake", "done");
    Ok(metrics)
}

fn retrained_checkpoint(base: &Checkpoint, cfg: &RunConfig, model: lrf_core::model::CompressibleModel, epochs: usize) -> Checkpoint {
    Checkpoint {
        model,
        hyperparameters: Hyperparameters {
            activation: base.hyperparameters.activation,
            epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
        },
        dataset_seed: base.dataset_seed,
    }
}

fn write_report(dir: &Path, stem: &str, report: &RunReport) -> Result<(), CliError> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write(&dir.join(format!("{stem}.txt")), render_run_report(report))
}

fn load_dense_baseline(path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model.is_factorized() {
        return Err(CliError::Invalid(format!(
            "{} holds a factorized model; a dense baseline is required",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// Runs the iterative pipeline on a baseline checkpoint. On failure the
/// partial report is still written before the error is returned.
pub fn cmd_run_trajectory(cfg: &RunConfig, checkpoint: &Path) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let base = load_dense_baseline(checkpoint)?;
    let pipeline = cfg.pipeline()?;
    let trajectory = cfg.trajectory()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    log(&cfg.out, "run-trajectory", "start");
    let (train_set, test_set) = datasets(base.dataset_seed);
    let data = Data {
        train: &train_set,
        test: &test_set,
    };
    match run_trajectory(&base.model, data, &trajectory, cfg.budget, &pipeline, cfg.seed) {
        Ok((record, model)) => {
            let report = RunReport::new("run-trajectory", cfg, record);
            retrained_checkpoint(&base, cfg, model, report.total_epochs)
                .save(&cfg.out.join(TRAJECTORY_CHECKPOINT))?;
            write_report(&cfg.out, TRAJECTORY_REPORT, &report)?;
            log(&cfg.out, "run-trajectory", "done");
            Ok(report)
        }
        Err(failure) => {
            let report = RunReport::new("run-trajectory", cfg, *failure.partial);
            write_report(&cfg.out, TRAJECTORY_REPORT, &report)?;
            log(&cfg.out, "run-trajectory", "failed");
            Err(failure.error.into())
        }
    }
}

/// One entry of a scheme file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeEntry {
    pub layer: String,
    pub rank: RankChoice,
}

/// Builds a scheme from named entries, listing every layer that is unknown,
/// not searchable, repeated or missing.
pub fn scheme_from_entries(
    layers: &lrf_core::compression::LayerSet,
    entries: &[SchemeEntry],
) -> Result<CompressionScheme, CliError> {
    let mut by_name: BTreeMap<&str, RankChoice> = BTreeMap::new();
    let mut problems = Vec::new();
    for e in entries {
        match layers.get(&e.layer) {
            None => problems.push(format!("unknown layer {}", e.layer)),
            Some(spec) if !spec.searchable => {
                problems.push(format!("layer {} is not searchable", e.layer))
            }
            Some(_) => {
                if by_name.insert(&e.layer, e.rank).is_some() {
                    problems.push(format!("layer {} listed twice", e.layer));
                }
            }
        }
    }
    let mut choices = Vec::new();
    for spec in layers.searchable() {
        match by_name.get(spec.name.as_str()) {
            Some(c) => choices.push(*c),
            None => problems.push(format!("missing layer {}", spec.name)),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Invalid(format!("scheme does not match the model: {}", problems.join("; "))));
    }
    let scheme = CompressionScheme::new(choices);
    scheme
        .validate(layers)
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(scheme)
}

pub fn scheme_entries(layers: &lrf_core::compression::LayerSet, s: &CompressionScheme) -> Vec<SchemeEntry> {
    s.per_layer(layers)
        .map(|(spec, c)| SchemeEntry {
            layer: spec.name.clone(),
            rank: c,
        })
        .collect()
}

pub fn read_scheme_file(path: &Path) -> Result<Vec<SchemeEntry>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Applies a scheme to a baseline checkpoint and retrains it in the
/// configured mode.
pub fn cmd_apply(cfg: &RunConfig, checkpoint: &Path, scheme_file: &Path) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let base = load_dense_baseline(checkpoint)?;
    let scheme = scheme_from_entries(base.model.layer_set(), &read_scheme_file(scheme_file)?)?;
    let pipeline = cfg.pipeline()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    log(&cfg.out, "apply", "start");
    let (train_set, test_set) = datasets(base.dataset_seed);
    let data = Data {
        train: &train_set,
        test: &test_set,
    };
    let result = run_apply_ranks(
        &base.model,
        data,
        &scheme,
        cfg.mode,
        cfg.budget,
        cfg.reset_period,
        &pipeline,
        cfg.seed,
    );
    match result {
        Ok((record, model)) => {
            let report = RunReport::new("apply", cfg, record);
            retrained_checkpoint(&base, cfg, model, report.total_epochs)
                .save(&cfg.out.join(APPLY_CHECKPOINT))?;
            write_report(&cfg.out, APPLY_REPORT, &report)?;
            log(&cfg.out, "apply", "done");
            Ok(report)
        }
        Err(failure) => {
            let report = RunReport::new("apply", cfg, *failure.partial);
            write_report(&cfg.out, APPLY_REPORT, &report)?;
            log(&cfg.out, "apply", "failed");
            Err(failure.error.into())
        }
    }
}

fn final_error(r: &ExperimentRecord) -> f64 {
    r.final_error().expect("completed run has a final result")
}

fn format_target(t: f64) -> String {
    let s = format!("{t}");
    s.trim_end_matches(".0").to_string()
}

/// Strategy labels in table order, after the baseline row.
pub fn strategy_labels(final_target: f64) -> [String; 5] {
    let n = format_target(final_target);
    [
        "Iterative Approach".into(),
        "Base--Iterative Ranks (Compressed)".into(),
        "Base--Iterative Ranks (Cyclic)".into(),
        format!("Base--{n}x (Compressed)"),
        format!("Base--{n}x (Cyclic)"),
    ]
}

/// Uniformly sampled schemes for each histogram target, scored without retraining.
pub fn histograms(
    base: &Checkpoint,
    cfg: &RunConfig,
    train_set: &Dataset,
) -> Result<Vec<TargetHistogram>, CliError> {
    let search_set = train_set.head(cfg.search_eval_samples);
    let evaluator = ModelEvaluator::new(&base.model, &search_set)?;
    let spec = RewardSpec {
        quality_weight: cfg.quality_weight,
        violation_penalty_scale: cfg.violation_penalty_scale,
        baseline_error: evaluator.baseline_error()?,
    };
    let range = cfg.energy_range()?;
    let layers = base.model.layer_set();
    let mut out = Vec::new();
    for (i, &target) in cfg.histogram_targets.iter().enumerate() {
        let space = construct_search_space(layers, evaluator.svd_cache(), target, range)?;
        let samples = reward_histogram(&space, layers, cfg.histogram_samples, cfg.seed + i as u64, &evaluator)?
            .into_iter()
            .map(|s| HistogramRecord {
                reward: spec.score(s.speedup, target, s.error),
                scheme: s.scheme,
                speedup: s.speedup,
                error: s.error,
            })
            .collect();
        out.push(TargetHistogram {
            target,
            energy_range: [range.lo, range.hi],
            samples,
        });
    }
    Ok(out)
}

/// Iterative versus one-shot search on shared seeds, plus both searched
/// schemes applied directly to the baseline with each retraining mode.
pub fn cmd_compare(cfg: &RunConfig, checkpoint: &Path) -> Result<CompareReport, CliError> {
    cfg.validate()?;
    let base = load_dense_baseline(checkpoint)?;
    let pipeline = cfg.pipeline()?;
    let trajectory = cfg.trajectory()?;
    let target = trajectory.final_target();
    let one_shot = Trajectory::one_shot(target).map_err(|e| CliError::Invalid(e.to_string()))?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    log(&cfg.out, "compare", "start");
    let (train_set, test_set) = datasets(base.dataset_seed);
    let data = Data {
        train: &train_set,
        test: &test_set,
    };
    let baseline_error = evaluate(&base.model, &test_set)?;

    let mut runs = Vec::new();
    for &seed in &cfg.compare_seeds {
        let iterative = run_trajectory(&base.model, data, &trajectory, cfg.budget, &pipeline, seed)
            .map_err(|f| f.error)?
            .0;
        let single = run_trajectory(&base.model, data, &one_shot, cfg.budget, &pipeline, seed)
            .map_err(|f| f.error)?
            .0;
        let mut applied = Vec::new();
        let labels = strategy_labels(target);
        let sources = [&iterative, &iterative, &single, &single];
        let modes = [
            RetrainMode::Compressed,
            RetrainMode::Cyclic,
            RetrainMode::Compressed,
            RetrainMode::Cyclic,
        ];
        for ((label, source), mode) in labels[1..].iter().zip(sources).zip(modes) {
            let scheme = source.final_scheme().expect("completed run").clone();
            let record = run_apply_ranks(
                &base.model,
                data,
                &scheme,
                mode,
                cfg.budget,
                cfg.reset_period,
                &pipeline,
                seed,
            )
            .map_err(|f| f.error)?
            .0;
            applied.push((label.clone(), record));
        }
        runs.push(SeedRuns {
            seed,
            iterative,
            one_shot: single,
            applied,
        });
    }

    let labels = strategy_labels(target);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows = vec![StrategyRow {
        label: "Baseline".into(),
        error: baseline_error,
        per_seed: vec![baseline_error; runs.len()],
    }];
    let iterative: Vec<f64> = runs.iter().map(|r| final_error(&r.iterative)).collect();
    rows.push(StrategyRow {
        label: labels[0].clone(),
        error: mean(&iterative),
        per_seed: iterative.clone(),
    });
    for (i, label) in labels[1..].iter().enumerate() {
        let errs: Vec<f64> = runs.iter().map(|r| final_error(&r.applied[i].1)).collect();
        rows.push(StrategyRow {
            label: label.clone(),
            error: mean(&errs),
            per_seed: errs,
        });
    }
    let one_shot_errors: Vec<f64> = runs.iter().map(|r| final_error(&r.one_shot)).collect();
    let report = CompareReport {
        config: cfg.clone(),
        baseline_error,
        rows,
        paired: PairedSummary::new(cfg.compare_seeds.clone(), iterative, one_shot_errors),
        runs,
    };
    write_json(&cfg.out.join(format!("{COMPARE_REPORT}.json")), &report)?;
    write(&cfg.out.join(format!("{COMPARE_REPORT}.txt")), render_compare(&report))?;
    write_json(&cfg.out.join(HISTOGRAM_FILE), &histograms(&base, cfg, &train_set)?)?;
    log(&cfg.out, "compare", "done");
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Structured,
}

/// FLOPS breakdown of the scheme stored in a checkpoint.
pub fn cmd_report(checkpoint: &Path, format: Format) -> Result<String, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let layers = ckpt.model.layer_set();
    let b = breakdown(layers, &ckpt.model.current_scheme())?;
    Ok(match format {
        Format::Text => render_breakdown(&b, &BTreeMap::new()),
        Format::Structured => serde_json::to_string_pretty(&b)? + "\n",
    })
}
