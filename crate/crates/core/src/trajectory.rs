//! Iterative compression along a trajectory of speedup targets.
//!
//! Each step searches a scheme for the next target on the current weights,
//! compresses them in full-matrix form and retrains. After the last step the
//! final scheme is applied in factorized form and the model is retrained once
//! more with the factors as parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{
    apply_scheme_factorized, apply_scheme_full, breakdown, scheme_speedup, CompressionError,
    CompressionScheme, FlopsBreakdown, SvdCache,
};
use crate::model::{
    evaluate, train, CompressibleModel, Dataset, EpochStats, LrSchedule, ModelError, TrainConfig,
    TrainMode,
};
use crate::search::{
    construct_search_space, reinforce_search, ControllerConfig, EnergyRange, EpisodeTrace,
    ModelEvaluator, RewardSpec, SearchError, MAX_ENERGY, MIN_ENERGY,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step}: {source}")]
    Search { step: usize, source: SearchError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: PipelineError,
    pub partial: Box<ExperimentRecord>,
}

/// Strictly increasing speedup targets, all above 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Trajectory {
    targets: Vec<f64>,
}

impl Trajectory {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(PipelineError::InvalidTrajectory("needs at least one target".into()));
        }
        if let Some(t) = targets.iter().find(|t| !(t.is_finite() && **t > 1.0)) {
            return Err(PipelineError::InvalidTrajectory(format!(
                "target {t} must be greater than 1"
            )));
        }
        if targets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PipelineError::InvalidTrajectory(format!(
                "targets must be strictly increasing: {targets:?}"
            )));
        }
        Ok(Trajectory { targets })
    }

    pub fn one_shot(target: f64) -> Result<Self> {
        Self::new(vec![target])
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn final_target(&self) -> f64 {
        *self.targets.last().expect("non-empty")
    }

    /// `Δtᵢ = tᵢ − tᵢ₋₁` with `t₀ = 1`.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = 1.0;
        self.targets
            .iter()
            .map(|&t| {
                let d = t - prev;
                prev = t;
                d
            })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for Trajectory {
    type Error = PipelineError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Trajectory::new(v)
    }
}

impl From<Trajectory> for Vec<f64> {
    fn from(t: Trajectory) -> Self {
        t.targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Increment ratios inside `[similar_low, similar_high]` keep the range.
    pub similar_low: f64,
    pub similar_high: f64,
    /// Shift applied to both endpoints otherwise.
    pub delta: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            similar_low: 0.5,
            similar_high: 2.0,
            delta: 0.1,
        }
    }
}

fn clamp_energy(v: f64) -> f64 {
    // Rounded so repeated ±0.1 shifts do not accumulate binary noise.
    ((v.clamp(MIN_ENERGY, MAX_ENERGY)) * 1e9).round() / 1e9
}

fn shifted(range: EnergyRange, by: f64) -> Option<EnergyRange> {
    EnergyRange::new(clamp_energy(range.lo + by), clamp_energy(range.hi + by)).ok()
}

/// Energy range for the next step: lowered (more aggressive) when the speedup
/// increment grows sharply, raised when it shrinks sharply, kept otherwise.
/// A shift that would collapse the range after clamping keeps `prev`.
pub fn adapt_energy_range(
    prev: EnergyRange,
    increment: f64,
    prev_increment: Option<f64>,
    cfg: &AdaptConfig,
) -> EnergyRange {
    let Some(prev_increment) = prev_increment else {
        return prev;
    };
    let ratio = increment / prev_increment;
    let by = if ratio > cfg.similar_high {
        -cfg.delta
    } else if ratio < cfg.similar_low {
        cfg.delta
    } else {
        return prev;
    };
    shifted(prev, by).unwrap_or(prev)
}

/// Epochs per phase (K intermediate retrains, then the final factorized one),
/// proportional to `(Δt₁, …, Δt_K, Δt_K)` and summing exactly to `total`.
pub fn allocate_budget(total: usize, trajectory: &Trajectory) -> Result<Vec<usize>> {
    let k = trajectory.len();
    if total < k + 1 {
        return Err(PipelineError::InvalidConfig(format!(
            "budget {total} is smaller than the {} phases",
            k + 1
        )));
    }
    let mut weights = trajectory.increments();
    weights.push(*weights.last().expect("non-empty"));
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - alloc.iter().sum::<usize>();
    // Largest remainder first; earlier phases win exact ties.
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if remaining == 0 {
            break;
        }
        alloc[i] += 1;
        remaining -= 1;
    }
    Ok(alloc)
}

/// Everything a pipeline run needs besides the model and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub initial_energy_range: EnergyRange,
    pub adapt: AdaptConfig,
    pub controller: ControllerConfig,
    pub quality_weight: f64,
    pub violation_penalty_scale: f64,
    /// Training samples (from the start of the train split) used to score schemes.
    pub search_eval_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            initial_energy_range: EnergyRange { lo: 0.5, hi: 0.8 },
            adapt: AdaptConfig::default(),
            controller: ControllerConfig::default(),
            quality_weight: 10.0,
            violation_penalty_scale: 10.0,
            search_eval_samples: 1024,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        EnergyRange::new(self.initial_energy_range.lo, self.initial_energy_range.hi)
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.violation_penalty_scale < self.quality_weight {
            return Err(PipelineError::InvalidConfig(
                "violation_penalty_scale must be at least quality_weight".into(),
            ));
        }
        if !(self.quality_weight > 0.0) {
            return Err(PipelineError::InvalidConfig("quality_weight must be positive".into()));
        }
        if self.controller.episodes == 0 || self.controller.batch == 0 {
            return Err(PipelineError::InvalidConfig(
                "search episodes and batch must be positive".into(),
            ));
        }
        if self.search_eval_samples == 0 || self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig(
                "sample counts must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn reward_spec(&self, baseline_error: f64) -> RewardSpec {
        RewardSpec {
            quality_weight: self.quality_weight,
            violation_penalty_scale: self.violation_penalty_scale,
            baseline_error,
        }
    }

    fn train_config(&self, epochs: usize, seed: u64, mode: TrainMode, schedule: LrSchedule) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: schedule,
            seed,
            mode,
        }
    }
}

/// Seeds for the independent random streams of a run.
fn derive_seed(run_seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEARCH_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub target: f64,
    /// Absent for phases that reuse a given scheme instead of searching.
    pub energy_range: Option<EnergyRange>,
    pub scheme: CompressionScheme,
    pub speedup: f64,
    pub search_reward: Option<f64>,
    /// Error on the search samples without retraining.
    pub search_error: Option<f64>,
    pub search_seed: Option<u64>,
    pub pre_retrain_error: f64,
    pub post_retrain_error: f64,
    pub epochs: usize,
    pub reward_trace: Vec<EpisodeTrace>,
    pub train_curve: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub scheme: CompressionScheme,
    pub speedup: f64,
    pub pre_retrain_error: f64,
    pub error: f64,
    pub epochs: usize,
    pub train_curve: Vec<EpochStats>,
    pub breakdown: FlopsBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainMode {
    Compressed,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Trajectory,
    ApplyRanks {
        mode: RetrainMode,
        reset_period: usize,
        lr_resets: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub strategy: Strategy,
    pub trajectory: Option<Trajectory>,
    pub seed: u64,
    pub total_budget: usize,
    pub phase_epochs: Vec<usize>,
    pub baseline_error: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub final_result: Option<FinalRecord>,
    pub total_epochs: usize,
    pub aborted: Option<String>,
}

impl ExperimentRecord {
    pub fn final_error(&self) -> Option<f64> {
        self.final_result.as_ref().map(|f| f.error)
    }

    pub fn final_scheme(&self) -> Option<&CompressionScheme> {
        self.final_result.as_ref().map(|f| &f.scheme)
    }
}

/// Train and test splits a run works on.
#[derive(Debug, Clone, Copy)]
pub struct Data<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

fn first_step_range(
    model: &CompressibleModel,
    cache: &SvdCache,
    target: f64,
    cfg: &PipelineConfig,
) -> Result<EnergyRange> {
    // Walk the configured range down until the first target is reachable.
    let mut range = cfg.initial_energy_range;
    loop {
        let space = construct_search_space(model.layer_set(), cache, target, range)
            .map_err(|source| PipelineError::Search { step: 1, source })?;
        let reachable = space
            .max_speedup(model.layer_set())
            .map_err(|source| PipelineError::Search { step: 1, source })?
            >= target;
        if reachable {
            return Ok(range);
        }
        match shifted(range, -cfg.adapt.delta) {
            Some(lower) if lower != range => range = lower,
            _ => return Ok(range),
        }
    }
}

struct StepOutcome {
    record: StepRecord,
    model: CompressibleModel,
}

fn search_and_retrain(
    model: &CompressibleModel,
    data: Data<'_>,
    step: usize,
    target: f64,
    range: Option<EnergyRange>,
    epochs: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StepOutcome> {
    let search_set = data.train.head(cfg.search_eval_samples);
    let evaluator = ModelEvaluator::new(model, &search_set)
        .map_err(|source| PipelineError::Search { step, source })?;
    let range = match range {
        Some(r) => r,
        None => first_step_range(model, evaluator.svd_cache(), target, cfg)?,
    };
    let wrap = |source| PipelineError::Search { step, source };
    let space = construct_search_space(model.layer_set(), evaluator.svd_cache(), target, range)
        .map_err(wrap)?;
    let spec = cfg.reward_spec(evaluator.baseline_error().map_err(wrap)?);
    let search_seed = derive_seed(seed, SEARCH_STREAM, step as u64);
    let outcome = reinforce_search(
        &space,
        model.layer_set(),
        target,
        &spec,
        &cfg.controller,
        search_seed,
        &evaluator,
    )
    .map_err(wrap)?;

    let scheme = outcome.best.scheme.clone();
    let compressed = apply_scheme_full(model.layer_set(), &model.dense_weights()?, &scheme)?;
    let compressed = model.with_dense_weights(&compressed)?;
    let pre = evaluate(&compressed, data.test)?;
    let trained = train(
        &compressed,
        data.train,
        &cfg.train_config(
            epochs,
            derive_seed(seed, TRAIN_STREAM, step as u64),
            TrainMode::Full,
            LrSchedule::Constant,
        ),
    )?;
    let post = evaluate(&trained.model, data.test)?;
    Ok(StepOutcome {
        record: StepRecord {
            step,
            target,
            energy_range: Some(range),
            speedup: outcome.best.speedup,
            search_reward: Some(outcome.best.reward),
            search_error: Some(outcome.best.error),
            search_seed: Some(search_seed),
            scheme,
            pre_retrain_error: pre,
            post_retrain_error: post,
            epochs,
            reward_trace: outcome.trace,
            train_curve: trained.curve,
        },
        model: trained.model,
    })
}

fn factorize_and_retrain(
    model: &CompressibleModel,
    data: Data<'_>,
    scheme: &CompressionScheme,
    epochs: usize,
    cfg: &PipelineConfig,
    train_seed: u64,
    schedule: LrSchedule,
) -> Result<(FinalRecord, CompressibleModel)> {
    let params = apply_scheme_factorized(model.layer_set(), &model.dense_weights()?, scheme)?;
    let factorized = model.with_params(&params)?;
    let pre = evaluate(&factorized, data.test)?;
    let trained = train(
        &factorized,
        data.train,
        &cfg.train_config(epochs, train_seed, TrainMode::Factorized, schedule),
    )?;
    let error = evaluate(&trained.model, data.test)?;
    Ok((
        FinalRecord {
            scheme: scheme.clone(),
            speedup: scheme_speedup(model.layer_set(), scheme)?,
            pre_retrain_error: pre,
            error,
            epochs,
            train_curve: trained.curve,
            breakdown: breakdown(model.layer_set(), scheme)?,
        },
        trained.model,
    ))
}

fn fail(error: PipelineError, record: ExperimentRecord) -> RunFailure {
    let mut partial = record;
    partial.aborted = Some(error.to_string());
    RunFailure {
        error,
        partial: Box::new(partial),
    }
}

/// Searches, compresses and retrains along `trajectory`, then factorizes with
/// the last scheme and retrains. Returns the record and the final factorized model.
pub fn run_trajectory(
    baseline: &CompressibleModel,
    data: Data<'_>,
    trajectory: &Trajectory,
    total_budget: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<(ExperimentRecord, CompressibleModel), RunFailure> {
    let mut record = ExperimentRecord {
        strategy: Strategy::Trajectory,
        trajectory: Some(trajectory.clone()),
        seed,
        total_budget,
        phase_epochs: Vec::new(),
        baseline_error: None,
        steps: Vec::new(),
        final_result: None,
        total_epochs: 0,
        aborted: None,
    };
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(fail(err.into(), record)),
            }
        };
    }
    attempt!(cfg.validate());
    record.phase_epochs = attempt!(allocate_budget(total_budget, trajectory));
    record.baseline_error = Some(attempt!(evaluate(baseline, data.test)));

    let increments = trajectory.increments();
    let mut model = baseline.clone();
    let mut range: Option<EnergyRange> = None;
    for (i, &target) in trajectory.targets().iter().enumerate() {
        let step_range = range.map(|prev| {
            adapt_energy_range(prev, increments[i], Some(increments[i - 1]), &cfg.adapt)
        });
        let out = attempt!(search_and_retrain(
            &model,
            data,
            i + 1,
            target,
            step_range,
            record.phase_epochs[i],
            cfg,
            seed,
        ));
        range = out.record.energy_range;
        record.total_epochs += out.record.epochs;
        record.steps.push(out.record);
        model = out.model;
    }

    let k = trajectory.len();
    let final_scheme = record.steps[k - 1].scheme.clone();
    let (final_record, model) = attempt!(factorize_and_retrain(
        &model,
        data,
        &final_scheme,
        record.phase_epochs[k],
        cfg,
        derive_seed(seed, TRAIN_STREAM, (k + 1) as u64),
        LrSchedule::Constant,
    ));
    record.total_epochs += final_record.epochs;
    record.final_result = Some(final_record);
    Ok((record, model))
}

/// One-shot search for `target` on the baseline: one search, one full-matrix
/// retrain, one factorized retrain. Written out directly rather than through
/// [`run_trajectory`] so the two can be checked against each other.
pub fn run_one_shot(
    baseline: &CompressibleModel,
    data: Data<'_>,
    target: f64,
    total_budget: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<(ExperimentRecord, CompressibleModel), RunFailure> {
    let trajectory = Trajectory::one_shot(target).map_err(|e| fail(e, empty_record(seed, total_budget)))?;
    let mut record = empty_record(seed, total_budget);
    record.trajectory = Some(trajectory);
    if let Err(e) = cfg.validate() {
        return Err(fail(e, record));
    }
    // Two phases weighted (Δt, Δt): an even split, remainder to the search phase.
    if total_budget < 2 {
        return Err(fail(
            PipelineError::InvalidConfig(format!("budget {total_budget} is smaller than the 2 phases")),
            record,
        ));
    }
    let retrain = total_budget - total_budget / 2;
    let finetune = total_budget / 2;
    record.phase_epochs = vec![retrain, finetune];
    record.baseline_error = match evaluate(baseline, data.test) {
        Ok(e) => Some(e),
        Err(e) => return Err(fail(e.into(), record)),
    };
    let step = match search_and_retrain(baseline, data, 1, target, None, retrain, cfg, seed) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, record)),
    };
    let scheme = step.record.scheme.clone();
    record.total_epochs += retrain;
    record.steps.push(step.record);
    match factorize_and_retrain(
        &step.model,
        data,
        &scheme,
        finetune,
        cfg,
        derive_seed(seed, TRAIN_STREAM, 2),
        LrSchedule::Constant,
    ) {
        Ok((f, model)) => {
            record.total_epochs += f.epochs;
            record.final_result = Some(f);
            Ok((record, model))
        }
        Err(e) => Err(fail(e, record)),
    }
}

fn empty_record(seed: u64, total_budget: usize) -> ExperimentRecord {
    ExperimentRecord {
        strategy: Strategy::Trajectory,
        trajectory: None,
        seed,
        total_budget,
        phase_epochs: Vec::new(),
        baseline_error: None,
        steps: Vec::new(),
        final_result: None,
        total_epochs: 0,
        aborted: None,
    }
}

/// Applies a known scheme directly to the baseline and retrains it.
///
/// `Compressed` factorizes once and trains the factors for the whole budget.
/// `Cyclic` splits the budget into periods of `reset_period` epochs (default a
/// fifth of the budget); every period but the last recompresses in full-matrix
/// form and trains with the learning rate restarted, and the last period
/// factorizes and trains the factors.
pub fn run_apply_ranks(
    baseline: &CompressibleModel,
    data: Data<'_>,
    scheme: &CompressionScheme,
    mode: RetrainMode,
    budget: usize,
    reset_period: Option<usize>,
    cfg: &PipelineConfig,
    seed: u64,
) -> std::result::Result<(ExperimentRecord, CompressibleModel), RunFailure> {
    let period = reset_period.unwrap_or(budget / 5);
    let mut record = ExperimentRecord {
        strategy: Strategy::ApplyRanks {
            mode,
            reset_period: period,
            lr_resets: 0,
        },
        trajectory: None,
        seed,
        total_budget: budget,
        phase_epochs: Vec::new(),
        baseline_error: None,
        steps: Vec::new(),
        final_result: None,
        total_epochs: 0,
        aborted: None,
    };
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(fail(err.into(), record)),
            }
        };
    }
    attempt!(cfg.validate());
    attempt!(scheme.validate(baseline.layer_set()));
    record.baseline_error = Some(attempt!(evaluate(baseline, data.test)));

    match mode {
        RetrainMode::Compressed => {
            record.phase_epochs = vec![budget];
            let (f, model) = attempt!(factorize_and_retrain(
                baseline,
                data,
                scheme,
                budget,
                cfg,
                derive_seed(seed, TRAIN_STREAM, 1),
                LrSchedule::Constant,
            ));
            record.total_epochs = f.epochs;
            record.final_result = Some(f);
            Ok((record, model))
        }
        RetrainMode::Cyclic => {
            if budget > 0 && (period == 0 || budget % period != 0) {
                return Err(fail(
                    PipelineError::InvalidConfig(format!(
                        "reset period {period} must divide the budget {budget}"
                    )),
                    record,
                ));
            }
            let periods = if budget == 0 { 0 } else { budget / period };
            let schedule = LrSchedule::Cyclic {
                reset_period: period.max(1),
            };
            let mut model = baseline.clone();
            for p in 0..periods.saturating_sub(1) {
                let weights = attempt!(apply_scheme_full(model.layer_set(), &attempt!(model.dense_weights()), scheme));
                let compressed = attempt!(model.with_dense_weights(&weights));
                let pre = attempt!(evaluate(&compressed, data.test));
                let trained = attempt!(train(
                    &compressed,
                    data.train,
                    &cfg.train_config(
                        period,
                        derive_seed(seed, TRAIN_STREAM, p as u64 + 1),
                        TrainMode::Full,
                        schedule,
                    ),
                ));
                let post = attempt!(evaluate(&trained.model, data.test));
                record.phase_epochs.push(period);
                record.total_epochs += period;
                record.steps.push(StepRecord {
                    step: p + 1,
                    target: attempt!(scheme_speedup(model.layer_set(), scheme)),
                    energy_range: None,
                    scheme: scheme.clone(),
                    speedup: attempt!(scheme_speedup(model.layer_set(), scheme)),
                    search_reward: None,
                    search_error: None,
                    search_seed: None,
                    pre_retrain_error: pre,
                    post_retrain_error: post,
                    epochs: period,
                    reward_trace: Vec::new(),
                    train_curve: trained.curve,
                });
                model = trained.model;
            }
            let last_epochs = if periods == 0 { 0 } else { period };
            let (f, model) = attempt!(factorize_and_retrain(
                &model,
                data,
                scheme,
                last_epochs,
                cfg,
                derive_seed(seed, TRAIN_STREAM, periods.max(1) as u64),
                schedule,
            ));
            record.phase_epochs.push(last_epochs);
            record.total_epochs += f.epochs;
            record.final_result = Some(f);
            record.strategy = Strategy::ApplyRanks {
                mode,
                reset_period: period,
                lr_resets: periods,
            };
            Ok((record, model))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(lo: f64, hi: f64) -> EnergyRange {
        EnergyRange::new(lo, hi).unwrap()
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![]).is_err());
        assert!(Trajectory::new(vec![1.0]).is_err());
        assert!(Trajectory::new(vec![2.0, 2.0]).is_err());
        assert!(Trajectory::new(vec![3.0, 2.0]).is_err());
        let t = Trajectory::new(vec![1.5, 2.0, 2.5, 3.0]).unwrap();
        assert_eq!(t.increments(), vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn adaptation_rule() {
        let cfg = AdaptConfig::default();
        assert_eq!(adapt_energy_range(range(0.5, 0.8), 1.0, None, &cfg), range(0.5, 0.8));
        assert_eq!(adapt_energy_range(range(0.5, 0.8), 1.0, Some(1.0), &cfg), range(0.5, 0.8));
        assert_eq!(adapt_energy_range(range(0.5, 0.8), 2.0, Some(1.0), &cfg), range(0.5, 0.8));
        assert_eq!(adapt_energy_range(range(0.5, 0.8), 2.5, Some(1.0), &cfg), range(0.4, 0.7));
        assert_eq!(adapt_energy_range(range(0.35, 0.6), 3.0, Some(1.0), &cfg), range(0.3, 0.5));
        assert_eq!(adapt_energy_range(range(0.5, 0.8), 0.4, Some(1.0), &cfg), range(0.6, 0.9));
        // a raise that would collapse the range after clamping keeps it
        assert_eq!(adapt_energy_range(range(0.9, 0.99), 0.1, Some(1.0), &cfg), range(0.9, 0.99));
    }

    #[test]
    fn budget_allocation() {
        let t = |v: Vec<f64>| Trajectory::new(v).unwrap();
        assert_eq!(allocate_budget(250, &t(vec![2.0, 3.0, 4.0, 5.0])).unwrap(), vec![50; 5]);
        assert_eq!(allocate_budget(250, &t(vec![5.0])).unwrap(), vec![125, 125]);
        assert_eq!(allocate_budget(250, &t(vec![2.0, 5.0])).unwrap(), vec![36, 107, 107]);
        assert_eq!(allocate_budget(160, &t(vec![1.5, 2.0, 2.5, 3.0])).unwrap(), vec![32; 5]);
        assert!(allocate_budget(4, &t(vec![1.5, 2.0, 2.5, 3.0])).is_err());
    }

    #[test]
    fn seeds_differ_by_stream_and_index() {
        let a = derive_seed(1, SEARCH_STREAM, 1);
        assert_ne!(a, derive_seed(1, TRAIN_STREAM, 1));
        assert_ne!(a, derive_seed(1, SEARCH_STREAM, 2));
        assert_ne!(a, derive_seed(2, SEARCH_STREAM, 1));
        assert_eq!(a, derive_seed(1, SEARCH_STREAM, 1));
    }
}
