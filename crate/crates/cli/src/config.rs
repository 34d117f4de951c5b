//! Run configuration: a JSON file whose fields command-line flags override.

use std::path::{Path, PathBuf};

use lrf_core::search::{ControllerConfig, EnergyRange};
use lrf_core::trajectory::{allocate_budget, AdaptConfig, PipelineConfig, RetrainMode, Trajectory};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Speedup targets; a single value is a one-shot run.
    pub trajectory: Vec<f64>,
    /// Total retraining epochs shared by all phases.
    pub budget: usize,
    pub energy_range: [f64; 2],
    pub adapt: AdaptConfig,
    pub episodes: usize,
    pub batch: usize,
    pub policy_learning_rate: f64,
    pub baseline_decay: f64,
    pub quality_weight: f64,
    pub violation_penalty_scale: f64,
    pub search_eval_samples: usize,
    /// Retraining learning rate.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Cyclic period in epochs; defaults to a fifth of the budget.
    pub reset_period: Option<usize>,
    pub mode: RetrainMode,
    pub bake_epochs: usize,
    pub bake_learning_rate: f64,
    /// Paired seeds for `compare`.
    pub compare_seeds: Vec<u64>,
    pub histogram_samples: usize,
    /// Low and high targets for the reward histograms of `compare`.
    pub histogram_targets: Vec<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            seed: 42,
            trajectory: vec![1.5, 2.0, 2.5, 3.0],
            budget: 160,
            energy_range: [p.initial_energy_range.lo, p.initial_energy_range.hi],
            adapt: p.adapt,
            episodes: p.controller.episodes,
            batch: p.controller.batch,
            policy_learning_rate: p.controller.learning_rate,
            baseline_decay: p.controller.baseline_decay,
            quality_weight: p.quality_weight,
            violation_penalty_scale: p.violation_penalty_scale,
            search_eval_samples: p.search_eval_samples,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            reset_period: None,
            mode: RetrainMode::Cyclic,
            bake_epochs: 100,
            bake_learning_rate: 0.05,
            compare_seeds: (0..3).collect(),
            histogram_samples: 200,
            histogram_targets: vec![1.5, 3.0],
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn trajectory(&self) -> Result<Trajectory, CliError> {
        Trajectory::new(self.trajectory.clone()).map_err(|e| CliError::Invalid(e.to_string()))
    }

    pub fn energy_range(&self) -> Result<EnergyRange, CliError> {
        EnergyRange::new(self.energy_range[0], self.energy_range[1])
            .map_err(|e| CliError::Invalid(e.to_string()))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let p = PipelineConfig {
            initial_energy_range: self.energy_range()?,
            adapt: self.adapt,
            controller: ControllerConfig {
                episodes: self.episodes,
                batch: self.batch,
                learning_rate: self.policy_learning_rate,
                baseline_decay: self.baseline_decay,
            },
            quality_weight: self.quality_weight,
            violation_penalty_scale: self.violation_penalty_scale,
            search_eval_samples: self.search_eval_samples,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        };
        p.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(p)
    }

    /// Checks every precondition the commands rely on before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        let trajectory = self.trajectory()?;
        self.pipeline()?;
        allocate_budget(self.budget, &trajectory).map_err(|e| CliError::Invalid(e.to_string()))?;
        if let Some(p) = self.reset_period {
            if p == 0 || self.budget % p != 0 {
                return invalid(format!("reset period {p} must divide the budget {}", self.budget));
            }
        }
        if !(self.baseline_decay >= 0.0 && self.baseline_decay < 1.0) {
            return invalid("baseline_decay must lie in [0, 1)".into());
        }
        if !(self.bake_learning_rate > 0.0) {
            return invalid("bake_learning_rate must be positive".into());
        }
        if self.compare_seeds.is_empty() {
            return invalid("compare_seeds must not be empty".into());
        }
        if self.histogram_targets.iter().any(|t| !(*t > 1.0)) {
            return invalid("histogram targets must be greater than 1".into());
        }
        Ok(())
    }
}

pub fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Invalid(format!("not a number: {t:?}")))
        })
        .collect()
}

pub fn parse_range(text: &str) -> Result<[f64; 2], CliError> {
    match parse_list(text)?.as_slice() {
        [lo, hi] => Ok([*lo, *hi]),
        _ => Err(CliError::Invalid(format!("expected lo,hi but got {text:?}"))),
    }
}
