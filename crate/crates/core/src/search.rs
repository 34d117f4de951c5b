//! Rank-scheme search: energy-based search spaces, rewards, a REINFORCE
//! controller and an exhaustive oracle.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{
    apply_scheme_full_cached, compressed_flops, scheme_speedup, CompressionError,
    CompressionScheme, LayerSet, RankChoice, SvdCache,
};
use crate::linalg;
use crate::model::{evaluate, CompressibleModel, Dataset, ModelError};

/// Candidate levels per searchable layer.
pub const LEVELS: usize = 5;
/// Largest space the exhaustive search will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;
pub const MIN_ENERGY: f64 = 0.3;
pub const MAX_ENERGY: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("energy range [{lo}, {hi}] must satisfy 0.3 <= lo < hi <= 0.99")]
    InvalidEnergyRange { lo: f64, hi: f64 },
    #[error("layer {layer}: no candidate rank reduces FLOPS")]
    EmptyCandidates { layer: String },
    #[error("no sampled scheme reaches speedup {target} ({sampled} schemes evaluated)")]
    NoFeasibleScheme { target: f64, sampled: usize },
    #[error("search space has {size} schemes, above the exhaustive limit {limit}")]
    SpaceTooLarge { size: u128, limit: usize },
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRange {
    pub lo: f64,
    pub hi: f64,
}

impl EnergyRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(MIN_ENERGY..=MAX_ENERGY).contains(&lo) || !(MIN_ENERGY..=MAX_ENERGY).contains(&hi) || lo >= hi {
            return Err(SearchError::InvalidEnergyRange { lo, hi });
        }
        Ok(EnergyRange { lo, hi })
    }

    /// The `LEVELS` energies linearly spaced over the range, ascending.
    pub fn levels(&self) -> [f64; LEVELS] {
        let step = (self.hi - self.lo) / (LEVELS - 1) as f64;
        std::array::from_fn(|i| {
            if i == LEVELS - 1 {
                self.hi
            } else {
                self.lo + step * i as f64
            }
        })
    }
}

/// Per-layer candidate choices, ordered from least to most compressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layer_names: Vec<String>,
    pub candidates: Vec<Vec<RankChoice>>,
    pub target_speedup: f64,
    pub energy_range: EnergyRange,
}

impl SearchSpace {
    pub fn size(&self) -> u128 {
        self.candidates.iter().map(|c| c.len() as u128).product()
    }

    pub fn scheme(&self, levels: &[usize]) -> CompressionScheme {
        CompressionScheme::new(
            self.candidates
                .iter()
                .zip(levels)
                .map(|(c, &l)| c[l])
                .collect(),
        )
    }

    /// Scheme with every layer at its most compressed candidate.
    pub fn most_compressed(&self) -> CompressionScheme {
        let levels: Vec<usize> = self.candidates.iter().map(|c| c.len() - 1).collect();
        self.scheme(&levels)
    }

    /// Highest speedup any scheme in the space reaches.
    pub fn max_speedup(&self, layers: &LayerSet) -> Result<f64> {
        Ok(scheme_speedup(layers, &self.most_compressed())?)
    }
}

/// Candidate ranks for one layer from its singular values.
///
/// Ranks come from the energies spread across `range`. A rank equal to or
/// below its lower neighbour is bumped to neighbour + 1 (capped at the smaller
/// dimension); ranks that do not save FLOPS become `Full`.
pub fn layer_candidates(
    f: &linalg::SvdFactors,
    rows: usize,
    cols: usize,
    range: EnergyRange,
) -> Vec<RankChoice> {
    let cap = rows.min(cols);
    let mut ranks: Vec<usize> = range
        .levels()
        .iter()
        .map(|&e| linalg::energy_to_rank(f, e))
        .collect();
    for i in 1..ranks.len() {
        if ranks[i] <= ranks[i - 1] {
            ranks[i] = (ranks[i - 1] + 1).min(cap);
        }
    }
    ranks
        .iter()
        .rev()
        .map(|&k| {
            let c = RankChoice::Rank(k);
            if c.is_beneficial(rows, cols) {
                c
            } else {
                RankChoice::Full
            }
        })
        .collect()
}

pub fn construct_search_space(
    layers: &LayerSet,
    svd_cache: &SvdCache,
    target: f64,
    range: EnergyRange,
) -> Result<SearchSpace> {
    let mut names = Vec::new();
    let mut candidates = Vec::new();
    for spec in layers.searchable() {
        let f = svd_cache
            .get(&spec.name)
            .ok_or_else(|| CompressionError::MissingLayer(spec.name.clone()))?;
        let c = layer_candidates(f, spec.rows, spec.cols, range);
        if c.iter().all(|c| *c == RankChoice::Full) {
            return Err(SearchError::EmptyCandidates {
                layer: spec.name.clone(),
            });
        }
        names.push(spec.name.clone());
        candidates.push(c);
    }
    Ok(SearchSpace {
        layer_names: names,
        candidates,
        target_speedup: target,
        energy_range: range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub quality_weight: f64,
    pub violation_penalty_scale: f64,
    /// Error of the model being searched, before compression.
    pub baseline_error: f64,
}

impl RewardSpec {
    pub fn with_baseline(baseline_error: f64) -> Self {
        RewardSpec {
            quality_weight: 10.0,
            violation_penalty_scale: 10.0,
            baseline_error,
        }
    }

    /// `R` for schemes meeting the target, `R_v` for those that miss it.
    pub fn score(&self, speedup: f64, target: f64, scheme_error: f64) -> f64 {
        if speedup >= target {
            self.quality_weight * (self.baseline_error - scheme_error)
        } else {
            -self.violation_penalty_scale * (1.0 - speedup / target)
        }
    }
}

/// Quality of a scheme applied without retraining. Must be deterministic.
pub trait SchemeEvaluator: Sync {
    fn scheme_error(&self, scheme: &CompressionScheme) -> Result<f64>;
}

impl<F> SchemeEvaluator for F
where
    F: Fn(&CompressionScheme) -> Result<f64> + Sync,
{
    fn scheme_error(&self, scheme: &CompressionScheme) -> Result<f64> {
        self(scheme)
    }
}

/// Evaluates schemes by compressing a copy of a frozen model (full-matrix form)
/// and measuring its error on a fixed dataset. Results are memoized per scheme.
pub struct ModelEvaluator<'a> {
    model: &'a CompressibleModel,
    data: &'a Dataset,
    cache: SvdCache,
    memo: Mutex<HashMap<CompressionScheme, f64>>,
}

impl<'a> ModelEvaluator<'a> {
    pub fn new(model: &'a CompressibleModel, data: &'a Dataset) -> Result<Self> {
        let cache = SvdCache::build(model.layer_set(), &model.dense_weights()?)?;
        Ok(ModelEvaluator {
            model,
            data,
            cache,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn svd_cache(&self) -> &SvdCache {
        &self.cache
    }

    /// Error of the uncompressed model.
    pub fn baseline_error(&self) -> Result<f64> {
        Ok(evaluate(self.model, self.data)?)
    }

    pub fn distinct_evaluations(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }
}

impl SchemeEvaluator for ModelEvaluator<'_> {
    fn scheme_error(&self, scheme: &CompressionScheme) -> Result<f64> {
        if let Some(&e) = self.memo.lock().expect("memo lock").get(scheme) {
            return Ok(e);
        }
        let weights = self.model.dense_weights()?;
        let compressed =
            apply_scheme_full_cached(self.model.layer_set(), &weights, scheme, Some(&self.cache))?;
        let candidate = self.model.with_dense_weights_exact(&compressed)?;
        let e = evaluate(&candidate, self.data)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(scheme.clone(), e);
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub episodes: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub baseline_decay: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            episodes: 200,
            batch: 8,
            learning_rate: 0.15,
            baseline_decay: 0.9,
        }
    }
}

/// Independent categorical policy per layer, with a moving-average reward baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub logits: Vec<Vec<f64>>,
    pub baseline: Option<f64>,
    pub rng_seed: u64,
    pub episode: usize,
}

impl ControllerState {
    pub fn new(space: &SearchSpace, seed: u64) -> Self {
        ControllerState {
            logits: space.candidates.iter().map(|c| vec![0.0; c.len()]).collect(),
            baseline: None,
            rng_seed: seed,
            episode: 0,
        }
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        self.probabilities()
            .iter()
            .map(|p| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            })
            .collect()
    }

    /// One policy-gradient step from a batch of (levels, reward) samples.
    fn update(&mut self, samples: &[(Vec<usize>, f64)], cfg: &ControllerConfig) {
        let mean = samples.iter().map(|(_, r)| r).sum::<f64>() / samples.len() as f64;
        let baseline = *self.baseline.get_or_insert(mean);
        let probs = self.probabilities();
        let scale = cfg.learning_rate / samples.len() as f64;
        for (levels, reward) in samples {
            let advantage = reward - baseline;
            for (layer, &chosen) in levels.iter().enumerate() {
                for (i, logit) in self.logits[layer].iter_mut().enumerate() {
                    let indicator = if i == chosen { 1.0 } else { 0.0 };
                    *logit += scale * advantage * (indicator - probs[layer][i]);
                }
            }
        }
        self.baseline = Some(cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * mean);
        self.episode += 1;
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// A scored scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scheme: CompressionScheme,
    pub reward: f64,
    pub speedup: f64,
    pub error: f64,
    pub flops: u64,
}

impl Candidate {
    /// Higher reward wins, then fewer FLOPS, then the smaller rank tuple.
    fn beats(&self, other: &Candidate) -> bool {
        if self.reward != other.reward {
            return self.reward > other.reward;
        }
        if self.flops != other.flops {
            return self.flops < other.flops;
        }
        self.scheme.order_key() < other.scheme.order_key()
    }
}

fn score(
    layers: &LayerSet,
    scheme: CompressionScheme,
    target: f64,
    spec: &RewardSpec,
    eval: &dyn SchemeEvaluator,
) -> Result<Candidate> {
    let speedup = scheme_speedup(layers, &scheme)?;
    let flops = compressed_flops(layers, &scheme)?;
    let error = eval.scheme_error(&scheme)?;
    Ok(Candidate {
        reward: spec.score(speedup, target, error),
        scheme,
        speedup,
        error,
        flops,
    })
}

/// Reward of one scheme (evaluated without retraining).
pub fn reward(
    layers: &LayerSet,
    scheme: &CompressionScheme,
    target: f64,
    spec: &RewardSpec,
    eval: &dyn SchemeEvaluator,
) -> Result<f64> {
    Ok(score(layers, scheme.clone(), target, spec, eval)?.reward)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub mean_reward: f64,
    /// Moving-average baseline after this episode's update.
    pub reward_ema: f64,
    pub best_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub trace: Vec<EpisodeTrace>,
    pub sampled: usize,
    pub final_probabilities: Vec<Vec<f64>>,
}

fn update_best(best: &mut Option<Candidate>, c: &Candidate, target: f64) {
    if c.speedup < target {
        return;
    }
    if best.as_ref().map_or(true, |b| c.beats(b)) {
        *best = Some(c.clone());
    }
}

/// REINFORCE over the per-layer candidate levels. Returns the best
/// constraint-satisfying scheme sampled during the run.
pub fn reinforce_search(
    space: &SearchSpace,
    layers: &LayerSet,
    target: f64,
    spec: &RewardSpec,
    cfg: &ControllerConfig,
    seed: u64,
    eval: &dyn SchemeEvaluator,
) -> Result<SearchOutcome> {
    if cfg.episodes == 0 || cfg.batch == 0 {
        return Err(SearchError::InvalidConfig(
            "episodes and batch must be positive".into(),
        ));
    }
    let mut state = ControllerState::new(space, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Candidate> = None;
    let mut trace = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let draws: Vec<Vec<usize>> = (0..cfg.batch).map(|_| state.sample(&mut rng)).collect();
        // Evaluations are independent; collecting preserves draw order.
        let scored: Vec<Candidate> = draws
            .par_iter()
            .map(|levels| score(layers, space.scheme(levels), target, spec, eval))
            .collect::<Result<_>>()?;
        for c in &scored {
            update_best(&mut best, c, target);
        }
        let samples: Vec<(Vec<usize>, f64)> = draws
            .into_iter()
            .zip(scored.iter().map(|c| c.reward))
            .collect();
        state.update(&samples, cfg);
        trace.push(EpisodeTrace {
            episode,
            mean_reward: samples.iter().map(|(_, r)| r).sum::<f64>() / samples.len() as f64,
            reward_ema: state.baseline.expect("set by update"),
            best_reward: best.as_ref().map(|b| b.reward),
        });
    }

    let sampled = cfg.episodes * cfg.batch;
    let best = best.ok_or(SearchError::NoFeasibleScheme { target, sampled })?;
    Ok(SearchOutcome {
        best,
        trace,
        sampled,
        final_probabilities: state.probabilities(),
    })
}

fn levels_at(space: &SearchSpace, mut index: u128) -> Vec<usize> {
    let mut levels = vec![0; space.candidates.len()];
    for (slot, c) in levels.iter_mut().zip(&space.candidates).rev() {
        let n = c.len() as u128;
        *slot = (index % n) as usize;
        index /= n;
    }
    levels
}

/// Exhaustive search over every scheme in the space.
pub fn brute_force_search(
    space: &SearchSpace,
    layers: &LayerSet,
    target: f64,
    spec: &RewardSpec,
    eval: &dyn SchemeEvaluator,
) -> Result<Candidate> {
    let size = space.size();
    if size > BRUTE_FORCE_LIMIT as u128 {
        return Err(SearchError::SpaceTooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let scored: Vec<Candidate> = (0..size as usize)
        .into_par_iter()
        .map(|i| score(layers, space.scheme(&levels_at(space, i as u128)), target, spec, eval))
        .collect::<Result<_>>()?;
    let mut best = None;
    for c in &scored {
        update_best(&mut best, c, target);
    }
    best.ok_or(SearchError::NoFeasibleScheme {
        target,
        sampled: size as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSample {
    pub scheme: CompressionScheme,
    pub speedup: f64,
    pub error: f64,
}

/// Uniformly sampled schemes with their speedup and un-retrained error.
pub fn reward_histogram(
    space: &SearchSpace,
    layers: &LayerSet,
    n_samples: usize,
    seed: u64,
    eval: &dyn SchemeEvaluator,
) -> Result<Vec<HistogramSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schemes: Vec<CompressionScheme> = (0..n_samples)
        .map(|_| {
            let levels: Vec<usize> = space
                .candidates
                .iter()
                .map(|c| rng.gen_range(0..c.len()))
                .collect();
            space.scheme(&levels)
        })
        .collect();
    schemes
        .into_par_iter()
        .map(|scheme| {
            Ok(HistogramSample {
                speedup: scheme_speedup(layers, &scheme)?,
                error: eval.scheme_error(&scheme)?,
                scheme,
            })
        })
        .collect()
}
