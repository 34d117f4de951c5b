//! Compression schemes, FLOPS accounting and application of schemes to layer weights.
//!
//! FLOPS are multiply–accumulate counts of the weight-matrix products only: a dense
//! `m×n` layer costs `m·n`, a rank-`k` factorization costs `k·(m+n)`. Biases,
//! activations and embedding lookups are not counted.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SvdFactors, TruncatedFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("scheme has {got} choices but the layer set has {expected} searchable layers")]
    SchemeLength { expected: usize, got: usize },
    #[error("layer {layer}: rank {rank} exceeds min dimension {max}")]
    RankOutOfRange { layer: String, rank: usize, max: usize },
    #[error("layer {layer}: rank must be positive")]
    ZeroRank { layer: String },
    #[error("missing weights for layer {0}")]
    MissingLayer(String),
    #[error("duplicate layer name {0}")]
    DuplicateLayer(String),
    #[error("layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, CompressionError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub searchable: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, searchable: bool) -> Self {
        LayerSpec {
            name: name.into(),
            rows,
            cols,
            searchable,
        }
    }

    pub fn min_dim(&self) -> usize {
        self.rows.min(self.cols)
    }

    pub fn dense_flops(&self) -> u64 {
        layer_flops(self.rows, self.cols, RankChoice::Full)
    }
}

/// Ordered list of layers with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet {
    layers: Vec<LayerSpec>,
}

impl LayerSet {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(CompressionError::DuplicateLayer(l.name.clone()));
            }
        }
        Ok(LayerSet { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn searchable(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.searchable)
    }

    pub fn searchable_count(&self) -> usize {
        self.searchable().count()
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn baseline_flops(&self) -> u64 {
        self.layers.iter().map(LayerSpec::dense_flops).sum()
    }
}

/// Per-layer rank choice: keep the dense matrix or factorize at rank `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankChoice {
    Full,
    Rank(usize),
}

impl RankChoice {
    /// Ordering key for tie-breaking: ranks ascending, `Full` after every rank.
    pub fn order_key(self) -> usize {
        match self {
            RankChoice::Full => usize::MAX,
            RankChoice::Rank(k) => k,
        }
    }

    /// Whether factorizing an `rows×cols` layer with this choice saves MACs.
    pub fn is_beneficial(self, rows: usize, cols: usize) -> bool {
        match self {
            RankChoice::Full => false,
            RankChoice::Rank(k) => k * (rows + cols) < rows * cols,
        }
    }
}

impl fmt::Display for RankChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankChoice::Full => f.write_str("Full"),
            RankChoice::Rank(k) => write!(f, "{k}"),
        }
    }
}

// Serialized as the string "full" or a bare integer rank.
impl Serialize for RankChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RankChoice::Full => s.serialize_str("full"),
            RankChoice::Rank(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for RankChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Rank(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Rank(0) => Err(serde::de::Error::custom("rank must be positive")),
            Raw::Rank(k) => Ok(RankChoice::Rank(k as usize)),
            Raw::Word(w) if w.eq_ignore_ascii_case("full") => Ok(RankChoice::Full),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"full\" or a positive rank, got {w:?}"
            ))),
        }
    }
}

/// One rank choice per searchable layer, in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompressionScheme {
    pub choices: Vec<RankChoice>,
}

impl CompressionScheme {
    pub fn new(choices: Vec<RankChoice>) -> Self {
        CompressionScheme { choices }
    }

    pub fn all_full(layers: &LayerSet) -> Self {
        CompressionScheme::new(vec![RankChoice::Full; layers.searchable_count()])
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn order_key(&self) -> Vec<usize> {
        self.choices.iter().map(|c| c.order_key()).collect()
    }

    /// Checks length and that every rank fits its layer.
    pub fn validate(&self, layers: &LayerSet) -> Result<()> {
        let expected = layers.searchable_count();
        if self.choices.len() != expected {
            return Err(CompressionError::SchemeLength {
                expected,
                got: self.choices.len(),
            });
        }
        for (spec, choice) in layers.searchable().zip(&self.choices) {
            if let RankChoice::Rank(k) = *choice {
                if k == 0 {
                    return Err(CompressionError::ZeroRank {
                        layer: spec.name.clone(),
                    });
                }
                if k > spec.min_dim() {
                    return Err(CompressionError::RankOutOfRange {
                        layer: spec.name.clone(),
                        rank: k,
                        max: spec.min_dim(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Pairs each searchable layer with its choice.
    pub fn per_layer<'a>(
        &'a self,
        layers: &'a LayerSet,
    ) -> impl Iterator<Item = (&'a LayerSpec, RankChoice)> + 'a {
        layers.searchable().zip(self.choices.iter().copied())
    }
}

impl fmt::Display for CompressionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, c) in self.choices.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str(")")
    }
}

pub fn layer_flops(rows: usize, cols: usize, choice: RankChoice) -> u64 {
    match choice {
        RankChoice::Full => (rows * cols) as u64,
        RankChoice::Rank(k) => (k * (rows + cols)) as u64,
    }
}

/// Summed MACs of the compressed model; non-searchable layers stay dense.
pub fn compressed_flops(layers: &LayerSet, s: &CompressionScheme) -> Result<u64> {
    let expected = layers.searchable_count();
    if s.len() != expected {
        return Err(CompressionError::SchemeLength {
            expected,
            got: s.len(),
        });
    }
    let mut choices = s.choices.iter();
    Ok(layers
        .layers()
        .iter()
        .map(|l| {
            let choice = if l.searchable {
                *choices.next().expect("length checked")
            } else {
                RankChoice::Full
            };
            layer_flops(l.rows, l.cols, choice)
        })
        .sum())
}

pub fn scheme_speedup(layers: &LayerSet, s: &CompressionScheme) -> Result<f64> {
    let new = compressed_flops(layers, s)?;
    Ok(layers.baseline_flops() as f64 / new as f64)
}

/// Singular value decompositions of the searchable layers of one weight version.
#[derive(Debug, Clone, Default)]
pub struct SvdCache {
    factors: HashMap<String, SvdFactors>,
}

impl SvdCache {
    pub fn build(layers: &LayerSet, weights: &BTreeMap<String, Matrix>) -> Result<Self> {
        let mut factors = HashMap::new();
        for spec in layers.searchable() {
            let m = lookup(weights, spec)?;
            factors.insert(spec.name.clone(), linalg::svd(m)?);
        }
        Ok(SvdCache { factors })
    }

    pub fn get(&self, name: &str) -> Option<&SvdFactors> {
        self.factors.get(name)
    }
}

fn lookup<'a>(weights: &'a BTreeMap<String, Matrix>, spec: &LayerSpec) -> Result<&'a Matrix> {
    let m = weights
        .get(&spec.name)
        .ok_or_else(|| CompressionError::MissingLayer(spec.name.clone()))?;
    if m.shape() != (spec.rows, spec.cols) {
        return Err(CompressionError::ShapeMismatch {
            layer: spec.name.clone(),
            expected: (spec.rows, spec.cols),
            found: m.shape(),
        });
    }
    Ok(m)
}

fn truncated_for(
    spec: &LayerSpec,
    m: &Matrix,
    k: usize,
    cache: Option<&SvdCache>,
) -> Result<TruncatedFactors> {
    let owned;
    let f = match cache.and_then(|c| c.get(&spec.name)) {
        Some(f) => f,
        None => {
            owned = linalg::svd(m)?;
            &owned
        }
    };
    Ok(linalg::truncate(f, k)?)
}

/// Replaces each `Rank(k)` layer by its best rank-`k` approximation, keeping dense shapes.
pub fn apply_scheme_full(
    layers: &LayerSet,
    weights: &BTreeMap<String, Matrix>,
    s: &CompressionScheme,
) -> Result<BTreeMap<String, Matrix>> {
    apply_scheme_full_cached(layers, weights, s, None)
}

/// As [`apply_scheme_full`], reusing decompositions from `cache` when it has them.
/// The cache must have been built from these same weights.
pub fn apply_scheme_full_cached(
    layers: &LayerSet,
    weights: &BTreeMap<String, Matrix>,
    s: &CompressionScheme,
    cache: Option<&SvdCache>,
) -> Result<BTreeMap<String, Matrix>> {
    s.validate(layers)?;
    let mut out = weights.clone();
    for (spec, choice) in s.per_layer(layers) {
        let m = lookup(weights, spec)?;
        if let RankChoice::Rank(k) = choice {
            let t = truncated_for(spec, m, k, cache)?;
            out.insert(spec.name.clone(), linalg::reconstruct(&t)?);
        }
    }
    Ok(out)
}

/// Searchable layer parameters in either storage form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParam {
    Dense(Matrix),
    Factorized(TruncatedFactors),
}

impl LayerParam {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerParam::Dense(m) => m.shape(),
            LayerParam::Factorized(t) => (t.rows(), t.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerParam::Dense(m) => m.rows() * m.cols(),
            LayerParam::Factorized(t) => t.param_count(),
        }
    }

    pub fn rank_choice(&self) -> RankChoice {
        match self {
            LayerParam::Dense(_) => RankChoice::Full,
            LayerParam::Factorized(t) => RankChoice::Rank(t.rank),
        }
    }

    /// Dense equivalent (`u_k · w_k` for factorized layers).
    pub fn to_dense(&self) -> Result<Matrix> {
        match self {
            LayerParam::Dense(m) => Ok(m.clone()),
            LayerParam::Factorized(t) => Ok(linalg::reconstruct(t)?),
        }
    }
}

/// Stores each `Rank(k)` layer as its truncated factor pair; `Full` layers stay dense.
pub fn apply_scheme_factorized(
    layers: &LayerSet,
    weights: &BTreeMap<String, Matrix>,
    s: &CompressionScheme,
) -> Result<BTreeMap<String, LayerParam>> {
    s.validate(layers)?;
    let mut out: BTreeMap<String, LayerParam> = weights
        .iter()
        .map(|(k, v)| (k.clone(), LayerParam::Dense(v.clone())))
        .collect();
    for (spec, choice) in s.per_layer(layers) {
        let m = lookup(weights, spec)?;
        if let RankChoice::Rank(k) = choice {
            let t = truncated_for(spec, m, k, None)?;
            out.insert(spec.name.clone(), LayerParam::Factorized(t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub searchable: bool,
    pub rows: usize,
    pub cols: usize,
    pub orig_flops: u64,
    /// `None` for layers outside the search.
    pub rank_choice: Option<RankChoice>,
    pub new_flops: u64,
    pub layer_speedup: f64,
    /// Set when a rank is chosen that does not reduce MACs.
    pub non_beneficial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub layers: Vec<LayerFlops>,
    pub orig_total: u64,
    pub new_total: u64,
    pub overall_speedup: f64,
}

impl FlopsBreakdown {
    pub fn warnings(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.non_beneficial)
            .map(|l| {
                format!(
                    "layer {}: rank {} does not reduce FLOPS ({} >= {})",
                    l.name,
                    l.rank_choice.expect("only ranked layers are flagged"),
                    l.new_flops,
                    l.orig_flops
                )
            })
            .collect()
    }
}

pub fn breakdown(layers: &LayerSet, s: &CompressionScheme) -> Result<FlopsBreakdown> {
    s.validate(layers)?;
    let mut choices = s.choices.iter();
    let rows: Vec<LayerFlops> = layers
        .layers()
        .iter()
        .map(|l| {
            let rank_choice = l
                .searchable
                .then(|| *choices.next().expect("length validated"));
            let effective = rank_choice.unwrap_or(RankChoice::Full);
            let orig_flops = l.dense_flops();
            let new_flops = layer_flops(l.rows, l.cols, effective);
            LayerFlops {
                name: l.name.clone(),
                searchable: l.searchable,
                rows: l.rows,
                cols: l.cols,
                orig_flops,
                rank_choice,
                new_flops,
                layer_speedup: orig_flops as f64 / new_flops as f64,
                non_beneficial: matches!(effective, RankChoice::Rank(_))
                    && !effective.is_beneficial(l.rows, l.cols),
            }
        })
        .collect();
    let orig_total: u64 = rows.iter().map(|r| r.orig_flops).sum();
    let new_total: u64 = rows.iter().map(|r| r.new_flops).sum();
    Ok(FlopsBreakdown {
        layers: rows,
        orig_total,
        new_total,
        overall_speedup: orig_total as f64 / new_total as f64,
    })
}
