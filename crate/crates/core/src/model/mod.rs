//! The compressible-model contract and a desk-scale reference classifier.
//!
//! Layer weights are stored `fan_in × fan_out`, so a batch `X` (b×fan_in) maps
//! to `X·W + b`. A factorized layer computes `(X·U)·W_k + b`.

mod data;
mod train;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{CompressionError, CompressionScheme, LayerParam, LayerSet, LayerSpec};
use crate::linalg::{LinalgError, Matrix, TruncatedFactors};

pub use data::{
    generate_dataset, teacher_model, Dataset, Split, INPUT_DIM, NUM_CLASSES, TEACHER_HIDDEN,
    TEST_SAMPLES, TRAIN_SAMPLES,
};
pub use train::{train, EpochStats, LrSchedule, TrainConfig, TrainMode, TrainOutcome};

/// Hidden widths of the reference classifier.
pub const REFERENCE_HIDDEN: [usize; 3] = [256, 256, 256];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => ndarray::Zip::from(grad)
                .and(out)
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                }),
            Activation::Tanh => ndarray::Zip::from(grad)
                .and(out)
                .for_each(|g, &y| *g *= 1.0 - y * y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: LayerParam,
    pub bias: Array1<f64>,
}

/// Feed-forward classifier whose weight matrices may be dense or factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressibleModel {
    layers: Vec<Layer>,
    layer_set: LayerSet,
    activation: Activation,
}

/// Gradient of one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightGrad {
    Dense(Array2<f64>),
    Factorized { u: Array2<f64>, w: Array2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: WeightGrad,
    pub bias: Array1<f64>,
}

struct ForwardCache {
    /// Input to each layer; the last entry is the logits.
    activations: Vec<Array2<f64>>,
    /// `X·U` for factorized layers.
    projections: Vec<Option<Array2<f64>>>,
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what.to_string()))
    }
}

fn argmax_row(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rounds to the nearest `f32`, the checkpoint storage precision.
fn to_storage_precision(v: f64) -> f64 {
    v as f32 as f64
}

impl CompressibleModel {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::Invalid("model needs at least one layer".into()));
        }
        for l in &layers {
            if l.weight.shape() != (l.spec.rows, l.spec.cols) {
                return Err(ModelError::Invalid(format!(
                    "layer {}: weight shape {:?} does not match spec {}x{}",
                    l.spec.name,
                    l.weight.shape(),
                    l.spec.rows,
                    l.spec.cols
                )));
            }
            if l.bias.len() != l.spec.cols {
                return Err(ModelError::Invalid(format!(
                    "layer {}: bias length {} != {}",
                    l.spec.name,
                    l.bias.len(),
                    l.spec.cols
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].spec.cols != pair[1].spec.rows {
                return Err(ModelError::Invalid(format!(
                    "layer {} outputs {} features but {} expects {}",
                    pair[0].spec.name, pair[0].spec.cols, pair[1].spec.name, pair[1].spec.rows
                )));
            }
        }
        let layer_set = LayerSet::new(layers.iter().map(|l| l.spec.clone()).collect())?;
        Ok(CompressibleModel {
            layers,
            layer_set,
            activation,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_set(&self) -> &LayerSet {
        &self.layer_set
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.cols
    }

    pub fn is_factorized(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.weight, LayerParam::Factorized(_)))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.param_count() + l.bias.len())
            .sum()
    }

    /// Scheme implied by the current storage of each searchable layer.
    pub fn current_scheme(&self) -> CompressionScheme {
        CompressionScheme::new(
            self.layers
                .iter()
                .filter(|l| l.spec.searchable)
                .map(|l| l.weight.rank_choice())
                .collect(),
        )
    }

    /// Dense equivalent of every layer weight, keyed by layer name.
    pub fn dense_weights(&self) -> Result<BTreeMap<String, Matrix>> {
        self.layers
            .iter()
            .map(|l| Ok((l.spec.name.clone(), l.weight.to_dense()?)))
            .collect()
    }

    /// Copy with every named weight replaced by the given dense matrix.
    /// Values are rounded to storage precision.
    pub fn with_dense_weights(&self, weights: &BTreeMap<String, Matrix>) -> Result<Self> {
        let params = weights
            .iter()
            .map(|(k, v)| (k.clone(), LayerParam::Dense(v.clone())))
            .collect();
        self.with_params(&params)
    }

    /// Copy with every named weight replaced, dense or factorized.
    /// Values are rounded to storage precision.
    pub fn with_params(&self, params: &BTreeMap<String, LayerParam>) -> Result<Self> {
        let mut out = self.with_params_exact(params)?;
        out.round_to_storage_precision();
        Ok(out)
    }

    /// As [`with_params`](Self::with_params) without rounding, for search-time evaluation.
    pub fn with_params_exact(&self, params: &BTreeMap<String, LayerParam>) -> Result<Self> {
        let mut layers = self.layers.clone();
        for (name, p) in params {
            let layer = layers
                .iter_mut()
                .find(|l| &l.spec.name == name)
                .ok_or_else(|| ModelError::Invalid(format!("unknown layer {name}")))?;
            layer.weight = p.clone();
        }
        Self::from_layers(layers, self.activation)
    }

    pub fn with_dense_weights_exact(&self, weights: &BTreeMap<String, Matrix>) -> Result<Self> {
        let params = weights
            .iter()
            .map(|(k, v)| (k.clone(), LayerParam::Dense(v.clone())))
            .collect();
        self.with_params_exact(&params)
    }

    pub fn biases(&self) -> BTreeMap<String, Vec<f64>> {
        self.layers
            .iter()
            .map(|l| (l.spec.name.clone(), l.bias.to_vec()))
            .collect()
    }

    pub fn set_bias(&mut self, layer: &str, values: Vec<f64>) -> Result<()> {
        let l = self
            .layers
            .iter_mut()
            .find(|l| l.spec.name == layer)
            .ok_or_else(|| ModelError::Invalid(format!("unknown layer {layer}")))?;
        if values.len() != l.bias.len() {
            return Err(ModelError::Invalid(format!(
                "bias for {layer} needs {} values, got {}",
                l.bias.len(),
                values.len()
            )));
        }
        l.bias = Array1::from(values);
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, so checkpoints store it exactly.
    pub fn round_to_storage_precision(&mut self) {
        for (_, slice) in self.param_slices_mut() {
            for v in slice {
                *v = to_storage_precision(*v);
            }
        }
    }

    /// Mutable views of every parameter block in a fixed order: per layer the
    /// weight (`name` or `name.u`, `name.w`) then the bias (`name.bias`).
    pub fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let name = l.spec.name.clone();
            match &mut l.weight {
                LayerParam::Dense(m) => out.push((
                    name.clone(),
                    m.array_mut().as_slice_mut().expect("standard layout"),
                )),
                LayerParam::Factorized(t) => {
                    out.push((
                        format!("{name}.u"),
                        t.u_k.array_mut().as_slice_mut().expect("standard layout"),
                    ));
                    out.push((
                        format!("{name}.w"),
                        t.w_k.array_mut().as_slice_mut().expect("standard layout"),
                    ));
                }
            }
            out.push((
                format!("{name}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }

    fn forward_cached(&self, x: &Array2<f64>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut projections = Vec::with_capacity(self.layers.len());
        activations.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let input = &activations[i];
            let (mut z, proj) = match &l.weight {
                LayerParam::Dense(w) => (input.dot(w.as_array()), None),
                LayerParam::Factorized(t) => {
                    let h = input.dot(t.u_k.as_array());
                    (h.dot(t.w_k.as_array()), Some(h))
                }
            };
            z += &l.bias;
            if i != last {
                self.activation.apply(&mut z);
            }
            activations.push(z);
            projections.push(proj);
        }
        ForwardCache {
            activations,
            projections,
        }
    }

    /// Output logits for a batch.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::Invalid(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let out = self
            .forward_cached(x)
            .activations
            .pop()
            .expect("at least one layer");
        check_finite(&out, "forward pass")?;
        Ok(out)
    }

    /// Sign pattern of every hidden-unit output (true where the unit is active).
    /// Used to detect activation kinks when comparing against finite differences.
    pub fn activation_pattern(&self, x: &Array2<f64>) -> Vec<bool> {
        let cache = self.forward_cached(x);
        let hidden = &cache.activations[1..cache.activations.len() - 1];
        hidden.iter().flat_map(|a| a.iter().map(|&v| v > 0.0)).collect()
    }

    /// Predicted class per row (first maximum wins ties).
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits.axis_iter(Axis(0)).map(argmax_row).collect())
    }

    /// Mean softmax cross-entropy over the batch together with its gradients.
    /// Also returns the number of misclassified rows.
    pub fn loss_and_grads(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Vec<LayerGrad>, usize)> {
        let cache = self.forward_cached(x);
        let logits = cache.activations.last().expect("logits present");
        check_finite(logits, "forward pass")?;
        let n = labels.len() as f64;

        let mut loss = 0.0;
        let mut wrong = 0;
        let mut delta = logits.clone();
        for (mut row, &y) in delta.axis_iter_mut(Axis(0)).zip(labels) {
            if argmax_row(row.view()) != y {
                wrong += 1;
            }
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let shifted_target = row[y] - max;
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            loss += sum.ln() - shifted_target;
            row /= sum;
            row[y] -= 1.0;
        }
        loss /= n;
        delta /= n;

        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let bias = delta.sum_axis(Axis(0));
            let (weight, next) = match (&l.weight, &cache.projections[i]) {
                (LayerParam::Dense(w), _) => {
                    let gw = input.t().dot(&delta);
                    let back = (i > 0).then(|| delta.dot(&w.as_array().t()));
                    (WeightGrad::Dense(gw), back)
                }
                (LayerParam::Factorized(t), Some(h)) => {
                    let gw = h.t().dot(&delta);
                    let dh = delta.dot(&t.w_k.as_array().t());
                    let gu = input.t().dot(&dh);
                    let back = (i > 0).then(|| dh.dot(&t.u_k.as_array().t()));
                    (WeightGrad::Factorized { u: gu, w: gw }, back)
                }
                (LayerParam::Factorized(_), None) => unreachable!("projection cached"),
            };
            grads.push(LayerGrad { weight, bias });
            if let Some(mut back) = next {
                self.activation.backprop(input, &mut back);
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, grads, wrong))
    }

    /// Mean cross-entropy loss only.
    pub fn loss(&self, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let mut loss = 0.0;
        for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += sum.ln() + max - row[y];
        }
        Ok(loss / labels.len() as f64)
    }

    /// Gradient step `θ ← θ − lr·g`.
    pub(crate) fn apply_gradients(&mut self, grads: &[LayerGrad], lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(grads) {
            match (&mut l.weight, &g.weight) {
                (LayerParam::Dense(w), WeightGrad::Dense(gw)) => {
                    w.array_mut().scaled_add(-lr, gw);
                }
                (LayerParam::Factorized(t), WeightGrad::Factorized { u, w }) => {
                    t.u_k.array_mut().scaled_add(-lr, u);
                    t.w_k.array_mut().scaled_add(-lr, w);
                }
                _ => unreachable!("gradient layout follows parameter layout"),
            }
            l.bias.scaled_add(-lr, &g.bias);
        }
    }
}

/// Fraction of misclassified samples.
pub fn evaluate(model: &CompressibleModel, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 1024;
    let mut wrong = 0usize;
    for (start, chunk) in data
        .inputs
        .axis_chunks_iter(Axis(0), CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
    {
        let preds = model.predict(&chunk.to_owned())?;
        wrong += preds
            .iter()
            .zip(&data.labels[start..start + preds.len()])
            .filter(|(p, y)| p != y)
            .count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Seeded 32→256→256→256→10 rectifier classifier, all layers dense and searchable.
pub fn init_reference_model(seed: u64) -> CompressibleModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![INPUT_DIM];
    dims.extend(REFERENCE_HIDDEN);
    dims.push(NUM_CLASSES);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let w = Matrix::random_normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), &mut rng);
            Layer {
                spec: LayerSpec::new(format!("W{}", i + 1), fan_in, fan_out, true),
                weight: LayerParam::Dense(w),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    let mut model =
        CompressibleModel::from_layers(layers, Activation::Relu).expect("reference shapes agree");
    model.round_to_storage_precision();
    model
}

/// Builds factorized storage from explicit factors (checkpoint loading, tests).
pub fn factorized_param(u_k: Matrix, w_k: Matrix) -> Result<LayerParam> {
    Ok(LayerParam::Factorized(TruncatedFactors::new(u_k, w_k)?))
}
