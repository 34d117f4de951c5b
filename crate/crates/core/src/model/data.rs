//! Seeded teacher–student classification data.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activation, CompressibleModel, Layer};
use crate::compression::{LayerParam, LayerSpec};
use crate::linalg::Matrix;

pub const INPUT_DIM: usize = 32;
pub const TEACHER_HIDDEN: usize = 64;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_SAMPLES: usize = 4096;
pub const TEST_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, split: Split) -> Self {
        assert!(!labels.is_empty(), "dataset must be non-empty");
        assert_eq!(inputs.nrows(), labels.len(), "one label per input row");
        assert!(labels.iter().all(|&l| l < NUM_CLASSES), "label out of range");
        Dataset {
            inputs,
            labels,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Little-endian bytes of inputs then labels; used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.inputs.len() * 8 + self.labels.len() * 4);
        for v in self.inputs.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn teacher_from_rng(rng: &mut ChaCha8Rng) -> CompressibleModel {
    let dims = [(INPUT_DIM, TEACHER_HIDDEN), (TEACHER_HIDDEN, NUM_CLASSES)];
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let w = draw_matrix(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
            Layer {
                spec: LayerSpec::new(format!("T{}", i + 1), fan_in, fan_out, true),
                weight: LayerParam::Dense(Matrix::from_array(w).expect("finite draws")),
                bias: ndarray::Array1::zeros(fan_out),
            }
        })
        .collect();
    CompressibleModel::from_layers(layers, Activation::Tanh).expect("teacher shapes are consistent")
}

/// The fixed 32→64→10 tanh network that labels the data for `seed`.
pub fn teacher_model(seed: u64) -> CompressibleModel {
    teacher_from_rng(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Train and test splits. The random stream yields, in order, the teacher
/// weights, the train inputs and the test inputs, so the splits never share rows.
pub fn generate_dataset(seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = teacher_from_rng(&mut rng);
    let train_x = draw_matrix(&mut rng, TRAIN_SAMPLES, INPUT_DIM, 1.0);
    let test_x = draw_matrix(&mut rng, TEST_SAMPLES, INPUT_DIM, 1.0);
    let label = |x: Array2<f64>, split| {
        let labels = teacher.predict(&x).expect("teacher forward is finite");
        Dataset::new(x, labels, split)
    };
    (label(train_x, Split::Train), label(test_x, Split::Test))
}
