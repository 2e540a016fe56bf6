//! Datasets, partitions and minibatching.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use partition::{dirichlet_partition, group_partition, shard_partition, ClientSplit, Partition};
pub use synth::{read_container, synth_generate, write_container, SynthData, SynthSpec};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::Rng;

/// Row-major inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Config("dataset needs input_dim >= 1 and num_classes >= 1".into()));
        }
        crate::nn::check_len("dataset inputs", labels.len() * input_dim, inputs.len())?;
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Gathers the given rows into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.input_dim).expect("non-empty index list")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let batch = self.batch(indices);
        LabeledDataset {
            inputs: batch.inputs().to_vec(),
            labels: batch.labels().to_vec(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Per-class counts over the given rows.
    pub fn histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// Shuffles `indices` and chunks them into batches of at most `batch_size`.
pub fn minibatches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
