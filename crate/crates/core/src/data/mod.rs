//! In-memory labelled datasets and the readers that produce them.

mod cifar;
mod idx;
mod synth;

pub use cifar::{parse_cifar, read_cifar, CIFAR_RECORD};
pub use idx::{ingest_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_blobs, synth_glyphs, GlyphConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples stored contiguously in row-major order, values normally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, data: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::Composition(format!(
                "{} values cannot hold {} samples of shape {:?}",
                data.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            sample_shape,
            data,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks the chosen samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            data: t.into_data(),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Samples per class label.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Renames classes so that `order[k]` becomes label `k`.
    pub fn relabel(&self, order: &[usize]) -> Result<Dataset> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.num_classes).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "class order must be a permutation of 0..{}",
                self.num_classes
            )));
        }
        let mut rank = vec![0; self.num_classes];
        for (k, &c) in order.iter().enumerate() {
            rank[c] = k;
        }
        let mut out = self.clone();
        for l in &mut out.labels {
            *l = rank[*l];
        }
        Ok(out)
    }
}
