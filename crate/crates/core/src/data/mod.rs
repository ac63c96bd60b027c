//! Datasets: loading, corruption, splitting, and synthetic generation.
//!
//! A [`Dataset`] couples an example tensor `[N, ...]` with class labels.
//! Datasets are immutable after construction; every transformation returns a
//! new value.

mod cifar;
mod corrupt;
mod idx;
mod synth;

pub use cifar::{load_cifar10, write_cifar10};
pub use corrupt::{corrupt_labels, replay_corruption, CorruptionRecord, CorruptionSpec};
pub use idx::{load_idx, write_idx};
pub use synth::{synthetic_blobs, synthetic_images, SyntheticImageSpec};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`; image data is normalized to `[0, 1]`.
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        examples: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        if examples.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} examples but {} labels",
                examples.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range (C={class_count})"
            )));
        }
        Ok(Dataset {
            examples,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (leading dimension stripped).
    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape[1..]
    }

    /// Gather the given rows into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.examples.row_len();
        let mut shape = self.examples.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.examples.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor {
                shape,
                data,
            },
            labels,
        )
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (examples, labels) = self.batch(indices);
        Dataset {
            examples,
            labels,
            class_count: self.class_count,
            name: name.into(),
        }
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize, name: impl Into<String>) -> Dataset {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices, name)
    }

    /// Count of each label value.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Split into disjoint parts with the given fractions of the (seeded,
/// shuffled) index set. Part sizes are `round(fraction * N)`, clipped so the
/// total never exceeds `N`.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, must be <= 1"
        )));
    }
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut stream(seed, "split"));

    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0usize;
    for (k, &f) in fractions.iter().enumerate() {
        let size = ((f * n as f64) + 0.5).floor() as usize;
        let size = size.min(n - start);
        let part = dataset.subset(
            &indices[start..start + size],
            format!("{}/part{}", dataset.name, k),
        );
        start += size;
        parts.push(part);
    }
    Ok(parts)
}
