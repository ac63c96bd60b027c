//! Partial label corruption.
//!
//! A corrupted dataset replaces the labels of a randomly selected subset of
//! examples with a random permutation of that subset's labels. The global
//! label multiset is therefore preserved exactly: the label distribution is
//! maintained while input-label structure is destroyed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Fraction of examples whose labels are shuffled, in `[0, 1]`.
    pub fraction: f64,
    pub seed: u64,
}

/// Sidecar record that makes a corruption replayable without storing images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub source_name: String,
    pub fraction: f64,
    pub seed: u64,
    pub changed_indices: Vec<usize>,
    pub new_labels: Vec<usize>,
}

/// Corrupt `round(fraction * N)` labels. The input dataset is not modified.
pub fn corrupt_labels(
    dataset: &Dataset,
    spec: &CorruptionSpec,
) -> Result<(Dataset, CorruptionRecord)> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::Config(format!(
            "corruption fraction must be in [0, 1], got {}",
            spec.fraction
        )));
    }
    let n = dataset.len();
    // Round half up, for a platform-independent selected count.
    let count = ((spec.fraction * n as f64) + 0.5).floor() as usize;
    let count = count.min(n);

    let mut rng = stream(spec.seed, "corrupt");
    let mut indices: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first `count` entries are a uniform sample
    // without replacement.
    for i in 0..count {
        let j = rand::Rng::gen_range(&mut rng, i..n);
        indices.swap(i, j);
    }
    let mut selected: Vec<usize> = indices[..count].to_vec();
    selected.sort_unstable();

    let mut pool: Vec<usize> = selected.iter().map(|&i| dataset.labels[i]).collect();
    pool.shuffle(&mut rng);

    let mut labels = dataset.labels.clone();
    for (&i, &new) in selected.iter().zip(&pool) {
        labels[i] = new;
    }

    let record = CorruptionRecord {
        source_name: dataset.name.clone(),
        fraction: spec.fraction,
        seed: spec.seed,
        changed_indices: selected,
        new_labels: pool,
    };
    let corrupted = Dataset {
        examples: dataset.examples.clone(),
        labels,
        class_count: dataset.class_count,
        name: format!("{}+corrupt{}", dataset.name, spec.fraction),
    };
    Ok((corrupted, record))
}

/// Re-apply a recorded corruption to its pristine source dataset.
pub fn replay_corruption(dataset: &Dataset, record: &CorruptionRecord) -> Result<Dataset> {
    if record.changed_indices.len() != record.new_labels.len() {
        return Err(Error::Data(
            "corruption record index/label length mismatch".into(),
        ));
    }
    let mut labels = dataset.labels.clone();
    for (&i, &new) in record.changed_indices.iter().zip(&record.new_labels) {
        if i >= labels.len() || new >= dataset.class_count {
            return Err(Error::Data(format!(
                "corruption record entry ({i}, {new}) out of range"
            )));
        }
        labels[i] = new;
    }
    Ok(Dataset {
        examples: dataset.examples.clone(),
        labels,
        class_count: dataset.class_count,
        name: format!("{}+corrupt{}", dataset.name, record.fraction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn balanced(n_per_class: usize, classes: usize) -> Dataset {
        let n = n_per_class * classes;
        let examples = Tensor::zeros(&[n, 1]);
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(examples, labels, classes, "balanced").unwrap()
    }

    fn multiset(labels: &[usize], classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            counts[l] += 1;
        }
        counts
    }

    #[test]
    fn zero_fraction_is_identity() {
        let d = balanced(10, 5);
        let (c, record) = corrupt_labels(
            &d,
            &CorruptionSpec {
                fraction: 0.0,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(c.labels, d.labels);
        assert!(record.changed_indices.is_empty());
    }

    #[test]
    fn multiset_preserved_at_any_fraction() {
        let d = balanced(13, 7);
        for (k, fraction) in [0.1, 0.25, 0.5, 0.9, 1.0].iter().enumerate() {
            let (c, _) = corrupt_labels(
                &d,
                &CorruptionSpec {
                    fraction: *fraction,
                    seed: k as u64,
                },
            )
            .unwrap();
            assert_eq!(multiset(&c.labels, 7), multiset(&d.labels, 7));
        }
    }

    #[test]
    fn full_corruption_changes_about_one_minus_one_over_c() {
        // Monte-Carlo over seeds: for balanced 10-class data the expected
        // fraction of positions whose label actually changes is 1 - 1/C.
        let d = balanced(100, 10);
        let n = d.len() as f64;
        let trials = 1000;
        let mut changed = 0usize;
        for seed in 0..trials {
            let (c, _) = corrupt_labels(
                &d,
                &CorruptionSpec {
                    fraction: 1.0,
                    seed,
                },
            )
            .unwrap();
            changed += c
                .labels
                .iter()
                .zip(&d.labels)
                .filter(|(a, b)| a != b)
                .count();
        }
        let rate = changed as f64 / (trials as f64 * n);
        assert!((rate - 0.9).abs() < 0.01, "change rate {rate}");
    }

    #[test]
    fn deterministic_given_seed_and_original_untouched() {
        let d = balanced(20, 4);
        let spec = CorruptionSpec {
            fraction: 0.5,
            seed: 77,
        };
        let before = d.labels.clone();
        let (a, ra) = corrupt_labels(&d, &spec).unwrap();
        let (b, rb) = corrupt_labels(&d, &spec).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(ra, rb);
        assert_eq!(d.labels, before);
    }

    #[test]
    fn selected_count_rounds_half_up() {
        let d = balanced(1, 5); // N = 5
        let (_, record) = corrupt_labels(
            &d,
            &CorruptionSpec {
                fraction: 0.5,
                seed: 0,
            },
        )
        .unwrap();
        // 0.5 * 5 = 2.5, rounds up to 3.
        assert_eq!(record.changed_indices.len(), 3);
    }

    #[test]
    fn replay_reproduces_corruption() {
        let d = balanced(25, 5);
        let (c, record) = corrupt_labels(
            &d,
            &CorruptionSpec {
                fraction: 0.6,
                seed: 5,
            },
        )
        .unwrap();
        let replayed = replay_corruption(&d, &record).unwrap();
        assert_eq!(replayed.labels, c.labels);
    }
}
