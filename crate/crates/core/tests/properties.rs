//! Property suites over the analysis primitives: rank statistics against a
//! brute-force oracle, corruption multiset preservation, selectivity and MI
//! bounds, AUC invariances, and mask-enumeration checks for dropout.

use proptest::prelude::*;

use unitscope::data::{corrupt_labels, CorruptionSpec, Dataset};
use unitscope::selectivity::{mutual_information_binned, selectivity_index};
use unitscope::stats::{average_ranks, spearman, SpearmanOutcome};
use unitscope::Tensor;

/// O(n^2) rank oracle: 1 + (# smaller) + (# equal - 1) / 2.
fn rank_oracle(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let smaller = values.iter().filter(|&&w| w < v).count() as f64;
            let equal = values.iter().filter(|&&w| w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rx = rank_oracle(xs);
    let ry = rank_oracle(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q: Vec<usize> = p.iter().map(|&v| if v >= slot { v + 1 } else { v }).collect();
            q.insert(0, slot);
            out.push(q);
        }
    }
    out
}

#[test]
fn spearman_matches_oracle_on_all_short_permutations() {
    // Every permutation of length 2..=6 against the identity.
    for n in 2..=6usize {
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for perm in permutations(n) {
            let ys: Vec<f64> = perm.iter().map(|&v| v as f64).collect();
            let got = spearman(&xs, &ys).unwrap().value().unwrap();
            let want = spearman_oracle(&xs, &ys).unwrap();
            assert!(
                (got - want).abs() < 1e-12,
                "n={n} perm={perm:?}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn corruption_preserves_multiset_over_many_specs() {
    // 100 random (fraction, seed) pairs on an unbalanced dataset.
    let labels: Vec<usize> = (0..173).map(|i| (i * i) % 7).collect();
    let dataset = Dataset::new(
        Tensor::zeros(&[labels.len(), 2]),
        labels.clone(),
        7,
        "multiset",
    )
    .unwrap();
    let mut counts = vec![0usize; 7];
    for &l in &labels {
        counts[l] += 1;
    }
    let mut rng_state = 0x9e3779b97f4a7c15u64;
    for i in 0..100 {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let fraction = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
        let (corrupted, _) = corrupt_labels(
            &dataset,
            &CorruptionSpec {
                fraction,
                seed: i as u64,
            },
        )
        .unwrap();
        let mut got = vec![0usize; 7];
        for &l in &corrupted.labels {
            got[l] += 1;
        }
        assert_eq!(got, counts, "fraction {fraction} seed {i}");
    }
}

#[test]
fn corruption_is_idempotent_in_output() {
    // Applying the same spec to the pristine dataset twice gives the same
    // output both times (corruption never composes with itself).
    let labels: Vec<usize> = (0..60).map(|i| i % 5).collect();
    let dataset = Dataset::new(Tensor::zeros(&[60, 1]), labels, 5, "idem").unwrap();
    let spec = CorruptionSpec {
        fraction: 0.4,
        seed: 9,
    };
    let (a, _) = corrupt_labels(&dataset, &spec).unwrap();
    let (b, _) = corrupt_labels(&dataset, &spec).unwrap();
    assert_eq!(a.labels, b.labels);
}

#[test]
fn dropout_mask_enumeration_expectation() {
    // Inverted dropout over <= 12 units: the expectation of each unit's
    // output over all 2^n masks equals the un-dropped activation.
    let p: f64 = 0.3;
    let activations = [0.5, 1.25, 0.0, 2.0, 0.75, 1.0, 0.25, 1.5, 0.1, 0.9, 3.0, 0.01];
    let n = activations.len();
    let scale = 1.0 / (1.0 - p);
    for (u, &x) in activations.iter().enumerate() {
        let mut expectation = 0.0;
        for mask in 0u32..(1 << n) {
            let mut prob = 1.0;
            for bit in 0..n {
                let kept = mask & (1 << bit) != 0;
                prob *= if kept { 1.0 - p } else { p };
            }
            let value = if mask & (1 << u) != 0 { x * scale } else { 0.0 };
            expectation += prob * value;
        }
        assert!(
            (expectation - x).abs() < 1e-12,
            "unit {u}: {expectation} vs {x}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selectivity_bounded_and_zero_iff_equal(
        mus in prop::collection::vec(0.0f64..10.0, 2..12)
    ) {
        let s = selectivity_index(&mus);
        prop_assert!((0.0..=1.0).contains(&s));
        let all_equal = mus.iter().all(|&m| m == mus[0]);
        if all_equal {
            prop_assert_eq!(s, 0.0);
        }
        if s == 0.0 {
            // Zero index means max equals the mean of the rest; with
            // non-negative inputs that forces all values equal.
            let max = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let spread = mus.iter().map(|&m| (m - max).abs()).fold(0.0, f64::max);
            prop_assert!(spread < 1e-9);
        }
    }

    #[test]
    fn selectivity_invariant_to_positive_scaling(
        mus in prop::collection::vec(0.0f64..10.0, 2..12),
        k in 0.01f64..100.0
    ) {
        let scaled: Vec<f64> = mus.iter().map(|&m| m * k).collect();
        let a = selectivity_index(&mus);
        let b = selectivity_index(&scaled);
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn spearman_matches_oracle_on_random_data_with_ties(
        pairs in prop::collection::vec((0i32..6, 0i32..6), 3..40)
    ) {
        let xs: Vec<f64> = pairs.iter().map(|&(x, _)| x as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|&(_, y)| y as f64).collect();
        let got = spearman(&xs, &ys).unwrap();
        match spearman_oracle(&xs, &ys) {
            Some(want) => {
                let got = got.value().expect("oracle says non-degenerate");
                prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
            None => prop_assert_eq!(got, SpearmanOutcome::degenerate()),
        }
    }

    #[test]
    fn spearman_invariant_under_monotone_transforms(
        xs in prop::collection::vec(-100.0f64..100.0, 3..30)
    ) {
        let ys: Vec<f64> = xs.iter().map(|&x| x * 0.5 - 3.0).collect();
        // x vs exp(x/50): strictly monotone transform of x.
        let zs: Vec<f64> = xs.iter().map(|&x| (x / 50.0).exp()).collect();
        let a = spearman(&xs, &ys).unwrap();
        let b = spearman(&zs, &ys).unwrap();
        match (a, b) {
            (SpearmanOutcome::Value(a), SpearmanOutcome::Value(b)) => {
                prop_assert!((a - b).abs() < 1e-10)
            }
            (a, b) => prop_assert_eq!(a, b),
        }
        // spearman(x, x) = 1 and spearman(x, -x) = -1 when non-degenerate.
        let neg: Vec<f64> = xs.iter().map(|&x| -x).collect();
        if let SpearmanOutcome::Value(v) = spearman(&xs, &xs).unwrap() {
            prop_assert!((v - 1.0).abs() < 1e-12);
            let w = spearman(&xs, &neg).unwrap().value().unwrap();
            prop_assert!((w + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn average_ranks_match_oracle(values in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        // Quantize to force ties.
        let values: Vec<f64> = values.iter().map(|v| (v * 2.0).round() / 2.0).collect();
        let got = average_ranks(&values);
        let want = rank_oracle(&values);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_within_bounds_on_random_tables(
        values in prop::collection::vec(0.0f64..4.0, 50..300),
        bins in 2usize..16
    ) {
        let classes = 4;
        let labels: Vec<usize> = (0..values.len()).map(|i| i % classes).collect();
        let mi = mutual_information_binned(&values, &labels, classes, bins).unwrap();
        prop_assert!(mi >= 0.0);
        let bound = (classes as f64).log2().min((bins as f64).log2());
        prop_assert!(mi <= bound + 1e-9, "mi {mi} bound {bound}");
    }

    #[test]
    fn mi_symmetric_under_class_relabeling(
        values in prop::collection::vec(0.0f64..4.0, 60..200)
    ) {
        let classes = 3;
        let labels: Vec<usize> = (0..values.len()).map(|i| (i * 7) % classes).collect();
        let relabeled: Vec<usize> = labels.iter().map(|&y| (y + 1) % classes).collect();
        let a = mutual_information_binned(&values, &labels, classes, 8).unwrap();
        let b = mutual_information_binned(&values, &relabeled, classes, 8).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
