//! Per-unit tuning analyses: class-conditional mean activity, the class
//! selectivity index, mutual information between binned activations and the
//! class label, filter L1 norms, and the combined per-unit report with
//! ablation importance.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::intervene::{ClampMode, UnitRef, UnitStats};
use crate::io::{csv_document, fmt_f64, parse_csv, parse_f64, write_atomic};
use crate::nn::{LayerParams, LayerSpec, Model};
use crate::perturb::ablate_units;
use crate::stats::{linear_fit, spearman, SpearmanOutcome};

/// One scalar activation per unit per example: dense units report their
/// value, conv feature maps the mean over their spatial elements.
pub fn unit_activations(
    model: &Model,
    dataset: &Dataset,
    layer_scope: &[usize],
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let mut per_layer: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &layer in layer_scope {
        let units = model.units_at(layer)?;
        per_layer.insert(layer, vec![Vec::with_capacity(dataset.len()); units]);
    }
    let n = dataset.len();
    let mut start = 0usize;
    while start < n {
        let end = (start + crate::nn::EVAL_BATCH).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (batch, _) = dataset.batch(&indices);
        let trace = model.forward_eval(&batch, None, None, start)?;
        for (&layer, buckets) in per_layer.iter_mut() {
            let act = &trace.activations[layer + 1];
            let units = buckets.len();
            let spatial = act.row_len() / units;
            for b in 0..act.batch() {
                let row = act.row(b);
                for (u, bucket) in buckets.iter_mut().enumerate() {
                    let slice = &row[u * spatial..(u + 1) * spatial];
                    let v = slice.iter().sum::<f64>() / spatial as f64;
                    bucket.push(v);
                }
            }
        }
        start = end;
    }
    Ok(per_layer)
}

/// Class-conditional mean activity: `stats[layer][unit][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalStats {
    pub layers: BTreeMap<usize, Vec<Vec<f64>>>,
    pub class_count: usize,
}

/// Mean post-nonlinearity activity per class, conv maps spatially averaged
/// first. Requires at least one example of every class.
pub fn class_conditional_means(
    model: &Model,
    dataset: &Dataset,
    layer_scope: &[usize],
) -> Result<ClassConditionalStats> {
    let class_counts = dataset.label_histogram();
    if let Some(missing) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "dataset has no examples of class {missing}"
        )));
    }
    let activations = unit_activations(model, dataset, layer_scope)?;
    let mut layers = BTreeMap::new();
    for (layer, units) in activations {
        let per_unit: Vec<Vec<f64>> = units
            .into_iter()
            .map(|values| {
                let mut sums = vec![0.0; dataset.class_count];
                for (v, &label) in values.iter().zip(&dataset.labels) {
                    sums[label] += v;
                }
                sums.iter()
                    .zip(&class_counts)
                    .map(|(s, &c)| s / c as f64)
                    .collect()
            })
            .collect();
        layers.insert(layer, per_unit);
    }
    Ok(ClassConditionalStats {
        layers,
        class_count: dataset.class_count,
    })
}

/// Class selectivity index: `(mu_max - mu_-max) / (mu_max + mu_-max)` where
/// `mu_max` is the largest class-conditional mean and `mu_-max` the mean of
/// the remaining classes. Zero denominator (dead unit) defines the index as
/// 0. In `[0, 1]` for non-negative inputs.
pub fn selectivity_index(class_means: &[f64]) -> f64 {
    if class_means.len() < 2 {
        return 0.0;
    }
    let (argmax, &mu_max) = class_means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite means"))
        .expect("non-empty");
    let rest_sum: f64 = class_means
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != argmax)
        .map(|(_, &v)| v)
        .sum();
    let mu_rest = rest_sum / (class_means.len() - 1) as f64;
    let denom = mu_max + mu_rest;
    if denom == 0.0 {
        0.0
    } else {
        (mu_max - mu_rest) / denom
    }
}

/// Plug-in mutual information (bits) from a joint count table
/// `counts[x][y]`.
pub fn mi_from_joint_counts(counts: &[Vec<usize>]) -> f64 {
    let total: usize = counts.iter().map(|row| row.iter().sum::<usize>()).sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let row_sums: Vec<f64> = counts
        .iter()
        .map(|row| row.iter().sum::<usize>() as f64)
        .collect();
    let cols = counts.first().map(|r| r.len()).unwrap_or(0);
    let col_sums: Vec<f64> = (0..cols)
        .map(|y| counts.iter().map(|row| row[y] as f64).sum())
        .collect();
    let mut mi = 0.0;
    for (x, row) in counts.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p_xy = c as f64 / n;
            mi += p_xy * (p_xy * n * n / (row_sums[x] * col_sums[y])).log2();
        }
    }
    mi.max(0.0)
}

/// Equal-frequency bin edges: data values at the interior quantiles,
/// deduplicated. Binning by value keeps tied activations in one bin and is
/// invariant to strictly monotone transforms.
fn quantile_edges(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|b| sorted[(b * n / n_bins).min(n - 1)])
        .collect();
    edges.dedup();
    edges
}

/// Bin index: the number of edges with `edge < value` (values equal to an
/// edge fall in the bin below it).
fn bin_of(value: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e < value)
}

/// Plug-in MI (bits) between quantile-binned activations and labels.
/// Bounded by `min(log2 C, log2 n_bins)`; all-equal activations occupy a
/// single bin, giving exactly 0.
pub fn mutual_information_binned(
    values: &[f64],
    labels: &[usize],
    class_count: usize,
    n_bins: usize,
) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::Config(format!("need n_bins >= 2, got {n_bins}")));
    }
    if values.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} activations for {} labels",
            values.len(),
            labels.len()
        )));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    let edges = quantile_edges(values, n_bins);
    let mut counts = vec![vec![0usize; class_count]; edges.len() + 1];
    for (&v, &y) in values.iter().zip(labels) {
        counts[bin_of(v, &edges)][y] += 1;
    }
    Ok(mi_from_joint_counts(&counts))
}

/// Per-unit MI over the units of the given layers.
pub fn mutual_information(
    model: &Model,
    dataset: &Dataset,
    layer_scope: &[usize],
    n_bins: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let activations = unit_activations(model, dataset, layer_scope)?;
    let mut out = BTreeMap::new();
    for (layer, units) in activations {
        let mis: Result<Vec<f64>> = units
            .iter()
            .map(|values| {
                mutual_information_binned(values, &dataset.labels, dataset.class_count, n_bins)
            })
            .collect();
        out.insert(layer, mis?);
    }
    Ok(out)
}

/// L1 norm of each unit's incoming weights (dense row, or the whole kernel
/// tensor for a conv output channel); biases excluded. Keyed by activation
/// layer.
pub fn filter_l1_norms(model: &Model) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for layer in model.activation_layers() {
        // Walk back from the ReLU to the parameterized layer feeding it.
        let mut source = None;
        for i in (0..layer).rev() {
            match &model.layers[i].spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    source = Some(i);
                    break;
                }
                LayerSpec::BatchNorm { .. } | LayerSpec::Dropout { .. } => continue,
                _ => break,
            }
        }
        let Some(source) = source else {
            return Err(Error::State(format!(
                "activation layer {layer} has no parameterized source layer"
            )));
        };
        let norms = match &model.layers[source].params {
            LayerParams::Dense { weight, .. } | LayerParams::Conv2d { weight, .. } => (0..weight
                .batch())
                .map(|u| weight.row(u).iter().map(|v| v.abs()).sum())
                .collect(),
            _ => unreachable!("source is dense or conv"),
        };
        out.insert(layer, norms);
    }
    Ok(out)
}

/// One unit's record in a [`SelectivityReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub layer: usize,
    pub unit: usize,
    pub selectivity: f64,
    pub mi_bits: f64,
    pub loss_delta: f64,
    pub acc_delta: f64,
    pub l1_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectivityReport {
    pub records: Vec<UnitRecord>,
    pub class_count: usize,
}

impl SelectivityReport {
    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.records.iter().map(|r| r.layer).collect();
        layers.dedup();
        layers
    }

    pub fn layer_records(&self, layer: usize) -> Vec<&UnitRecord> {
        self.records.iter().filter(|r| r.layer == layer).collect()
    }
}

/// Combined per-unit report: selectivity, MI, L1 norm, and the loss/accuracy
/// deltas from zero- or mean-clamping each unit on `dataset`.
pub fn build_report(
    model: &Model,
    dataset: &Dataset,
    layer_scope: &[usize],
    n_bins: usize,
    clamp_mode: ClampMode,
    stats: Option<Arc<UnitStats>>,
) -> Result<SelectivityReport> {
    let ccm = class_conditional_means(model, dataset, layer_scope)?;
    let mi = mutual_information(model, dataset, layer_scope, n_bins)?;
    let l1 = filter_l1_norms(model)?;
    let units = model.pooled_units(layer_scope)?;
    let deltas = ablate_units(model, dataset, &units, clamp_mode, stats)?;

    let mut records = Vec::with_capacity(units.len());
    for (unit, delta) in units.iter().zip(&deltas) {
        let UnitRef { layer, unit: u } = *unit;
        records.push(UnitRecord {
            layer,
            unit: u,
            selectivity: selectivity_index(&ccm.layers[&layer][u]),
            mi_bits: mi[&layer][u],
            loss_delta: delta.loss_delta,
            acc_delta: delta.acc_delta,
            l1_norm: l1[&layer][u],
        });
    }
    Ok(SelectivityReport {
        records,
        class_count: dataset.class_count,
    })
}

/// Correlations between tuning metrics and importance, pooled and per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pooled: PooledCorrelations,
    pub per_layer: Vec<LayerCorrelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCorrelations {
    pub selectivity_vs_loss: SpearmanOutcome,
    pub mi_vs_loss: SpearmanOutcome,
    pub selectivity_vs_l1: SpearmanOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    pub selectivity_vs_loss: SpearmanOutcome,
    pub mi_vs_loss: SpearmanOutcome,
    /// Least-squares slope/intercept of loss delta on selectivity, for the
    /// per-layer regression plots.
    pub regression_slope: Option<f64>,
    pub regression_intercept: Option<f64>,
}

/// Spearman correlations of selectivity/MI against ablation loss delta,
/// pooled over all units and separately per layer.
pub fn per_layer_correlation(report: &SelectivityReport) -> Result<CorrelationSummary> {
    let sel: Vec<f64> = report.records.iter().map(|r| r.selectivity).collect();
    let mi: Vec<f64> = report.records.iter().map(|r| r.mi_bits).collect();
    let loss: Vec<f64> = report.records.iter().map(|r| r.loss_delta).collect();
    let l1: Vec<f64> = report.records.iter().map(|r| r.l1_norm).collect();

    let pooled = PooledCorrelations {
        selectivity_vs_loss: spearman(&sel, &loss)?,
        mi_vs_loss: spearman(&mi, &loss)?,
        selectivity_vs_l1: spearman(&sel, &l1)?,
    };

    let mut per_layer = Vec::new();
    for layer in report.layers() {
        let records = report.layer_records(layer);
        if records.len() < 2 {
            return Err(Error::Config(format!(
                "layer {layer} has fewer than 2 units"
            )));
        }
        let s: Vec<f64> = records.iter().map(|r| r.selectivity).collect();
        let m: Vec<f64> = records.iter().map(|r| r.mi_bits).collect();
        let l: Vec<f64> = records.iter().map(|r| r.loss_delta).collect();
        let fit = linear_fit(&s, &l);
        per_layer.push(LayerCorrelation {
            layer,
            selectivity_vs_loss: spearman(&s, &l)?,
            mi_vs_loss: spearman(&m, &l)?,
            regression_slope: fit.map(|(slope, _)| slope),
            regression_intercept: fit.map(|(_, intercept)| intercept),
        });
    }
    Ok(CorrelationSummary { pooled, per_layer })
}

/// Histogram of selectivity per layer. `bin_edges` must ascend and cover
/// `[0, 1]`; values land in `[edge[i], edge[i+1])`, last bin inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHistogram {
    pub layer: usize,
    pub counts: Vec<usize>,
}

pub fn selectivity_depth_histograms(
    report: &SelectivityReport,
    bin_edges: &[f64],
) -> Result<Vec<DepthHistogram>> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bin edges must be strictly ascending".into()));
    }
    if bin_edges[0] > 0.0 || *bin_edges.last().unwrap() < 1.0 {
        return Err(Error::Config("bin edges must cover [0, 1]".into()));
    }
    let bins = bin_edges.len() - 1;
    let mut out = Vec::new();
    for layer in report.layers() {
        let mut counts = vec![0usize; bins];
        for record in report.layer_records(layer) {
            let v = record.selectivity;
            let mut bin = bin_edges.partition_point(|&e| e <= v).saturating_sub(1);
            if bin >= bins {
                bin = bins - 1;
            }
            counts[bin] += 1;
        }
        out.push(DepthHistogram { layer, counts });
    }
    Ok(out)
}

/// Median selectivity of a layer's records; `None` for empty layers.
pub fn median_selectivity(report: &SelectivityReport, layer: usize) -> Option<f64> {
    let mut values: Vec<f64> = report
        .layer_records(layer)
        .iter()
        .map(|r| r.selectivity)
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const REPORT_HEADER: [&str; 7] = [
    "layer",
    "unit",
    "selectivity",
    "mutual_info_bits",
    "loss_delta",
    "acc_delta",
    "l1_norm",
];

pub fn write_report(report: &SelectivityReport, path: &std::path::Path) -> Result<()> {
    let header: Vec<String> = REPORT_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.unit.to_string(),
                fmt_f64(r.selectivity),
                fmt_f64(r.mi_bits),
                fmt_f64(r.loss_delta),
                fmt_f64(r.acc_delta),
                fmt_f64(r.l1_norm),
            ]
        })
        .collect();
    write_atomic(path, csv_document(&header, &rows).as_bytes())
}

pub fn read_report(path: &std::path::Path, class_count: usize) -> Result<SelectivityReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (header, rows) = parse_csv(&text)?;
    if header != REPORT_HEADER {
        return Err(Error::Data("unexpected report CSV header".into()));
    }
    let records: Result<Vec<UnitRecord>> = rows
        .iter()
        .map(|row| {
            Ok(UnitRecord {
                layer: row[0]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad layer '{}': {e}", row[0])))?,
                unit: row[1]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad unit '{}': {e}", row[1])))?,
                selectivity: parse_f64(&row[2])?,
                mi_bits: parse_f64(&row[3])?,
                loss_delta: parse_f64(&row[4])?,
                acc_delta: parse_f64(&row[5])?,
                l1_norm: parse_f64(&row[6])?,
            })
        })
        .collect();
    Ok(SelectivityReport {
        records: records?,
        class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectivity_known_cases() {
        // Single-class unit.
        assert_eq!(selectivity_index(&[2.0, 0.0, 0.0, 0.0]), 1.0);
        // Identical for all classes.
        assert_eq!(selectivity_index(&[0.7, 0.7, 0.7]), 0.0);
        // Dead unit.
        assert_eq!(selectivity_index(&[0.0, 0.0, 0.0]), 0.0);
        // mu_max = 3, mu_-max = 1 -> 0.5.
        assert_eq!(selectivity_index(&[3.0, 1.0, 1.0, 1.0]), 0.5);
    }

    #[test]
    fn selectivity_scale_invariant() {
        let mu = [1.3, 0.2, 0.8, 0.05];
        let scaled: Vec<f64> = mu.iter().map(|v| v * 7.5).collect();
        assert!((selectivity_index(&mu) - selectivity_index(&scaled)).abs() < 1e-12);
    }

    #[test]
    fn mi_from_hand_table() {
        // 4-bin, 2-class joint histogram; oracle is the direct sum.
        let counts = vec![vec![10, 2], vec![3, 9], vec![5, 5], vec![1, 7]];
        let n: usize = 42;
        let mut oracle = 0.0;
        let row_sums = [12.0, 12.0, 10.0, 8.0];
        let col_sums = [19.0, 23.0];
        for (x, row) in counts.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                if c > 0 {
                    let p = c as f64 / n as f64;
                    oracle += p
                        * (p / ((row_sums[x] / n as f64) * (col_sums[y] / n as f64))).log2();
                }
            }
        }
        assert!((mi_from_joint_counts(&counts) - oracle).abs() < 1e-12);
    }

    #[test]
    fn mi_bijection_equals_log2_c() {
        // Distinct constant per class, equiprobable.
        let classes = 10;
        let per = 100;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per {
                values.push(c as f64 * 1.5 + 0.25);
                labels.push(c);
            }
        }
        let mi = mutual_information_binned(&values, &labels, classes, 32).unwrap();
        assert!((mi - (classes as f64).log2()).abs() < 1e-9, "mi {mi}");
    }

    #[test]
    fn mi_constant_unit_is_zero() {
        let values = vec![0.5; 200];
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let mi = mutual_information_binned(&values, &labels, 4, 16).unwrap();
        assert_eq!(mi, 0.0);
    }

    #[test]
    fn mi_monotone_invariance_with_quantile_bins() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "mi-test");
        let values: Vec<f64> = (0..500).map(|_| rng.gen::<f64>() * 4.0 - 1.0).collect();
        let labels: Vec<usize> = (0..500).map(|_| rng.gen_range(0..3usize)).collect();
        let transformed: Vec<f64> = values.iter().map(|v| (v * 2.0).exp()).collect();
        let a = mutual_information_binned(&values, &labels, 3, 8).unwrap();
        let b = mutual_information_binned(&transformed, &labels, 3, 8).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mi_bounded() {
        use rand::Rng;
        let mut rng = crate::rng::stream(6, "mi-bound");
        let values: Vec<f64> = (0..400).map(|_| rng.gen()).collect();
        let labels: Vec<usize> = (0..400).map(|i| i % 5).collect();
        for bins in [2, 4, 32] {
            let mi = mutual_information_binned(&values, &labels, 5, bins).unwrap();
            assert!(mi >= 0.0);
            assert!(mi <= (5.0_f64).log2().min((bins as f64).log2()) + 1e-12);
        }
    }

    #[test]
    fn depth_histogram_counts_sum_to_units() {
        let report = SelectivityReport {
            records: vec![
                UnitRecord {
                    layer: 2,
                    unit: 0,
                    selectivity: 0.0,
                    mi_bits: 0.0,
                    loss_delta: 0.0,
                    acc_delta: 0.0,
                    l1_norm: 0.0,
                },
                UnitRecord {
                    layer: 2,
                    unit: 1,
                    selectivity: 1.0,
                    mi_bits: 0.0,
                    loss_delta: 0.0,
                    acc_delta: 0.0,
                    l1_norm: 0.0,
                },
                UnitRecord {
                    layer: 4,
                    unit: 0,
                    selectivity: 0.49,
                    mi_bits: 0.0,
                    loss_delta: 0.0,
                    acc_delta: 0.0,
                    l1_norm: 0.0,
                },
            ],
            class_count: 2,
        };
        let edges = [0.0, 0.5, 1.0];
        let hist = selectivity_depth_histograms(&report, &edges).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(hist[0].counts, vec![1, 1]); // 0.0 in first bin, 1.0 in last
        assert_eq!(hist[1].counts, vec![1, 0]);
        let total: usize = hist.iter().map(|h| h.counts.iter().sum::<usize>()).sum();
        assert_eq!(total, report.records.len());
    }

    #[test]
    fn l1_norm_hand_case() {
        // Conv layer with an all-ones 3x3 kernel over 2 input channels: 18.
        let mut model = Model::convnet(&[2, 4, 4], &[1], &[1], 2, false, 3).unwrap();
        if let LayerParams::Conv2d { weight, .. } = &mut model.layers[0].params {
            weight.data.fill(1.0);
        }
        let norms = filter_l1_norms(&model).unwrap();
        let layer = model.activation_layers()[0];
        assert_eq!(norms[&layer], vec![18.0]);
        // Negating the filter leaves the norm unchanged.
        if let LayerParams::Conv2d { weight, .. } = &mut model.layers[0].params {
            for v in &mut weight.data {
                *v = -*v;
            }
        }
        let negated = filter_l1_norms(&model).unwrap();
        assert_eq!(negated[&layer], vec![18.0]);
    }
}
