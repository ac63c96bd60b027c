//! Perturbation analyses: empirical unit statistics, cumulative ablation
//! curves over random unit orderings, variance-scaled noise sweeps, and
//! single-unit ablation deltas.
//!
//! All operations are read-only on the model. Orderings and runs derive
//! their RNG streams from `(seed, index)`, so running them concurrently or
//! serially yields identical results.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::intervene::{ClampMode, InterventionPlan, LayerUnitStats, NoiseSpec, UnitRef, UnitStats};
use crate::io::{csv_document, fmt_f64, parse_csv, parse_f64, write_atomic};
use crate::nn::{evaluate, Mode, Model};
use crate::rng::{derive_seed_indexed, stream_indexed};

/// Empirical mean/variance of every unit across a reference dataset,
/// computed in eval mode with no intervention. Conv feature maps pool over
/// examples and spatial elements for the scalar statistics and additionally
/// keep per-element means for mean-clamping.
pub fn compute_unit_stats(model: &Model, dataset: &Dataset) -> Result<UnitStats> {
    if model.mode != Mode::Eval {
        return Err(Error::State("unit statistics require an eval-mode model".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute unit statistics on an empty dataset".into()));
    }
    let layers = model.activation_layers();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut sq_sums: Vec<Vec<f64>> = Vec::new();
    let mut elem_sums: Vec<Option<Vec<Vec<f64>>>> = Vec::new();
    for &layer in &layers {
        let units = model.units_at(layer)?;
        let elems = model.unit_elements_at(layer)?;
        sums.push(vec![0.0; units]);
        sq_sums.push(vec![0.0; units]);
        elem_sums.push(if elems > 1 {
            Some(vec![vec![0.0; elems]; units])
        } else {
            None
        });
    }

    let n = dataset.len();
    let mut start = 0usize;
    while start < n {
        let end = (start + crate::nn::EVAL_BATCH).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (batch, _) = dataset.batch(&indices);
        let trace = model.forward_eval(&batch, None, None, start)?;
        for (li, &layer) in layers.iter().enumerate() {
            let act = &trace.activations[layer + 1];
            let units = sums[li].len();
            let spatial = act.row_len() / units;
            for b in 0..act.batch() {
                let row = act.row(b);
                for u in 0..units {
                    let slice = &row[u * spatial..(u + 1) * spatial];
                    for (e, &v) in slice.iter().enumerate() {
                        sums[li][u] += v;
                        sq_sums[li][u] += v * v;
                        if let Some(es) = elem_sums[li].as_mut() {
                            es[u][e] += v;
                        }
                    }
                }
            }
        }
        start = end;
    }

    let mut out = UnitStats {
        layers: Default::default(),
        example_count: n,
    };
    for (li, &layer) in layers.iter().enumerate() {
        let units = sums[li].len();
        let elems = model.unit_elements_at(layer)?;
        let pool = (n * elems) as f64;
        let mut means = Vec::with_capacity(units);
        let mut variances = Vec::with_capacity(units);
        for u in 0..units {
            let mean = sums[li][u] / pool;
            // One-pass variance; clamp tiny negatives from cancellation.
            let var = (sq_sums[li][u] / pool - mean * mean).max(0.0);
            means.push(mean);
            variances.push(var);
        }
        let elem_means = elem_sums[li].take().map(|es| {
            es.into_iter()
                .map(|unit_sums| unit_sums.into_iter().map(|s| s / n as f64).collect())
                .collect()
        });
        out.layers.insert(
            layer,
            LayerUnitStats {
                means,
                variances,
                elem_means,
            },
        );
    }
    Ok(out)
}

/// Configuration of a cumulative ablation curve.
#[derive(Debug, Clone)]
pub struct CurveConfig {
    /// Activation layers whose units are pooled and ablated.
    pub layer_scope: Vec<usize>,
    pub n_orderings: usize,
    pub clamp_mode: ClampMode,
    pub seed: u64,
    /// Number of ablation counts to evaluate, spread evenly over `0..=K`
    /// (0 and K always included). Use `usize::MAX` to evaluate after every
    /// single ablation.
    pub points: usize,
    /// Explicit unit pool override; defaults to all units of `layer_scope`.
    pub unit_pool: Option<Vec<UnitRef>>,
    /// Evaluate orderings concurrently. Results are identical either way.
    pub parallel: bool,
}

impl CurveConfig {
    pub fn new(layer_scope: Vec<usize>, n_orderings: usize, clamp_mode: ClampMode, seed: u64) -> Self {
        CurveConfig {
            layer_scope,
            n_orderings,
            clamp_mode,
            seed,
            points: usize::MAX,
            unit_pool: None,
            parallel: true,
        }
    }

    pub fn with_points(mut self, points: usize) -> Self {
        self.points = points;
        self
    }
}

/// Provenance attached to persisted curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub dataset: String,
    /// Which split the curve was evaluated on; always explicit.
    pub split: String,
    pub clamp_mode: ClampMode,
    pub layer_scope: Vec<usize>,
    pub seed: u64,
    pub n_orderings: usize,
    pub total_units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

/// Accuracy as a function of the number of ablated units, per ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    /// Evaluated ablation counts; first is 0, last is the pool size K.
    pub counts: Vec<usize>,
    /// `rows[ordering][point]` accuracy.
    pub rows: Vec<Vec<f64>>,
    pub meta: CurveMeta,
}

impl CumulativeCurve {
    pub fn total_units(&self) -> usize {
        self.meta.total_units
    }

    /// Fraction-ablated axis: `count / K`.
    pub fn fractions(&self) -> Vec<f64> {
        let k = self.meta.total_units.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / k).collect()
    }

    pub fn mean_acc(&self) -> Vec<f64> {
        let orderings = self.rows.len() as f64;
        (0..self.counts.len())
            .map(|p| self.rows.iter().map(|r| r[p]).sum::<f64>() / orderings)
            .collect()
    }

    /// Population standard deviation across orderings.
    pub fn std_acc(&self) -> Vec<f64> {
        let means = self.mean_acc();
        (0..self.counts.len())
            .map(|p| {
                let m = means[p];
                let ss: f64 = self.rows.iter().map(|r| (r[p] - m) * (r[p] - m)).sum();
                (ss / self.rows.len() as f64).sqrt()
            })
            .collect()
    }

    /// Mean accuracy at count 0.
    pub fn baseline(&self) -> f64 {
        self.mean_acc()[0]
    }

    /// Mean accuracy at a fraction (nearest evaluated point at or below it).
    pub fn mean_at_fraction(&self, fraction: f64) -> f64 {
        let k = self.meta.total_units as f64;
        let target = fraction * k;
        let mut idx = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c as f64 <= target {
                idx = i;
            }
        }
        self.mean_acc()[idx]
    }
}

fn curve_counts(total: usize, points: usize) -> Vec<usize> {
    if points == usize::MAX || points >= total + 1 {
        return (0..=total).collect();
    }
    let points = points.max(2);
    let mut counts: Vec<usize> = (0..points)
        .map(|i| ((i as f64) * total as f64 / (points - 1) as f64).round() as usize)
        .collect();
    counts.dedup();
    counts
}

/// The cumulative ablation curve: for each ordering, units from the pooled
/// scope are ablated cumulatively and accuracy is evaluated at each count in
/// the evaluation grid. Mean clamping requires `stats`.
pub fn cumulative_ablation_curve(
    model: &Model,
    dataset: &Dataset,
    config: &CurveConfig,
    stats: Option<Arc<UnitStats>>,
    split: &str,
) -> Result<CumulativeCurve> {
    if config.n_orderings == 0 {
        return Err(Error::Config("curve needs at least one ordering".into()));
    }
    let pool = match &config.unit_pool {
        Some(units) => units.clone(),
        None => {
            if config.layer_scope.is_empty() {
                return Err(Error::Config("curve layer scope is empty".into()));
            }
            model.pooled_units(&config.layer_scope)?
        }
    };
    if pool.is_empty() {
        return Err(Error::Config("curve unit pool is empty".into()));
    }
    if config.clamp_mode == ClampMode::Mean && stats.is_none() {
        return Err(Error::Config("mean clamping requires unit statistics".into()));
    }

    let counts = curve_counts(pool.len(), config.points);
    let run_ordering = |ordering: usize| -> Result<Vec<f64>> {
        let mut units = pool.clone();
        let mut rng = stream_indexed(config.seed, "ordering", ordering as u64);
        units.shuffle(&mut rng);
        let mut row = Vec::with_capacity(counts.len());
        for &count in &counts {
            let mut plan =
                InterventionPlan::clamp_all(units[..count].iter().copied(), config.clamp_mode);
            if let Some(stats) = &stats {
                plan = plan.with_stats(Arc::clone(stats));
            }
            let eval = evaluate(model, dataset, Some(&plan), None)?;
            row.push(eval.accuracy);
        }
        Ok(row)
    };

    let rows: Result<Vec<Vec<f64>>> = if config.parallel {
        (0..config.n_orderings)
            .into_par_iter()
            .map(run_ordering)
            .collect()
    } else {
        (0..config.n_orderings).map(run_ordering).collect()
    };

    Ok(CumulativeCurve {
        counts,
        rows: rows?,
        meta: CurveMeta {
            dataset: dataset.name.clone(),
            split: split.to_string(),
            clamp_mode: config.clamp_mode,
            layer_scope: config.layer_scope.clone(),
            seed: config.seed,
            n_orderings: config.n_orderings,
            total_units: pool.len(),
            checkpoint_sha256: None,
            created_unix: None,
        },
    })
}

/// One row of a noise sweep: accuracy per run at a given scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweep {
    pub scales: Vec<f64>,
    /// `rows[scale_index][run]` accuracy.
    pub rows: Vec<Vec<f64>>,
    pub meta: CurveMeta,
}

impl NoiseSweep {
    pub fn mean_acc(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    pub fn std_acc(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r.len() as f64).sqrt()
            })
            .collect()
    }
}

/// Gaussian-noise sweep: at scale `s`, every unit receives additive noise of
/// variance `s * var(unit)` after its nonlinearity, fresh per example and per
/// run. Scales must be sorted ascending.
pub fn noise_sweep(
    model: &Model,
    dataset: &Dataset,
    scales: &[f64],
    stats: Arc<UnitStats>,
    n_runs: usize,
    seed: u64,
    split: &str,
) -> Result<NoiseSweep> {
    if scales.is_empty() {
        return Err(Error::Config("noise sweep needs at least one scale".into()));
    }
    if scales.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("noise scales must be sorted ascending".into()));
    }
    if scales.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::Config("noise scales must be finite and >= 0".into()));
    }
    if n_runs == 0 {
        return Err(Error::Config("noise sweep needs at least one run".into()));
    }

    let jobs: Vec<(usize, usize)> = (0..scales.len())
        .flat_map(|s| (0..n_runs).map(move |r| (s, r)))
        .collect();
    let accs: Result<Vec<f64>> = jobs
        .par_iter()
        .map(|&(scale_idx, run)| {
            let plan = InterventionPlan {
                clamps: Vec::new(),
                stats: Some(Arc::clone(&stats)),
                noise: Some(NoiseSpec {
                    scale: scales[scale_idx],
                    seed: derive_seed_indexed(seed, "noise-run", (scale_idx * n_runs + run) as u64),
                }),
            };
            Ok(evaluate(model, dataset, Some(&plan), None)?.accuracy)
        })
        .collect();
    let accs = accs?;
    let rows: Vec<Vec<f64>> = (0..scales.len())
        .map(|s| accs[s * n_runs..(s + 1) * n_runs].to_vec())
        .collect();

    Ok(NoiseSweep {
        scales: scales.to_vec(),
        rows,
        meta: CurveMeta {
            dataset: dataset.name.clone(),
            split: split.to_string(),
            clamp_mode: ClampMode::Zero,
            layer_scope: model.activation_layers(),
            seed,
            n_orderings: n_runs,
            total_units: stats.layers.values().map(|l| l.means.len()).sum(),
            checkpoint_sha256: None,
            created_unix: None,
        },
    })
}

/// Accuracy/loss change from ablating one unit: intervened minus baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationDelta {
    pub acc_delta: f64,
    pub loss_delta: f64,
}

/// Ablate a single unit and report deltas on the given dataset.
pub fn ablate_single(
    model: &Model,
    dataset: &Dataset,
    unit: UnitRef,
    clamp_mode: ClampMode,
    stats: Option<Arc<UnitStats>>,
) -> Result<AblationDelta> {
    let baseline = evaluate(model, dataset, None, None)?;
    ablate_single_with_baseline(model, dataset, unit, clamp_mode, stats, baseline)
}

fn ablate_single_with_baseline(
    model: &Model,
    dataset: &Dataset,
    unit: UnitRef,
    clamp_mode: ClampMode,
    stats: Option<Arc<UnitStats>>,
    baseline: crate::nn::Evaluation,
) -> Result<AblationDelta> {
    let mut plan = InterventionPlan::clamp_all([unit], clamp_mode);
    if let Some(stats) = stats {
        plan = plan.with_stats(stats);
    }
    let intervened = evaluate(model, dataset, Some(&plan), None)?;
    Ok(AblationDelta {
        acc_delta: intervened.accuracy - baseline.accuracy,
        loss_delta: intervened.mean_loss - baseline.mean_loss,
    })
}

/// [`ablate_single`] over many units with one shared baseline evaluation;
/// units run concurrently.
pub fn ablate_units(
    model: &Model,
    dataset: &Dataset,
    units: &[UnitRef],
    clamp_mode: ClampMode,
    stats: Option<Arc<UnitStats>>,
) -> Result<Vec<AblationDelta>> {
    let baseline = evaluate(model, dataset, None, None)?;
    units
        .par_iter()
        .map(|&unit| {
            ablate_single_with_baseline(model, dataset, unit, clamp_mode, stats.clone(), baseline)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Write `count,fraction,mean_acc,std_acc,ordering_0,...` plus a JSON
/// metadata sidecar.
pub fn write_curve(curve: &CumulativeCurve, csv_path: &std::path::Path, meta_path: &std::path::Path) -> Result<()> {
    let mut header: Vec<String> = ["count", "fraction", "mean_acc", "std_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..curve.rows.len() {
        header.push(format!("ordering_{i}"));
    }
    let fractions = curve.fractions();
    let means = curve.mean_acc();
    let stds = curve.std_acc();
    let rows: Vec<Vec<String>> = curve
        .counts
        .iter()
        .enumerate()
        .map(|(p, &count)| {
            let mut row = vec![
                count.to_string(),
                fmt_f64(fractions[p]),
                fmt_f64(means[p]),
                fmt_f64(stds[p]),
            ];
            row.extend(curve.rows.iter().map(|r| fmt_f64(r[p])));
            row
        })
        .collect();
    write_atomic(csv_path, csv_document(&header, &rows).as_bytes())?;
    let meta = serde_json::to_string_pretty(&curve.meta)
        .map_err(|e| Error::Data(format!("curve metadata: {e}")))?;
    write_atomic(meta_path, meta.as_bytes())
}

/// Read back a curve written by [`write_curve`].
pub fn read_curve(csv_path: &std::path::Path, meta_path: &std::path::Path) -> Result<CumulativeCurve> {
    let meta: CurveMeta = serde_json::from_str(
        &std::fs::read_to_string(meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let (header, records) = parse_csv(&text)?;
    if header.len() < 5 || header[..4] != ["count", "fraction", "mean_acc", "std_acc"] {
        return Err(Error::Data("unexpected curve CSV header".into()));
    }
    let orderings = header.len() - 4;
    let mut counts = Vec::with_capacity(records.len());
    let mut rows = vec![Vec::with_capacity(records.len()); orderings];
    for record in &records {
        counts.push(
            record[0]
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("bad count '{}': {e}", record[0])))?,
        );
        for (o, row) in rows.iter_mut().enumerate() {
            row.push(parse_f64(&record[4 + o])?);
        }
    }
    Ok(CumulativeCurve { counts, rows, meta })
}

/// Write `scale,mean_acc,std_acc,run_0,...` plus a JSON metadata sidecar.
pub fn write_noise_sweep(
    sweep: &NoiseSweep,
    csv_path: &std::path::Path,
    meta_path: &std::path::Path,
) -> Result<()> {
    let runs = sweep.rows.first().map(|r| r.len()).unwrap_or(0);
    let mut header: Vec<String> = ["scale", "mean_acc", "std_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..runs {
        header.push(format!("run_{i}"));
    }
    let means = sweep.mean_acc();
    let stds = sweep.std_acc();
    let rows: Vec<Vec<String>> = sweep
        .scales
        .iter()
        .enumerate()
        .map(|(s, &scale)| {
            let mut row = vec![fmt_f64(scale), fmt_f64(means[s]), fmt_f64(stds[s])];
            row.extend(sweep.rows[s].iter().map(|&v| fmt_f64(v)));
            row
        })
        .collect();
    write_atomic(csv_path, csv_document(&header, &rows).as_bytes())?;
    let meta = serde_json::to_string_pretty(&sweep.meta)
        .map_err(|e| Error::Data(format!("sweep metadata: {e}")))?;
    write_atomic(meta_path, meta.as_bytes())
}

/// Read back a sweep written by [`write_noise_sweep`].
pub fn read_noise_sweep(
    csv_path: &std::path::Path,
    meta_path: &std::path::Path,
) -> Result<NoiseSweep> {
    let meta: CurveMeta = serde_json::from_str(
        &std::fs::read_to_string(meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let text = std::fs::read_to_string(csv_path)
        .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let (header, records) = parse_csv(&text)?;
    if header.len() < 4 || header[..3] != ["scale", "mean_acc", "std_acc"] {
        return Err(Error::Data("unexpected noise CSV header".into()));
    }
    let runs = header.len() - 3;
    let mut scales = Vec::new();
    let mut rows = Vec::new();
    for record in &records {
        scales.push(parse_f64(&record[0])?);
        let mut row = Vec::with_capacity(runs);
        for r in 0..runs {
            row.push(parse_f64(&record[3 + r])?);
        }
        rows.push(row);
    }
    Ok(NoiseSweep { scales, rows, meta })
}
