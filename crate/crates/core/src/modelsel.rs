//! Model selection from ablation-curve AUC: normalized AUC, an
//! early-stopping monitor that probes the curve during training, and
//! hyperparameter-sweep ranking with random subselection experiments.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::intervene::ClampMode;
use crate::io::{csv_document, fmt_f64, parse_csv, parse_f64, write_atomic};
use crate::nn::{train_with_observer, EpochMetrics, Model, TrainConfig, TrainFlow};
use crate::perturb::{cumulative_ablation_curve, CumulativeCurve, CurveConfig, CurveMeta};
use crate::rng::{derive_seed_indexed, stream, stream_indexed};
use crate::stats::{spearman, SpearmanOutcome};

/// Normalized area under a cumulative ablation curve, with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucValue {
    pub value: f64,
    pub meta: CurveMeta,
}

/// AUC result; curves whose unablated accuracy is 0 have no meaningful
/// normalization and are reported as a marker.
#[derive(Debug, Clone, PartialEq)]
pub enum AucOutcome {
    Value(AucValue),
    Degenerate,
}

impl AucOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            AucOutcome::Value(v) => Some(v.value),
            AucOutcome::Degenerate => None,
        }
    }
}

/// Trapezoidal integral of mean accuracy over the fraction-ablated axis,
/// divided by the accuracy at count 0. A constant curve normalizes to
/// exactly 1.
pub fn normalized_auc(curve: &CumulativeCurve) -> Result<AucOutcome> {
    if curve.counts.len() < 2 {
        return Err(Error::Config("AUC needs a curve with >= 2 points".into()));
    }
    let means = curve.mean_acc();
    let baseline = means[0];
    if baseline == 0.0 {
        return Ok(AucOutcome::Degenerate);
    }
    let value = if means.iter().all(|&m| m == baseline) {
        1.0
    } else {
        let fractions = curve.fractions();
        let mut area = 0.0;
        for i in 0..means.len() - 1 {
            area += (fractions[i + 1] - fractions[i]) * (means[i] + means[i + 1]) / 2.0;
        }
        area / baseline
    };
    Ok(AucOutcome::Value(AucValue {
        value,
        meta: curve.meta.clone(),
    }))
}

/// Fixed configuration of the cheap AUC probe used during training and
/// sweeps: few orderings, an optional fixed unit subsample, a sparse
/// evaluation grid, and an optional cap on evaluated examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_orderings: usize,
    /// Fixed subsample of the pooled units; `None` ablates all of them.
    pub unit_sample: Option<usize>,
    /// Evaluation grid size along the curve.
    pub points: usize,
    /// Cap on evaluated examples (a fixed prefix of the probe split).
    pub eval_limit: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_orderings: 3,
            unit_sample: None,
            points: 9,
            eval_limit: None,
            seed: 0,
        }
    }
}

/// Measure the probe AUC of a model on a dataset (zero clamping over all
/// hidden activation layers).
pub fn probe_auc(model: &Model, dataset: &Dataset, probe: &ProbeConfig) -> Result<AucOutcome> {
    let scope = model.activation_layers();
    let pool = model.pooled_units(&scope)?;
    let unit_pool = match probe.unit_sample {
        Some(m) if m < pool.len() => {
            let mut units = pool;
            let mut rng = stream(probe.seed, "probe-units");
            use rand::seq::SliceRandom;
            units.shuffle(&mut rng);
            units.truncate(m);
            Some(units)
        }
        _ => None,
    };
    let probe_set;
    let dataset = match probe.eval_limit {
        Some(limit) if limit < dataset.len() => {
            probe_set = dataset.take(limit, format!("{}[:{}]", dataset.name, limit));
            &probe_set
        }
        _ => dataset,
    };
    let config = CurveConfig {
        layer_scope: scope,
        n_orderings: probe.n_orderings,
        clamp_mode: ClampMode::Zero,
        seed: probe.seed,
        points: probe.points,
        unit_pool,
        parallel: true,
    };
    let curve = cumulative_ablation_curve(model, dataset, &config, None, "probe")?;
    normalized_auc(&curve)
}

/// One probe record of the training monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorOutcome {
    pub records: Vec<MonitorRecord>,
    /// First epoch at which the AUC had dropped at least `delta` below its
    /// running maximum for `patience` consecutive probes.
    pub suggested_stop_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub probe_every: usize,
    /// AUC drop below the running maximum that counts as a violation.
    pub delta: f64,
    /// Consecutive violating probes required to suggest stopping.
    pub patience: usize,
    pub probe: ProbeConfig,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            probe_every: 10,
            delta: 0.02,
            patience: 2,
            probe: ProbeConfig::default(),
        }
    }
}

/// Detects the stop condition over a stream of probe AUCs.
#[derive(Debug, Clone)]
pub struct StopRule {
    delta: f64,
    patience: usize,
    running_max: f64,
    consecutive: usize,
    fired: bool,
}

impl StopRule {
    pub fn new(delta: f64, patience: usize) -> StopRule {
        StopRule {
            delta,
            patience,
            running_max: f64::NEG_INFINITY,
            consecutive: 0,
            fired: false,
        }
    }

    /// Feed one probe; returns true when this probe completes the patience
    /// run (only fires once).
    pub fn observe(&mut self, auc: f64) -> bool {
        let violation = auc <= self.running_max - self.delta;
        self.running_max = self.running_max.max(auc);
        if violation {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if !self.fired && self.consecutive >= self.patience {
            self.fired = true;
            return true;
        }
        false
    }
}

/// Train while probing the ablation AUC every `probe_every` epochs on the
/// *training* split (no test data informs the stop suggestion; test loss is
/// recorded for analysis only). Training always runs to completion; the
/// outcome carries the suggested stop epoch.
pub fn monitor_training(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    train_config: &TrainConfig,
    monitor: &MonitorConfig,
) -> Result<(Vec<EpochMetrics>, MonitorOutcome)> {
    if monitor.probe_every == 0 {
        return Err(Error::Config("probe_every must be >= 1".into()));
    }
    let mut records = Vec::new();
    let mut rule = StopRule::new(monitor.delta, monitor.patience);
    let mut suggested: Option<usize> = None;
    let mut probe_error: Option<Error> = None;

    let metrics = train_with_observer(model, train_set, Some(test_set), train_config, |m, em| {
        let last = em.epoch + 1 == train_config.epochs;
        if em.epoch % monitor.probe_every == 0 || last {
            match probe_auc(m, train_set, &monitor.probe) {
                Ok(AucOutcome::Value(auc)) => {
                    records.push(MonitorRecord {
                        epoch: em.epoch,
                        train_loss: em.train_loss,
                        test_loss: em.test_loss.expect("test set attached"),
                        auc: auc.value,
                    });
                    if rule.observe(auc.value) && suggested.is_none() {
                        suggested = Some(em.epoch);
                    }
                }
                Ok(AucOutcome::Degenerate) => {
                    // Accuracy 0 at count 0: nothing to normalize; skip probe.
                }
                Err(e) => {
                    probe_error = Some(e);
                    return TrainFlow::Stop;
                }
            }
        }
        TrainFlow::Continue
    })?;
    if let Some(e) = probe_error {
        return Err(e);
    }
    Ok((
        metrics,
        MonitorOutcome {
            records,
            suggested_stop_epoch: suggested,
        },
    ))
}

/// One trained configuration of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_id: String,
    pub repeat: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: Option<f64>,
    pub batchnorm: bool,
    pub test_acc: f64,
    pub test_loss: f64,
    pub auc: f64,
}

/// A sweep job: a config identifier plus the train config to run.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub config_id: String,
    pub repeat: usize,
    pub train: TrainConfig,
}

/// Train every job and measure its final test metrics and probe AUC on
/// `auc_set`. Jobs run concurrently; each derives all of its randomness from
/// its own config seed, so results do not depend on scheduling.
pub fn run_sweep(
    jobs: &[SweepJob],
    builder: &(dyn Fn(&SweepJob) -> Result<Model> + Sync),
    train_set: &Dataset,
    test_set: &Dataset,
    auc_set: &Dataset,
    probe: &ProbeConfig,
) -> Result<Vec<SweepResult>> {
    jobs.par_iter()
        .map(|job| {
            let mut model = builder(job)?;
            crate::nn::train(&mut model, train_set, None, &job.train)?;
            let eval = crate::nn::evaluate(&model, test_set, None, None)?;
            let mut job_probe = probe.clone();
            job_probe.seed = derive_seed_indexed(probe.seed, "sweep-probe", job.train.seed);
            let auc = match probe_auc(&model, auc_set, &job_probe)? {
                AucOutcome::Value(v) => v.value,
                AucOutcome::Degenerate => {
                    return Err(Error::Numeric(format!(
                        "config {} repeat {}: degenerate AUC (zero baseline accuracy)",
                        job.config_id, job.repeat
                    )))
                }
            };
            Ok(SweepResult {
                config_id: job.config_id.clone(),
                repeat: job.repeat,
                lr: job.train.lr,
                batch_size: job.train.batch_size,
                dropout: job.train.dropout,
                batchnorm: job.train.batchnorm,
                test_acc: eval.accuracy,
                test_loss: eval.mean_loss,
                auc,
            })
        })
        .collect()
}

/// Indices of `results` in descending AUC order (ties broken by config id,
/// then repeat), plus the pooled Spearman correlation between AUC and test
/// accuracy.
pub fn rank_by_auc(results: &[SweepResult]) -> Result<(Vec<usize>, SpearmanOutcome)> {
    if results.len() < 2 {
        return Err(Error::Config("ranking needs at least 2 results".into()));
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[b]
            .auc
            .partial_cmp(&results[a].auc)
            .expect("finite AUC")
            .then_with(|| results[a].config_id.cmp(&results[b].config_id))
            .then_with(|| results[a].repeat.cmp(&results[b].repeat))
    });
    let aucs: Vec<f64> = results.iter().map(|r| r.auc).collect();
    let accs: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    Ok((order, spearman(&aucs, &accs)?))
}

/// Subselection experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubselectionSummary {
    pub subset_size: usize,
    pub n_trials: usize,
    /// `k -> fraction of trials where the argmax-AUC config was in the
    /// subset's top-k by test accuracy`.
    pub hits: BTreeMap<usize, f64>,
    /// Test-accuracy gap between the subset's best config and the one chosen
    /// by AUC (mean and population std over trials).
    pub gap_mean: f64,
    pub gap_std: f64,
}

/// For each trial, sample `subset_size` results, pick the best by AUC, and
/// check whether it lands in the subset's top-k by test accuracy.
pub fn subselection_experiment(
    results: &[SweepResult],
    subset_size: usize,
    n_trials: usize,
    k_list: &[usize],
    seed: u64,
) -> Result<SubselectionSummary> {
    if subset_size == 0 || subset_size > results.len() {
        return Err(Error::Config(format!(
            "subset size {subset_size} out of range for {} results",
            results.len()
        )));
    }
    if k_list.iter().any(|&k| k == 0 || k > subset_size) {
        return Err(Error::Config(
            "every k must satisfy 1 <= k <= subset_size".into(),
        ));
    }
    if n_trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }

    let mut hit_counts: BTreeMap<usize, usize> = k_list.iter().map(|&k| (k, 0)).collect();
    let mut gaps = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut rng = stream_indexed(seed, "subselect-trial", trial as u64);
        let subset = sample_without_replacement(results.len(), subset_size, &mut rng);
        let (chosen, rank, gap) = evaluate_subset(results, &subset);
        let _ = chosen;
        for (&k, count) in hit_counts.iter_mut() {
            if rank < k {
                *count += 1;
            }
        }
        gaps.push(gap);
    }

    let (gap_mean, gap_var) = crate::tensor::mean_var(&gaps);
    Ok(SubselectionSummary {
        subset_size,
        n_trials,
        hits: hit_counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / n_trials as f64))
            .collect(),
        gap_mean,
        gap_std: gap_var.sqrt(),
    })
}

fn sample_without_replacement(
    n: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rand::Rng::gen_range(rng, i..n);
        indices.swap(i, j);
    }
    indices.truncate(k);
    indices
}

/// Within a subset: the argmax-AUC member, its 0-based rank by test accuracy
/// within the subset, and the accuracy gap to the subset's best. Ties are
/// broken by config id then repeat, matching [`rank_by_auc`].
pub fn evaluate_subset(results: &[SweepResult], subset: &[usize]) -> (usize, usize, f64) {
    let better_auc = |a: usize, b: usize| -> bool {
        results[a]
            .auc
            .partial_cmp(&results[b].auc)
            .expect("finite")
            .then_with(|| results[b].config_id.cmp(&results[a].config_id))
            .then_with(|| results[b].repeat.cmp(&results[a].repeat))
            .is_gt()
    };
    let mut chosen = subset[0];
    for &i in &subset[1..] {
        if better_auc(i, chosen) {
            chosen = i;
        }
    }

    let mut by_acc: Vec<usize> = subset.to_vec();
    by_acc.sort_by(|&a, &b| {
        results[b]
            .test_acc
            .partial_cmp(&results[a].test_acc)
            .expect("finite")
            .then_with(|| results[a].config_id.cmp(&results[b].config_id))
            .then_with(|| results[a].repeat.cmp(&results[b].repeat))
    });
    let rank = by_acc.iter().position(|&i| i == chosen).expect("member");
    let gap = results[by_acc[0]].test_acc - results[chosen].test_acc;
    (chosen, rank, gap)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const SWEEP_HEADER: [&str; 9] = [
    "config_id",
    "repeat",
    "lr",
    "batch_size",
    "dropout",
    "batchnorm",
    "test_acc",
    "test_loss",
    "auc",
];

pub fn write_sweep_results(results: &[SweepResult], path: &std::path::Path) -> Result<()> {
    let header: Vec<String> = SWEEP_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.config_id.clone(),
                r.repeat.to_string(),
                fmt_f64(r.lr),
                r.batch_size.to_string(),
                r.dropout.map(fmt_f64).unwrap_or_default(),
                r.batchnorm.to_string(),
                fmt_f64(r.test_acc),
                fmt_f64(r.test_loss),
                fmt_f64(r.auc),
            ]
        })
        .collect();
    write_atomic(path, csv_document(&header, &rows).as_bytes())
}

pub fn read_sweep_results(path: &std::path::Path) -> Result<Vec<SweepResult>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (header, rows) = parse_csv(&text)?;
    if header != SWEEP_HEADER {
        return Err(Error::Data("unexpected sweep CSV header".into()));
    }
    rows.iter()
        .map(|row| {
            Ok(SweepResult {
                config_id: row[0].clone(),
                repeat: row[1]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad repeat '{}': {e}", row[1])))?,
                lr: parse_f64(&row[2])?,
                batch_size: row[3]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad batch size '{}': {e}", row[3])))?,
                dropout: if row[4].is_empty() {
                    None
                } else {
                    Some(parse_f64(&row[4])?)
                },
                batchnorm: row[5]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad batchnorm flag '{}': {e}", row[5])))?,
                test_acc: parse_f64(&row[6])?,
                test_loss: parse_f64(&row[7])?,
                auc: parse_f64(&row[8])?,
            })
        })
        .collect()
}

const MONITOR_HEADER: [&str; 4] = ["epoch", "train_loss", "test_loss", "auc"];

pub fn write_monitor_records(records: &[MonitorRecord], path: &std::path::Path) -> Result<()> {
    let header: Vec<String> = MONITOR_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.train_loss),
                fmt_f64(r.test_loss),
                fmt_f64(r.auc),
            ]
        })
        .collect();
    write_atomic(path, csv_document(&header, &rows).as_bytes())
}

pub fn read_monitor_records(path: &std::path::Path) -> Result<Vec<MonitorRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (header, rows) = parse_csv(&text)?;
    if header != MONITOR_HEADER {
        return Err(Error::Data("unexpected monitor CSV header".into()));
    }
    rows.iter()
        .map(|row| {
            Ok(MonitorRecord {
                epoch: row[0]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad epoch '{}': {e}", row[0])))?,
                train_loss: parse_f64(&row[1])?,
                test_loss: parse_f64(&row[2])?,
                auc: parse_f64(&row[3])?,
            })
        })
        .collect()
}
