//! Subcommand implementations. Every command is reproducible from
//! `(config, master seed)` and writes its artifacts atomically.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use unitscope::data::Dataset;
use unitscope::error::{Error, Result};
use unitscope::intervene::ClampMode;
use unitscope::io::{csv_document, fmt_f64, sha256_file, write_atomic};
use unitscope::modelsel::{
    monitor_training, normalized_auc, rank_by_auc, run_sweep, subselection_experiment,
    write_monitor_records, write_sweep_results, AucOutcome, MonitorConfig, SweepJob,
};
use unitscope::nn::{train, Checkpoint, EpochMetrics, Model};
use unitscope::perturb::{
    compute_unit_stats, cumulative_ablation_curve, noise_sweep, write_curve, write_noise_sweep,
    CurveConfig,
};
use unitscope::rng::{derive_seed, derive_seed_indexed};
use unitscope::selectivity::{build_report, per_layer_correlation, write_report};

use crate::config::ExperimentConfig;

fn out_dir(config: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn now_unix() -> Option<u64> {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let has_test = metrics.iter().any(|m| m.test_loss.is_some());
    let mut header = vec!["epoch".to_string(), "train_loss".into(), "train_acc".into()];
    if has_test {
        header.push("test_loss".into());
        header.push("test_acc".into());
    }
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| {
            let mut row = vec![
                m.epoch.to_string(),
                fmt_f64(m.train_loss),
                fmt_f64(m.train_acc),
            ];
            if has_test {
                row.push(m.test_loss.map(fmt_f64).unwrap_or_default());
                row.push(m.test_acc.map(fmt_f64).unwrap_or_default());
            }
            row
        })
        .collect();
    write_atomic(path, csv_document(&header, &rows).as_bytes())
}

fn load_model(checkpoint: &Path) -> Result<Model> {
    Checkpoint::load(checkpoint)?.to_model()
}

/// Pick the analysis split: the train split (with corruption applied, as
/// trained on) or the held-out test split.
fn analysis_split<'a>(
    split: &str,
    train_set: &'a Dataset,
    test_set: Option<&'a Dataset>,
) -> Result<&'a Dataset> {
    match split {
        "train" => Ok(train_set),
        "test" => test_set.ok_or_else(|| {
            Error::Config("analysis split 'test' requires data.test_fraction > 0".into())
        }),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

fn apply_eval_limit(dataset: &Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < dataset.len() => dataset.take(n, format!("{}[:{n}]", dataset.name)),
        _ => dataset.clone(),
    }
}

pub fn cmd_train(config: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let (train_set, test_set, corruption) = config.load_datasets()?;
    let mut model = config.build_model(&train_set, derive_seed(config.master_seed, "init"))?;
    let train_cfg = config.train_config(derive_seed(config.master_seed, "train"));
    let metrics = train(&mut model, &train_set, test_set.as_ref(), &train_cfg)?;

    let ckpt = Checkpoint::from_model(
        &model,
        Some(&train_cfg),
        config.master_seed,
        metrics.len(),
    );
    ckpt.save(&dir.join("model.ckpt.json"))?;
    write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
    if let Some(record) = corruption {
        let json = serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Data(format!("corruption record: {e}")))?;
        write_atomic(&dir.join("corruption.json"), json.as_bytes())?;
    }
    if let Some(last) = metrics.last() {
        let test = match (last.test_loss, last.test_acc) {
            (Some(l), Some(a)) => format!(" test_loss {} test_acc {}", fmt_f64(l), fmt_f64(a)),
            _ => String::new(),
        };
        println!(
            "epoch {} train_loss {} train_acc {}{}",
            last.epoch,
            fmt_f64(last.train_loss),
            fmt_f64(last.train_acc),
            test
        );
    }
    Ok(())
}

pub struct AblateFlags {
    pub checkpoint: PathBuf,
    pub scope: Option<String>,
    pub orderings: Option<usize>,
    pub clamp: Option<String>,
    pub split: Option<String>,
    pub seed: Option<u64>,
    pub points: Option<usize>,
}

pub fn cmd_ablate(config: &ExperimentConfig, flags: &AblateFlags, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_model(&flags.checkpoint)?;
    let (train_set, test_set, _) = config.load_datasets()?;

    let scope_str = flags.scope.clone().unwrap_or_else(|| config.analysis.scope.clone());
    let scope = ExperimentConfig::resolve_scope(&scope_str, &model)?;
    let clamp: ClampMode = flags
        .clamp
        .clone()
        .unwrap_or_else(|| config.analysis.clamp.clone())
        .parse()?;
    let split = flags.split.clone().unwrap_or_else(|| config.analysis.split.clone());
    let dataset = analysis_split(&split, &train_set, test_set.as_ref())?;
    let dataset = apply_eval_limit(dataset, config.analysis.eval_limit);
    let seed = flags.seed.unwrap_or_else(|| derive_seed(config.master_seed, "ablate"));
    let points = flags.points.unwrap_or(config.analysis.points);

    let stats = if clamp == ClampMode::Mean {
        // Mean clamps use statistics over the training split.
        Some(Arc::new(compute_unit_stats(&model, &train_set)?))
    } else {
        None
    };

    let curve_cfg = CurveConfig {
        layer_scope: scope,
        n_orderings: flags.orderings.unwrap_or(config.analysis.orderings),
        clamp_mode: clamp,
        seed,
        points: if points == 0 { usize::MAX } else { points },
        unit_pool: None,
        parallel: true,
    };
    let mut curve = cumulative_ablation_curve(&model, &dataset, &curve_cfg, stats, &split)?;
    curve.meta.checkpoint_sha256 = Some(sha256_file(&flags.checkpoint)?);
    curve.meta.created_unix = now_unix();
    write_curve(&curve, &dir.join("curve.csv"), &dir.join("curve.json"))?;

    match normalized_auc(&curve)? {
        AucOutcome::Value(auc) => println!("{}", fmt_f64(auc.value)),
        AucOutcome::Degenerate => println!("degenerate"),
    }
    Ok(())
}

pub struct NoiseFlags {
    pub checkpoint: PathBuf,
    pub scales: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub split: Option<String>,
}

pub fn cmd_noise(config: &ExperimentConfig, flags: &NoiseFlags, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_model(&flags.checkpoint)?;
    let (train_set, test_set, _) = config.load_datasets()?;
    let split = flags.split.clone().unwrap_or_else(|| config.analysis.split.clone());
    let dataset = analysis_split(&split, &train_set, test_set.as_ref())?;
    let dataset = apply_eval_limit(dataset, config.analysis.eval_limit);

    // Noise variance is normalized by unit variances over the training set.
    let stats = Arc::new(compute_unit_stats(&model, &train_set)?);
    let scales = flags
        .scales
        .clone()
        .unwrap_or_else(|| config.analysis.noise_scales.clone());
    let mut sweep = noise_sweep(
        &model,
        &dataset,
        &scales,
        stats,
        flags.runs.unwrap_or(config.analysis.noise_runs),
        flags.seed.unwrap_or_else(|| derive_seed(config.master_seed, "noise")),
        &split,
    )?;
    sweep.meta.checkpoint_sha256 = Some(sha256_file(&flags.checkpoint)?);
    sweep.meta.created_unix = now_unix();
    write_noise_sweep(&sweep, &dir.join("noise.csv"), &dir.join("noise.json"))?;
    Ok(())
}

pub struct SelectivityFlags {
    pub checkpoint: PathBuf,
    pub bins: Option<usize>,
    pub split: Option<String>,
    pub clamp: Option<String>,
    pub scope: Option<String>,
}

pub fn cmd_selectivity(
    config: &ExperimentConfig,
    flags: &SelectivityFlags,
    out: Option<&Path>,
) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_model(&flags.checkpoint)?;
    let (train_set, test_set, _) = config.load_datasets()?;
    let split = flags
        .split
        .clone()
        .unwrap_or_else(|| "test".to_string());
    let dataset = analysis_split(&split, &train_set, test_set.as_ref())?;
    let dataset = apply_eval_limit(dataset, config.analysis.eval_limit);

    let scope_str = flags.scope.clone().unwrap_or_else(|| config.analysis.scope.clone());
    let scope = ExperimentConfig::resolve_scope(&scope_str, &model)?;
    let clamp: ClampMode = flags
        .clamp
        .clone()
        .unwrap_or_else(|| config.analysis.clamp.clone())
        .parse()?;
    let stats = if clamp == ClampMode::Mean {
        Some(Arc::new(compute_unit_stats(&model, &train_set)?))
    } else {
        None
    };

    let report = build_report(
        &model,
        &dataset,
        &scope,
        flags.bins.unwrap_or(config.analysis.bins),
        clamp,
        stats,
    )?;
    write_report(&report, &dir.join("report.csv"))?;
    let correlations = per_layer_correlation(&report)?;
    let json = serde_json::to_string_pretty(&correlations)
        .map_err(|e| Error::Data(format!("correlation summary: {e}")))?;
    write_atomic(&dir.join("correlations.json"), json.as_bytes())?;
    Ok(())
}

pub struct SweepFlags {
    pub jobs: Option<usize>,
    pub subselect: Option<usize>,
    pub trials: usize,
    pub topk: Vec<usize>,
    pub seed: Option<u64>,
}

pub fn cmd_sweep(config: &ExperimentConfig, flags: &SweepFlags, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let sweep_cfg = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let (train_set, test_set, _) = config.load_datasets()?;
    let test_set = test_set.ok_or_else(|| {
        Error::Config("sweep requires data.test_fraction > 0 for test metrics".into())
    })?;

    let mut jobs = Vec::new();
    let mut idx = 0usize;
    for &lr in &sweep_cfg.lrs {
        for &batch_size in &sweep_cfg.batch_sizes {
            for repeat in 0..sweep_cfg.repeats {
                let seed = derive_seed_indexed(config.master_seed, "sweep-job", jobs.len() as u64);
                jobs.push(SweepJob {
                    config_id: format!("c{idx:03}"),
                    repeat,
                    train: unitscope::nn::TrainConfig {
                        lr,
                        batch_size,
                        epochs: sweep_cfg.epochs,
                        seed,
                        momentum: sweep_cfg.momentum,
                        dropout: config.model.dropout,
                        batchnorm: config.model.batchnorm,
                    },
                });
            }
            idx += 1;
        }
    }

    if let Some(n) = flags.jobs {
        // Bound worker parallelism; inner math parallelism shares the pool.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }

    let probe_seed = flags.seed.unwrap_or_else(|| derive_seed(config.master_seed, "sweep-probe"));
    let probe = config.probe.to_probe_config(probe_seed);
    // AUC curves for sweep ranking are measured on the held-out split.
    let results = run_sweep(
        &jobs,
        &|job: &SweepJob| config.build_model(&train_set, derive_seed(job.train.seed, "init")),
        &train_set,
        &test_set,
        &test_set,
        &probe,
    )?;
    write_sweep_results(&results, &dir.join("sweep.csv"))?;

    let (_, rho) = rank_by_auc(&results)?;
    match rho.value() {
        Some(v) => println!("{}", fmt_f64(v)),
        None => println!("degenerate"),
    }

    if let Some(subset_size) = flags.subselect {
        let summary = subselection_experiment(
            &results,
            subset_size,
            flags.trials,
            &flags.topk,
            derive_seed(config.master_seed, "subselect"),
        )?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Data(format!("subselection summary: {e}")))?;
        write_atomic(&dir.join("subselect.json"), json.as_bytes())?;
    }
    Ok(())
}

pub struct MonitorFlags {
    pub probe_every: Option<usize>,
    pub delta: Option<f64>,
    pub patience: Option<usize>,
}

pub fn cmd_monitor(config: &ExperimentConfig, flags: &MonitorFlags, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let (train_set, test_set, _) = config.load_datasets()?;
    let test_set = test_set
        .ok_or_else(|| Error::Config("monitor requires data.test_fraction > 0".into()))?;

    let mut model = config.build_model(&train_set, derive_seed(config.master_seed, "init"))?;
    let train_cfg = config.train_config(derive_seed(config.master_seed, "train"));
    let monitor_cfg = MonitorConfig {
        probe_every: flags.probe_every.unwrap_or(config.monitor.probe_every),
        delta: flags.delta.unwrap_or(config.monitor.delta),
        patience: flags.patience.unwrap_or(config.monitor.patience),
        probe: config
            .probe
            .to_probe_config(derive_seed(config.master_seed, "probe")),
    };
    let (metrics, outcome) = monitor_training(&mut model, &train_set, &test_set, &train_cfg, &monitor_cfg)?;

    write_monitor_records(&outcome.records, &dir.join("monitor.csv"))?;
    write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
    let ckpt = Checkpoint::from_model(&model, Some(&train_cfg), config.master_seed, metrics.len());
    ckpt.save(&dir.join("model.ckpt.json"))?;

    match outcome.suggested_stop_epoch {
        Some(epoch) => println!("{epoch}"),
        None => println!("none"),
    }
    Ok(())
}

