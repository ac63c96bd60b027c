//! Experiment configuration: a TOML document mirrored 1:1 by command-line
//! flags (flags override file values). Unknown keys are rejected at parse
//! time so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use unitscope::data::{
    corrupt_labels, load_cifar10, load_idx, split, synthetic_blobs, synthetic_images,
    CorruptionRecord, CorruptionSpec, Dataset, SyntheticImageSpec,
};
use unitscope::error::{Error, Result};
use unitscope::modelsel::ProbeConfig;
use unitscope::nn::{Model, TrainConfig};
use unitscope::rng::derive_seed;

/// Environment variable holding the default directory for relative data
/// paths.
pub const DATA_DIR_ENV: &str = "UNITSCOPE_DATA_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: String, // "mlp" | "convnet"
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub strides: Vec<usize>,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// "idx" | "cifar" | "blobs" | "synth_images"
    pub source: String,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub batches: Vec<PathBuf>,
    #[serde(default)]
    pub n_per_class: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub contrast: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    /// Cap on total examples after loading.
    #[serde(default)]
    pub subset: Option<usize>,
    /// Fraction held out as the test split.
    #[serde(default)]
    pub test_fraction: Option<f64>,
    /// Fraction of train labels to corrupt.
    #[serde(default)]
    pub corrupt_fraction: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// "hidden" (all hidden activation layers), "last:<k>", or explicit
    /// comma-separated layer indices such as "2,5".
    pub scope: String,
    pub orderings: usize,
    pub clamp: String,
    /// Curve evaluation grid size; 0 evaluates after every ablation.
    pub points: usize,
    pub noise_scales: Vec<f64>,
    pub noise_runs: usize,
    pub bins: usize,
    /// "train" | "test"
    pub split: String,
    /// Cap on examples used in curve/report evaluation (prefix of the split).
    pub eval_limit: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            scope: "hidden".into(),
            orderings: 10,
            clamp: "zero".into(),
            points: 0,
            noise_scales: vec![0.0, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
            noise_runs: 10,
            bins: 32,
            split: "train".into(),
            eval_limit: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub orderings: usize,
    pub unit_sample: Option<usize>,
    pub points: usize,
    pub eval_limit: Option<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            orderings: 3,
            unit_sample: None,
            points: 9,
            eval_limit: None,
        }
    }
}

impl ProbeSection {
    pub fn to_probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            n_orderings: self.orderings,
            unit_sample: self.unit_sample,
            points: self.points,
            eval_limit: self.eval_limit,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    pub probe_every: usize,
    pub delta: f64,
    pub patience: usize,
}

impl Default for MonitorSection {
    fn default() -> Self {
        MonitorSection {
            probe_every: 10,
            delta: 0.02,
            patience: 2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
}

fn default_repeats() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.model.kind.as_str() {
            "mlp" => {
                if self.model.hidden.is_empty() {
                    return Err(Error::Config("model.hidden must be non-empty for an mlp".into()));
                }
            }
            "convnet" => {
                if self.model.channels.is_empty() || self.model.channels.len() != self.model.strides.len() {
                    return Err(Error::Config(
                        "model.channels and model.strides must be non-empty and equal length".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "model.kind must be 'mlp' or 'convnet', got '{other}'"
                )))
            }
        }
        self.train_config(0).validate()?;
        if let Some(f) = self.data.corrupt_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "data.corrupt_fraction must be in [0, 1], got {f}"
                )));
            }
        }
        if let Some(f) = self.data.test_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "data.test_fraction must be in [0, 1), got {f}"
                )));
            }
        }
        let _: unitscope::intervene::ClampMode = self.analysis.clamp.parse()?;
        match self.analysis.split.as_str() {
            "train" | "test" => {}
            other => {
                return Err(Error::Config(format!(
                    "analysis.split must be 'train' or 'test', got '{other}'"
                )))
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed,
            momentum: self.train.momentum,
            dropout: self.model.dropout,
            batchnorm: self.model.batchnorm,
        }
    }

    /// Resolve a data path: absolute paths pass through, relative ones are
    /// joined onto `UNITSCOPE_DATA_DIR` when it is set.
    fn data_path(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            return path.to_path_buf();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(path),
            None => path.to_path_buf(),
        }
    }

    fn require<T: Copy>(value: Option<T>, field: &str) -> Result<T> {
        value.ok_or_else(|| Error::Config(format!("data.{field} is required for this source")))
    }

    /// Load the full dataset described by `[data]` (before splitting and
    /// corruption).
    pub fn load_raw_dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let dataset = match d.source.as_str() {
            "idx" => {
                let images = d
                    .images
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.images is required for source 'idx'".into()))?;
                let labels = d
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.labels is required for source 'idx'".into()))?;
                load_idx(&self.data_path(images), &self.data_path(labels))?
            }
            "cifar" => {
                if d.batches.is_empty() {
                    return Err(Error::Config("data.batches is required for source 'cifar'".into()));
                }
                let paths: Vec<PathBuf> = d.batches.iter().map(|p| self.data_path(p)).collect();
                load_cifar10(&paths)?
            }
            "blobs" => synthetic_blobs(
                Self::require(d.n_per_class, "n_per_class")?,
                Self::require(d.classes, "classes")?,
                Self::require(d.dim, "dim")?,
                Self::require(d.separation, "separation")?,
                derive_seed(self.master_seed, "data"),
            )?,
            "synth_images" => synthetic_images(&SyntheticImageSpec {
                n_per_class: Self::require(d.n_per_class, "n_per_class")?,
                classes: Self::require(d.classes, "classes")?,
                channels: d.channels.unwrap_or(0),
                height: Self::require(d.height, "height")?,
                width: Self::require(d.width, "width")?,
                contrast: d.contrast.unwrap_or(0.9),
                noise: d.noise.unwrap_or(0.25),
                seed: derive_seed(self.master_seed, "data"),
            })?,
            other => {
                return Err(Error::Config(format!(
                    "data.source must be one of idx|cifar|blobs|synth_images, got '{other}'"
                )))
            }
        };
        Ok(match d.subset {
            Some(n) => dataset.take(n, format!("{}[:{}]", dataset.name, n)),
            None => dataset,
        })
    }

    /// Load, split, and corrupt: returns `(train, test, corruption record)`.
    pub fn load_datasets(&self) -> Result<(Dataset, Option<Dataset>, Option<CorruptionRecord>)> {
        let raw = self.load_raw_dataset()?;
        let (train_set, test_set) = match self.data.test_fraction {
            Some(f) if f > 0.0 => {
                let parts = split(&raw, &[1.0 - f, f], derive_seed(self.master_seed, "split"))?;
                let mut it = parts.into_iter();
                (it.next().unwrap(), Some(it.next().unwrap()))
            }
            _ => (raw, None),
        };
        let (train_set, record) = match self.data.corrupt_fraction {
            Some(fraction) if fraction > 0.0 => {
                let spec = CorruptionSpec {
                    fraction,
                    seed: derive_seed(self.master_seed, "corrupt"),
                };
                let (corrupted, record) = corrupt_labels(&train_set, &spec)?;
                (corrupted, Some(record))
            }
            _ => (train_set, None),
        };
        Ok((train_set, test_set, record))
    }

    /// Build the configured model for a dataset's example shape.
    pub fn build_model(&self, dataset: &Dataset, init_seed: u64) -> Result<Model> {
        let shape = dataset.example_shape();
        match self.model.kind.as_str() {
            "mlp" => Model::mlp(
                shape,
                &self.model.hidden,
                dataset.class_count,
                self.model.dropout,
                init_seed,
            ),
            "convnet" => {
                if shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "convnet needs [C, H, W] examples, dataset has shape {shape:?}"
                    )));
                }
                Model::convnet(
                    &[shape[0], shape[1], shape[2]],
                    &self.model.channels,
                    &self.model.strides,
                    dataset.class_count,
                    self.model.batchnorm,
                    init_seed,
                )
            }
            _ => unreachable!("validated"),
        }
    }

    /// Resolve an analysis scope string against a model.
    pub fn resolve_scope(scope: &str, model: &Model) -> Result<Vec<usize>> {
        let hidden = model.activation_layers();
        match scope {
            "hidden" | "all" => Ok(hidden),
            s if s.starts_with("last:") => {
                let k: usize = s[5..]
                    .parse()
                    .map_err(|e| Error::Config(format!("bad scope '{s}': {e}")))?;
                if k == 0 || k > hidden.len() {
                    return Err(Error::Config(format!(
                        "scope '{s}' out of range ({} activation layers)",
                        hidden.len()
                    )));
                }
                Ok(hidden[hidden.len() - k..].to_vec())
            }
            s => {
                let layers: std::result::Result<Vec<usize>, _> =
                    s.split(',').map(|part| part.trim().parse::<usize>()).collect();
                let layers =
                    layers.map_err(|e| Error::Config(format!("bad scope '{s}': {e}")))?;
                for &l in &layers {
                    if !hidden.contains(&l) {
                        return Err(Error::Config(format!(
                            "scope layer {l} is not an activation layer (valid: {hidden:?})"
                        )));
                    }
                }
                Ok(layers)
            }
        }
    }
}
