//! Model checkpoints: a single JSON document holding the architecture, all
//! parameter tensors, batchnorm running statistics, and training provenance.
//! Arrays are decimal-encoded with shortest-round-trip formatting, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

use super::layers::{LayerParams, LayerSpec};
use super::model::{Mode, Model};
use super::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub layer_specs: Vec<LayerSpec>,
    /// `parameters[layer_index]["weight" | "bias" | "gamma" | "beta"]`.
    pub parameters: Vec<BTreeMap<String, Tensor>>,
    /// Batchnorm running statistics, keyed by layer index (as a string, for
    /// JSON object keys).
    pub batchnorm_running: BTreeMap<String, RunningStats>,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        train_config: Option<&TrainConfig>,
        seed: u64,
        epoch: usize,
    ) -> Checkpoint {
        let mut parameters = Vec::with_capacity(model.layers.len());
        let mut batchnorm_running = BTreeMap::new();
        for (i, layer) in model.layers.iter().enumerate() {
            let mut tensors = BTreeMap::new();
            match &layer.params {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    tensors.insert("weight".to_string(), weight.clone());
                    tensors.insert("bias".to_string(), bias.clone());
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    tensors.insert("gamma".to_string(), gamma.clone());
                    tensors.insert("beta".to_string(), beta.clone());
                    batchnorm_running.insert(
                        i.to_string(),
                        RunningStats {
                            mean: running_mean.clone(),
                            var: running_var.clone(),
                        },
                    );
                }
                LayerParams::None => {}
            }
            parameters.push(tensors);
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            input_shape: model.input_shape.clone(),
            layer_specs: model.layers.iter().map(|l| l.spec.clone()).collect(),
            parameters,
            batchnorm_running,
            train_config: train_config.cloned(),
            seed,
            epoch,
        }
    }

    /// Rebuild the model in eval mode. Shapes are re-validated against the
    /// layer specs.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.parameters.len() != self.layer_specs.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter entries for {} layers",
                self.parameters.len(),
                self.layer_specs.len()
            )));
        }
        // Seed irrelevant: every parameter is overwritten below.
        let mut model = Model::new(&self.input_shape, &self.layer_specs, 0)?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let tensors = &self.parameters[i];
            match &mut layer.params {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    *weight = take_tensor(tensors, i, "weight", &weight.shape)?;
                    *bias = take_tensor(tensors, i, "bias", &bias.shape)?;
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    *gamma = take_tensor(tensors, i, "gamma", &gamma.shape)?;
                    *beta = take_tensor(tensors, i, "beta", &beta.shape)?;
                    let running = self.batchnorm_running.get(&i.to_string()).ok_or_else(|| {
                        Error::Data(format!("missing running stats for batchnorm layer {i}"))
                    })?;
                    check_shape(&running.mean, &running_mean.shape, i, "running mean")?;
                    check_shape(&running.var, &running_var.shape, i, "running var")?;
                    *running_mean = running.mean.clone();
                    *running_var = running.var.clone();
                }
                LayerParams::None => {}
            }
        }
        model.set_mode(Mode::Eval);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("checkpoint serialization: {e}")))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: invalid checkpoint: {e}", path.display())))
    }
}

fn take_tensor(
    tensors: &BTreeMap<String, Tensor>,
    layer: usize,
    name: &str,
    expect_shape: &[usize],
) -> Result<Tensor> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::Data(format!("missing tensor '{name}' for layer {layer}")))?;
    check_shape(t, expect_shape, layer, name)?;
    Ok(t.clone())
}

fn check_shape(t: &Tensor, expect: &[usize], layer: usize, name: &str) -> Result<()> {
    if t.shape != expect {
        return Err(Error::Data(format!(
            "layer {layer} {name}: shape {:?} does not match spec {:?}",
            t.shape, expect
        )));
    }
    if t.data.len() != expect.iter().product::<usize>() {
        return Err(Error::Data(format!(
            "layer {layer} {name}: data length {} does not match shape {:?}",
            t.data.len(),
            t.shape
        )));
    }
    Ok(())
}

/// Model equality up to bit-identical parameters and running stats.
pub fn models_bit_equal(a: &Model, b: &Model) -> bool {
    if a.input_shape != b.input_shape || a.layers.len() != b.layers.len() {
        return false;
    }
    a.layers.iter().zip(&b.layers).all(|(la, lb)| {
        la.spec == lb.spec
            && match (&la.params, &lb.params) {
                (
                    LayerParams::Dense { weight: wa, bias: ba },
                    LayerParams::Dense { weight: wb, bias: bb },
                )
                | (
                    LayerParams::Conv2d { weight: wa, bias: ba },
                    LayerParams::Conv2d { weight: wb, bias: bb },
                ) => wa.bit_eq(wb) && ba.bit_eq(bb),
                (
                    LayerParams::BatchNorm {
                        gamma: ga,
                        beta: ba,
                        running_mean: ma,
                        running_var: va,
                    },
                    LayerParams::BatchNorm {
                        gamma: gb,
                        beta: bb,
                        running_mean: mb,
                        running_var: vb,
                    },
                ) => ga.bit_eq(gb) && ba.bit_eq(bb) && ma.bit_eq(mb) && va.bit_eq(vb),
                (LayerParams::None, LayerParams::None) => true,
                _ => false,
            }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::train::{train, TrainConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let data = synthetic_blobs(16, 2, 4, 3.0, 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 8,
            epochs: 3,
            seed: 2,
            momentum: 0.0,
            dropout: None,
            batchnorm: false,
        };
        let mut model = Model::mlp(&[4], &[6], 2, None, 3).unwrap();
        train(&mut model, &data, None, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        Checkpoint::from_model(&model, Some(&cfg), 2, 3)
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert!(models_bit_equal(&model, &loaded));
    }

    #[test]
    fn batchnorm_running_stats_round_trip() {
        let data = synthetic_blobs(12, 2, 3, 2.0, 4).unwrap();
        let specs = vec![
            LayerSpec::Dense {
                in_width: 3,
                out_width: 5,
            },
            LayerSpec::BatchNorm {
                momentum: 0.1,
                epsilon: 1e-5,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_width: 5,
                out_width: 2,
            },
        ];
        let mut model = Model::new(&[3], &specs, 5).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 6,
            epochs: 2,
            seed: 6,
            momentum: 0.0,
            dropout: None,
            batchnorm: true,
        };
        train(&mut model, &data, None, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bn.ckpt.json");
        Checkpoint::from_model(&model, Some(&cfg), 6, 2)
            .save(&path)
            .unwrap();
        let loaded = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert!(models_bit_equal(&model, &loaded));
    }

    #[test]
    fn corrupt_version_rejected() {
        let model = Model::mlp(&[2], &[3], 2, None, 1).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, None, 1, 0);
        ckpt.format_version = 99;
        assert!(matches!(ckpt.to_model(), Err(Error::Data(_))));
    }
}
