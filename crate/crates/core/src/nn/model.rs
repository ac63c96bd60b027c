//! Model assembly, forward/backward passes, and SGD.
//!
//! Interventions hook into the forward pass immediately after each ReLU:
//! clamped units are overwritten with their fixed value and noise is added on
//! top, so a clamped unit holds the clamp value exactly regardless of input
//! or noise. Ablation points are therefore the ReLU layer indices; for a
//! conv → batchnorm → relu block the clamp acts on the post-batchnorm,
//! post-nonlinearity feature map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervene::{ClampMode, InterventionPlan, UnitRef};
use crate::rng::stream_indexed;
use crate::tensor::Tensor;

use super::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward_train, relu_backward, relu_forward,
    softmax_xent, LayerCache, LayerGrads, LayerParams, LayerSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// One layer: its spec plus parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// An ordered stack of layers with a fixed per-example input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

/// Per-parameter gradients, aligned with `Model::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Classical momentum accumulation: `self = momentum * self + grads`.
    pub fn momentum_update(&mut self, momentum: f64, grads: &Gradients) -> Result<()> {
        if self.layers.len() != grads.layers.len() {
            return Err(Error::State("velocity/gradient layer count mismatch".into()));
        }
        for (v, g) in self.layers.iter_mut().zip(&grads.layers) {
            let pairs: Vec<(&mut Tensor, &Tensor)> = match (v, g) {
                (
                    LayerGrads::Dense { d_weight: vw, d_bias: vb },
                    LayerGrads::Dense { d_weight: gw, d_bias: gb },
                )
                | (
                    LayerGrads::Conv2d { d_weight: vw, d_bias: vb },
                    LayerGrads::Conv2d { d_weight: gw, d_bias: gb },
                ) => vec![(vw, gw), (vb, gb)],
                (
                    LayerGrads::BatchNorm { d_gamma: vg, d_beta: vb },
                    LayerGrads::BatchNorm { d_gamma: gg, d_beta: gb },
                ) => vec![(vg, gg), (vb, gb)],
                (LayerGrads::None, LayerGrads::None) => vec![],
                _ => return Err(Error::State("velocity/gradient kind mismatch".into())),
            };
            for (vt, gt) in pairs {
                for (v, g) in vt.data.iter_mut().zip(&gt.data) {
                    *v = momentum * *v + g;
                }
            }
        }
        Ok(())
    }
}

/// Activations of one forward pass. `activations[0]` is the input batch and
/// `activations[i + 1]` the output of layer `i`; the last entry holds the
/// logits.
#[derive(Debug)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    pub loss: Option<f64>,
    pub mode: Mode,
    pub intervened: bool,
    caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace holds >= 1 tensor")
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

impl Model {
    /// Build a model from layer specs, validating shape compatibility and
    /// initializing parameters from the seed: fan-in-scaled uniform weights
    /// (bound `sqrt(6 / fan_in)`), zero biases, batchnorm gamma 1 / beta 0.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Model> {
        let mut rng = crate::rng::stream(seed, "init");
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out_shape = spec.output_shape(&shape).map_err(|e| {
                Error::Config(format!("layer {i} ({}): {e}", spec.kind_name()))
            })?;
            let params = match spec {
                LayerSpec::Dense { in_width, out_width } => {
                    let bound = (6.0 / *in_width as f64).sqrt();
                    LayerParams::Dense {
                        weight: init_uniform(&mut rng, &[*out_width, *in_width], bound),
                        bias: Tensor::zeros(&[*out_width]),
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    LayerParams::Conv2d {
                        weight: init_uniform(
                            &mut rng,
                            &[*out_channels, *in_channels, *kernel, *kernel],
                            bound,
                        ),
                        bias: Tensor::zeros(&[*out_channels]),
                    }
                }
                LayerSpec::BatchNorm { .. } => {
                    let features = shape[0];
                    LayerParams::BatchNorm {
                        gamma: Tensor::from_vec(&[features], vec![1.0; features])?,
                        beta: Tensor::zeros(&[features]),
                        running_mean: Tensor::zeros(&[features]),
                        running_var: Tensor::from_vec(&[features], vec![1.0; features])?,
                    }
                }
                _ => LayerParams::None,
            };
            layers.push(Layer {
                spec: spec.clone(),
                params,
            });
            shape = out_shape;
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            mode: Mode::Eval,
        })
    }

    /// MLP: `input -> flatten -> [dense -> (dropout) -> relu]* -> dense`.
    ///
    /// The leading flatten lets the same model consume image tensors and flat
    /// feature vectors. Dropout, when enabled, sits between the affine map
    /// and the ReLU so the analysis point (post-ReLU) sees the dropped
    /// activations during training.
    pub fn mlp(
        input_shape: &[usize],
        hidden: &[usize],
        classes: usize,
        dropout: Option<f64>,
        seed: u64,
    ) -> Result<Model> {
        let mut specs = vec![LayerSpec::Flatten];
        let mut width = input_shape.iter().product();
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                in_width: width,
                out_width: h,
            });
            if let Some(p) = dropout {
                specs.push(LayerSpec::Dropout { p });
            }
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense {
            in_width: width,
            out_width: classes,
        });
        Model::new(input_shape, &specs, seed)
    }

    /// Convnet: `[conv -> (batchnorm) -> relu]* -> flatten -> dense`.
    pub fn convnet(
        input_shape: &[usize; 3],
        channels: &[usize],
        strides: &[usize],
        classes: usize,
        batchnorm: bool,
        seed: u64,
    ) -> Result<Model> {
        if channels.len() != strides.len() {
            return Err(Error::Config(format!(
                "{} channel counts but {} strides",
                channels.len(),
                strides.len()
            )));
        }
        let mut specs = Vec::new();
        let mut in_ch = input_shape[0];
        let (mut h, mut w) = (input_shape[1], input_shape[2]);
        for (&c, &s) in channels.iter().zip(strides) {
            specs.push(LayerSpec::Conv2d {
                in_channels: in_ch,
                out_channels: c,
                kernel: 3,
                stride: s,
            });
            if batchnorm {
                specs.push(LayerSpec::BatchNorm {
                    momentum: 0.1,
                    epsilon: 1e-5,
                });
            }
            specs.push(LayerSpec::Relu);
            in_ch = c;
            h = h.div_ceil(s);
            w = w.div_ceil(s);
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense {
            in_width: in_ch * h * w,
            out_width: classes,
        });
        Model::new(&[input_shape[0], input_shape[1], input_shape[2]], &specs, seed)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Per-layer output shapes (per example), input included at index 0.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for layer in &self.layers {
            cur = layer
                .spec
                .output_shape(&cur)
                .expect("validated at construction");
            shapes.push(cur.clone());
        }
        shapes
    }

    /// Indices of the ReLU layers: the ablation/analysis points. The output
    /// projection has no ReLU, so it is never in scope.
    pub fn activation_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Relu))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of units at an activation layer: dense width, or channel count
    /// for conv feature maps.
    pub fn units_at(&self, layer: usize) -> Result<usize> {
        self.check_activation_layer(layer)?;
        let shape = &self.shapes()[layer + 1];
        Ok(shape[0])
    }

    /// Spatial elements per unit at an activation layer (1 for dense).
    pub fn unit_elements_at(&self, layer: usize) -> Result<usize> {
        self.check_activation_layer(layer)?;
        let shape = &self.shapes()[layer + 1];
        Ok(shape.iter().skip(1).product())
    }

    /// All units across the given activation layers, pooled in layer order.
    pub fn pooled_units(&self, layer_scope: &[usize]) -> Result<Vec<UnitRef>> {
        let mut units = Vec::new();
        for &layer in layer_scope {
            for unit in 0..self.units_at(layer)? {
                units.push(UnitRef { layer, unit });
            }
        }
        Ok(units)
    }

    fn check_activation_layer(&self, layer: usize) -> Result<()> {
        match self.layers.get(layer) {
            Some(l) if matches!(l.spec, LayerSpec::Relu) => Ok(()),
            Some(l) => Err(Error::Plan(format!(
                "layer {layer} is a {} layer, not an activation layer",
                l.spec.kind_name()
            ))),
            None => Err(Error::Plan(format!(
                "layer index {layer} out of range ({} layers)",
                self.layers.len()
            ))),
        }
    }

    /// Validate a plan against this model: every referenced layer must be an
    /// activation layer, every unit in range, and mean clamps / noise must
    /// have statistics covering the units they touch.
    pub fn validate_plan(&self, plan: &InterventionPlan) -> Result<()> {
        plan.validate()?;
        for (unit, mode) in &plan.clamps {
            let width = self.units_at(unit.layer)?;
            if unit.unit >= width {
                return Err(Error::Plan(format!(
                    "unit {} out of range at layer {} (width {width})",
                    unit.unit, unit.layer
                )));
            }
            if *mode == ClampMode::Mean {
                let stats = plan.stats.as_ref().expect("checked by plan.validate");
                stats.mean(*unit)?;
            }
        }
        if plan.noise.is_some() {
            let stats = plan.stats.as_ref().expect("checked by plan.validate");
            for layer in self.activation_layers() {
                let layer_stats = stats.layer(layer)?;
                let width = self.units_at(layer)?;
                if layer_stats.means.len() != width || layer_stats.variances.len() != width {
                    return Err(Error::Plan(format!(
                        "statistics for layer {layer} cover {} units, model has {width}",
                        layer_stats.means.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<()> {
        let expect: Vec<usize> = std::iter::once(batch.batch())
            .chain(self.input_shape.iter().copied())
            .collect();
        if batch.shape != expect {
            return Err(Error::Config(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape, expect
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass: batchnorm uses running statistics, dropout is
    /// the identity, and an optional intervention plan is applied after each
    /// ReLU. `example_offset` is the dataset index of the first row of
    /// `batch`; noise streams are derived per example from it, so results do
    /// not depend on how a dataset is batched.
    pub fn forward_eval(
        &self,
        batch: &Tensor,
        labels: Option<&[usize]>,
        plan: Option<&InterventionPlan>,
        example_offset: usize,
    ) -> Result<ForwardTrace> {
        if self.mode != Mode::Eval {
            return Err(Error::State("forward_eval requires eval mode".into()));
        }
        self.check_batch_shape(batch)?;
        if let Some(plan) = plan {
            self.validate_plan(plan)?;
        }
        let batch_size = batch.batch();

        let mut noise_rngs: Option<Vec<ChaCha8Rng>> = plan.and_then(|p| {
            p.noise.as_ref().map(|n| {
                (0..batch_size)
                    .map(|b| stream_indexed(n.seed, "noise-example", (example_offset + b) as u64))
                    .collect()
            })
        });

        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        let mut current = batch.clone();

        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = match (&layer.spec, &layer.params) {
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                    dense_forward(weight, bias, &current)
                }
                (LayerSpec::Conv2d { stride, .. }, LayerParams::Conv2d { weight, bias }) => {
                    conv_forward(weight, bias, *stride, &current).0
                }
                (LayerSpec::Relu, _) => relu_forward(&current),
                (
                    LayerSpec::BatchNorm { epsilon, .. },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => bn_forward_eval(gamma, beta, running_mean, running_var, *epsilon, &current),
                (LayerSpec::Dropout { .. }, _) => current.clone(),
                (LayerSpec::Flatten, _) => {
                    let mut out = current.clone();
                    out.shape = vec![batch_size, current.row_len()];
                    out
                }
                _ => unreachable!("params always match spec"),
            };

            // Interventions bind to post-ReLU activations.
            if matches!(layer.spec, LayerSpec::Relu) {
                if let Some(plan) = plan {
                    apply_clamps(&mut out, i, plan)?;
                    if let Some(noise) = &plan.noise {
                        let stats = plan.stats.as_ref().expect("validated");
                        let layer_stats = stats.layer(i)?;
                        let rngs = noise_rngs.as_mut().expect("created when noise is set");
                        add_unit_noise(&mut out, noise.scale, &layer_stats.variances, rngs);
                        // Re-assert clamps so clamped units ignore noise too.
                        apply_clamps(&mut out, i, plan)?;
                    }
                }
            }

            activations.push(out.clone());
            current = out;
        }

        let loss = match labels {
            Some(labels) => {
                let (loss, _) = softmax_xent(&current, labels)?;
                Some(loss)
            }
            None => None,
        };

        Ok(ForwardTrace {
            activations,
            loss,
            mode: Mode::Eval,
            intervened: plan.map(|p| !p.is_empty()).unwrap_or(false),
            caches: Vec::new(),
        })
    }

    /// Train-mode forward pass: batchnorm normalizes with batch statistics
    /// (updating running stats), dropout draws a fresh mask from `rng`, and
    /// per-layer caches are kept for [`Model::backward`].
    pub fn forward_train(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        if self.mode != Mode::Train {
            return Err(Error::State("forward_train requires train mode".into()));
        }
        self.check_batch_shape(batch)?;
        let batch_size = batch.batch();

        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();

        for layer in self.layers.iter_mut() {
            let (out, cache) = match (&layer.spec, &mut layer.params) {
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
                    (dense_forward(weight, bias, &current), LayerCache::None)
                }
                (LayerSpec::Conv2d { stride, .. }, LayerParams::Conv2d { weight, bias }) => {
                    let (out, patches) = conv_forward(weight, bias, *stride, &current);
                    (out, LayerCache::Conv { patches })
                }
                (LayerSpec::Relu, _) => (relu_forward(&current), LayerCache::None),
                (
                    LayerSpec::BatchNorm { momentum, epsilon },
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => bn_forward_train(
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    *momentum,
                    *epsilon,
                    &current,
                ),
                (LayerSpec::Dropout { p }, _) => dropout_forward_train(*p, &current, rng),
                (LayerSpec::Flatten, _) => {
                    let mut out = current.clone();
                    out.shape = vec![batch_size, current.row_len()];
                    (out, LayerCache::None)
                }
                _ => unreachable!("params always match spec"),
            };
            activations.push(out.clone());
            caches.push(cache);
            current = out;
        }

        let (loss, _) = softmax_xent(&current, labels)?;
        Ok(ForwardTrace {
            activations,
            loss: Some(loss),
            mode: Mode::Train,
            intervened: false,
            caches,
        })
    }

    /// Backpropagation through a train-mode, intervention-free trace.
    /// Returns gradients for every parameterized layer.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
        if trace.mode != Mode::Train {
            return Err(Error::State("backward requires a train-mode trace".into()));
        }
        if trace.intervened {
            return Err(Error::State(
                "backward requires a trace without interventions".into(),
            ));
        }
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::State(format!(
                "trace has {} activations, model expects {}",
                trace.activations.len(),
                self.layers.len() + 1
            )));
        }

        let (_, mut grad) = softmax_xent(trace.logits(), labels)?;
        let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for _ in 0..self.layers.len() {
            layer_grads.push(LayerGrads::None);
        }

        for i in (0..self.layers.len()).rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            let layer = &self.layers[i];
            grad = match (&layer.spec, &layer.params) {
                (LayerSpec::Dense { .. }, LayerParams::Dense { weight, .. }) => {
                    let (dx, dw, db) = dense_backward(weight, input, &grad);
                    layer_grads[i] = LayerGrads::Dense {
                        d_weight: dw,
                        d_bias: db,
                    };
                    dx
                }
                (LayerSpec::Conv2d { stride, .. }, LayerParams::Conv2d { weight, .. }) => {
                    let LayerCache::Conv { patches } = &trace.caches[i] else {
                        return Err(Error::State("conv cache missing from trace".into()));
                    };
                    let (dx, dw, db) = conv_backward(weight, *stride, &input.shape, patches, &grad);
                    layer_grads[i] = LayerGrads::Conv2d {
                        d_weight: dw,
                        d_bias: db,
                    };
                    dx
                }
                (LayerSpec::Relu, _) => relu_backward(output, &grad),
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { gamma, .. }) => {
                    let (dx, dg, db) = bn_backward(gamma, &trace.caches[i], &input.shape, &grad);
                    layer_grads[i] = LayerGrads::BatchNorm {
                        d_gamma: dg,
                        d_beta: db,
                    };
                    dx
                }
                (LayerSpec::Dropout { .. }, _) => dropout_backward(&trace.caches[i], &grad),
                (LayerSpec::Flatten, _) => {
                    let mut dx = grad.clone();
                    dx.shape = input.shape.clone();
                    dx
                }
                _ => unreachable!("params always match spec"),
            };
        }
        Ok(Gradients {
            layers: layer_grads,
        })
    }

    /// One SGD step: `p -= lr * g`. Batchnorm running statistics are not
    /// touched. Non-finite gradients abort with the offending layer index.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::State(format!(
                "gradients cover {} layers, model has {}",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, grad)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            let pairs: Vec<(&mut Tensor, &Tensor)> = match (&mut layer.params, grad) {
                (LayerParams::Dense { weight, bias }, LayerGrads::Dense { d_weight, d_bias }) => {
                    vec![(weight, d_weight), (bias, d_bias)]
                }
                (LayerParams::Conv2d { weight, bias }, LayerGrads::Conv2d { d_weight, d_bias }) => {
                    vec![(weight, d_weight), (bias, d_bias)]
                }
                (
                    LayerParams::BatchNorm { gamma, beta, .. },
                    LayerGrads::BatchNorm { d_gamma, d_beta },
                ) => vec![(gamma, d_gamma), (beta, d_beta)],
                (_, LayerGrads::None) => vec![],
                _ => {
                    return Err(Error::State(format!(
                        "gradient kind does not match layer {i}"
                    )))
                }
            };
            for (param, grad) in pairs {
                if param.shape != grad.shape {
                    return Err(Error::State(format!(
                        "gradient shape {:?} does not match parameter {:?} at layer {i}",
                        grad.shape, param.shape
                    )));
                }
                if !grad.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at layer {i}"
                    )));
                }
                for (p, g) in param.data.iter_mut().zip(&grad.data) {
                    *p -= lr * g;
                }
            }
        }
        Ok(())
    }

    /// Mutable view of every trainable parameter tensor.
    pub fn named_params_mut(&mut self) -> Vec<(usize, &'static str, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match &mut layer.params {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    out.push((i, "weight", weight));
                    out.push((i, "bias", bias));
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push((i, "gamma", gamma));
                    out.push((i, "beta", beta));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every trainable parameter tensor, with stable names for checkpoints.
    pub fn named_params(&self) -> Vec<(usize, &'static str, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.params {
                LayerParams::Dense { weight, bias } | LayerParams::Conv2d { weight, bias } => {
                    out.push((i, "weight", weight));
                    out.push((i, "bias", bias));
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push((i, "gamma", gamma));
                    out.push((i, "beta", beta));
                }
                LayerParams::None => {}
            }
        }
        out
    }
}

fn apply_clamps(out: &mut Tensor, layer: usize, plan: &InterventionPlan) -> Result<()> {
    let batch = out.batch();
    let per_example = out.row_len();
    for (unit, mode) in &plan.clamps {
        if unit.layer != layer {
            continue;
        }
        match out.shape.len() {
            2 => {
                let value = match mode {
                    ClampMode::Zero => 0.0,
                    ClampMode::Mean => plan.stats.as_ref().expect("validated").mean(*unit)?,
                };
                for b in 0..batch {
                    out.data[b * per_example + unit.unit] = value;
                }
            }
            4 => {
                let spatial = out.shape[2] * out.shape[3];
                match mode {
                    ClampMode::Zero => {
                        for b in 0..batch {
                            let start = b * per_example + unit.unit * spatial;
                            out.data[start..start + spatial].fill(0.0);
                        }
                    }
                    ClampMode::Mean => {
                        let stats = plan.stats.as_ref().expect("validated");
                        let layer_stats = stats.layer(layer)?;
                        let elem_means = layer_stats
                            .elem_means
                            .as_ref()
                            .and_then(|m| m.get(unit.unit))
                            .ok_or_else(|| {
                                Error::Plan(format!(
                                    "no per-element means for unit {unit:?}"
                                ))
                            })?;
                        for b in 0..batch {
                            let start = b * per_example + unit.unit * spatial;
                            out.data[start..start + spatial].copy_from_slice(elem_means);
                        }
                    }
                }
            }
            other => {
                return Err(Error::Plan(format!(
                    "cannot clamp rank-{other} activations"
                )))
            }
        }
    }
    Ok(())
}

/// Add `N(0, scale * var(unit))` to every element of every unit, one draw per
/// element, consuming each example's dedicated stream. Units with zero
/// variance receive exactly zero noise.
fn add_unit_noise(out: &mut Tensor, scale: f64, variances: &[f64], rngs: &mut [ChaCha8Rng]) {
    let per_example = out.row_len();
    let units = out.shape[1]; // dense width or conv channels
    let spatial = per_example / units;
    for (b, rng) in rngs.iter_mut().enumerate() {
        let row = &mut out.data[b * per_example..(b + 1) * per_example];
        for (u, &var) in variances.iter().enumerate().take(units) {
            let std = (scale * var).sqrt();
            for v in &mut row[u * spatial..(u + 1) * spatial] {
                let g: f64 = rng.sample(StandardNormal);
                *v += std * g;
            }
        }
    }
}
