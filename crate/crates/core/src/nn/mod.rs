//! Self-contained differentiable network core.
//!
//! Layers are described by [`LayerSpec`] values; all trainable parameters and
//! BatchNorm running statistics live in name-keyed maps on [`ModelState`], so
//! the whole parameter vector can be flattened, perturbed, and restored
//! exactly. Forward/backward passes live in [`forward`], the optimizer in
//! [`optim`], serialization in [`checkpoint`].

mod checkpoint;
mod forward;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, SIDECAR_SUFFIX};
pub use forward::{
    batch_loss, bn_reestimate, collect_bn_stats, forward, forward_eval, forward_features,
    loss_and_grad, weighted_loss_and_grad, BatchGrad, BatchStatsSummary, BnMode, ChannelStats,
    ForwardCache,
};
pub(crate) use forward::{frozen_batch_loss_and_grad, weighted_loss_grad_collecting};
pub use optim::{sgd_step, LrSchedule};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;

/// One layer of the network. Convolutions use stride 1 and zero padding
/// `kernel / 2`; max pooling is fixed 2x2 with stride 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    MaxPool2,
    BatchNorm { channels: usize },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::BatchNorm { .. }
        )
    }
}

/// Running statistics owned by one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnStats {
    pub fn fresh(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

/// BatchNorm defaults; the update rule is
/// `running = (1 - momentum) * running + momentum * batch`.
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named gradients, one tensor per entry of `ModelState::params` with
/// identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelState) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        GradientSet { tensors }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// `self += s * other`. Key sets and shapes must match.
    pub fn add_scaled_in_place(&mut self, other: &GradientSet, s: f64) {
        assert_eq!(self.tensors.len(), other.tensors.len(), "gradient key sets differ");
        for (k, t) in self.tensors.iter_mut() {
            let o = other.tensors.get(k).expect("gradient key sets differ");
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += s * b;
            }
        }
    }
}

/// Ordered layer descriptions plus all trainable parameters and BatchNorm
/// running statistics.
///
/// Parameter names are `l{index:02}.{weight|bias|gamma|beta}`; the
/// zero-padded index keeps map order equal to layer order, which fixes the
/// flattened parameter vector layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch_id: String,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
    pub bn_stats: BTreeMap<String, BnStats>,
    /// Expected (C, H, W) of a single input sample.
    pub input_shape: (usize, usize, usize),
}

pub fn param_name(layer_index: usize, role: &str) -> String {
    assert!(layer_index < 100, "layer index exceeds naming scheme");
    format!("l{layer_index:02}.{role}")
}

pub fn bn_key(layer_index: usize) -> String {
    assert!(layer_index < 100, "layer index exceeds naming scheme");
    format!("l{layer_index:02}")
}

impl ModelState {
    /// Initialize parameters for a layer list: He-normal weights, zero
    /// biases, unit gamma, zero beta, fresh running statistics.
    pub fn init(
        arch_id: &str,
        layers: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let mut params = BTreeMap::new();
        let mut bn_stats = BTreeMap::new();
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let std = (2.0 / inputs as f64).sqrt();
                    let w: Vec<f64> = (0..inputs * outputs).map(|_| rng.normal() * std).collect();
                    params.insert(param_name(i, "weight"), Tensor::new(vec![inputs, outputs], w));
                    params.insert(param_name(i, "bias"), Tensor::zeros(vec![outputs]));
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    let fan_in = in_channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let w: Vec<f64> = (0..out_channels * fan_in).map(|_| rng.normal() * std).collect();
                    params.insert(
                        param_name(i, "weight"),
                        Tensor::new(vec![out_channels, in_channels, kernel, kernel], w),
                    );
                    params.insert(param_name(i, "bias"), Tensor::zeros(vec![out_channels]));
                }
                LayerSpec::BatchNorm { channels } => {
                    params.insert(param_name(i, "gamma"), Tensor::filled(vec![channels], 1.0));
                    params.insert(param_name(i, "beta"), Tensor::zeros(vec![channels]));
                    bn_stats.insert(bn_key(i), BnStats::fresh(channels));
                }
                LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::Flatten => {}
            }
        }
        ModelState {
            arch_id: arch_id.to_string(),
            layers,
            params,
            bn_stats,
            input_shape,
        }
    }

    /// Number of output classes, read from the final dense layer.
    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { outputs, .. } => Some(*outputs),
                _ => None,
            })
            .expect("model has no dense layer")
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Flatten all trainable parameters into one vector, in map order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.params.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten_params`]: write a flat vector back into the
    /// named tensors. Length must match exactly.
    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Argument(format!(
                "flat parameter vector has length {}, model expects {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Euclidean norm of the flattened trainable-parameter vector (weights,
    /// biases, BN gamma/beta; running statistics excluded).
    pub fn param_l2_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Model with parameters `theta + scale * direction`; running statistics
    /// copied unchanged.
    pub fn add_scaled(&self, direction: &GradientSet, scale: f64) -> Result<ModelState> {
        let mut out = self.clone();
        for (k, t) in out.params.iter_mut() {
            let d = direction.tensors.get(k).ok_or_else(|| {
                Error::Config(format!("direction is missing parameter tensor {k}"))
            })?;
            if d.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "direction tensor {k} has shape {:?}, parameter has {:?}",
                    d.shape(),
                    t.shape()
                )));
            }
            for (a, b) in t.data_mut().iter_mut().zip(d.data()) {
                *a += scale * b;
            }
        }
        Ok(out)
    }

    /// FNV checksum of the exact parameter bytes. Used for restoration and
    /// scan-purity assertions.
    pub fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        for t in self.params.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Index of the last convolutional layer (the "last feature layer" that
    /// fine-pruning targets), along with its BatchNorm companion if the next
    /// layer is one.
    pub fn feature_conv(&self) -> Option<(usize, Option<usize>)> {
        let conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv2d { .. }))?;
        let bn = match self.layers.get(conv + 1) {
            Some(LayerSpec::BatchNorm { .. }) => Some(conv + 1),
            _ => None,
        };
        Some((conv, bn))
    }
}

/// Architecture registry. `tinycnn` and `minicnn` stand in for the paper's
/// full-scale networks at desk scale; new ids can be added here.
pub fn build_model(
    arch: &str,
    input_shape: (usize, usize, usize),
    classes: usize,
    rng: &mut Rng,
) -> Result<ModelState> {
    let (c, h, w) = input_shape;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "architectures pool twice; image extent {h}x{w} must be divisible by 4"
        )));
    }
    let layers = match arch {
        "tinycnn" => vec![
            LayerSpec::Conv2d { in_channels: c, out_channels: 8, kernel: 3 },
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3 },
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 16 * (h / 4) * (w / 4), outputs: classes },
        ],
        "minicnn" => vec![
            LayerSpec::Conv2d { in_channels: c, out_channels: 8, kernel: 3 },
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 8, out_channels: 8, kernel: 3 },
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3 },
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 16, out_channels: 16, kernel: 3 },
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 16 * (h / 4) * (w / 4), outputs: classes },
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown architecture id '{other}' (known: tinycnn, minicnn)"
            )))
        }
    };
    Ok(ModelState::init(arch, layers, input_shape, rng))
}
