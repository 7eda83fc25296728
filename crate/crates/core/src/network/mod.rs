//! Network descriptions: an input shape plus an ordered list of layers.
//!
//! Values are numbered `0` for the network input and `i + 1` for the output
//! of layer `i`. Each layer names its input values explicitly through
//! `inputs`; when omitted it consumes the previous value. Residual
//! connections are `add` layers with two inputs.
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "dtype": "f32",
//!   "input_shape": [2, 4, 8, 8],
//!   "seed": 0,
//!   "layers": [
//!     {"kind": "conv2d", "in_channels": 4, "out_channels": 4, "kernel": 3, "padding": 1},
//!     {"kind": "relu", "policy": "memsave"},
//!     {"kind": "add", "inputs": [0, 2]}
//!   ]
//! }
//! ```

mod builtin;
mod scenario;

pub use builtin::{builtin_names, corpus, BuiltinNet, CorpusEntry, ProbeLayer};
pub use scenario::{Differentiability, Scenario};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv2d_output_hw, conv_transpose2d_output_hw, maxpool2d_output_hw, BatchNormMode};
use crate::scalar::Dtype;
use crate::tape::StoragePolicy;
use crate::tensor::Shape;

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d {
        channels: usize,
        #[serde(default)]
        mode: BatchNormMode,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    #[serde(rename = "layernorm")]
    LayerNorm {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    Dropout {
        p: f64,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Softmax,
    Add,
    Matmul {
        #[serde(default)]
        transpose_rhs: bool,
        #[serde(default = "unit")]
        scale: f64,
    },
}

fn unit() -> f64 {
    1.0
}

/// Layer kinds without their configuration, used for filters and labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerTag {
    Linear,
    Conv2d,
    ConvTranspose2d,
    BatchNorm2d,
    LayerNorm,
    Relu,
    Dropout,
    MaxPool2d,
    Softmax,
    Add,
    Matmul,
}

impl LayerTag {
    pub const ALL: [LayerTag; 11] = [
        LayerTag::Linear,
        LayerTag::Conv2d,
        LayerTag::ConvTranspose2d,
        LayerTag::BatchNorm2d,
        LayerTag::LayerNorm,
        LayerTag::Relu,
        LayerTag::Dropout,
        LayerTag::MaxPool2d,
        LayerTag::Softmax,
        LayerTag::Add,
        LayerTag::Matmul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerTag::Linear => "linear",
            LayerTag::Conv2d => "conv2d",
            LayerTag::ConvTranspose2d => "conv_transpose2d",
            LayerTag::BatchNorm2d => "batchnorm2d",
            LayerTag::LayerNorm => "layernorm",
            LayerTag::Relu => "relu",
            LayerTag::Dropout => "dropout",
            LayerTag::MaxPool2d => "maxpool2d",
            LayerTag::Softmax => "softmax",
            LayerTag::Add => "add",
            LayerTag::Matmul => "matmul",
        }
    }
}

impl FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "conv" => "conv2d",
            "convtranspose2d" | "conv_transpose" => "conv_transpose2d",
            "batchnorm" | "bn" | "batch_norm2d" => "batchnorm2d",
            "layer_norm" | "ln" => "layernorm",
            "maxpool" | "max_pool2d" => "maxpool2d",
            other => other,
        };
        LayerTag::ALL
            .into_iter()
            .find(|t| t.name() == alias)
            .ok_or_else(|| Error::UnknownLayerKind(s.to_string()))
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl LayerKind {
    pub fn tag(&self) -> LayerTag {
        match self {
            LayerKind::Linear { .. } => LayerTag::Linear,
            LayerKind::Conv2d { .. } => LayerTag::Conv2d,
            LayerKind::ConvTranspose2d { .. } => LayerTag::ConvTranspose2d,
            LayerKind::BatchNorm2d { .. } => LayerTag::BatchNorm2d,
            LayerKind::LayerNorm { .. } => LayerTag::LayerNorm,
            LayerKind::Relu => LayerTag::Relu,
            LayerKind::Dropout { .. } => LayerTag::Dropout,
            LayerKind::MaxPool2d { .. } => LayerTag::MaxPool2d,
            LayerKind::Softmax => LayerTag::Softmax,
            LayerKind::Add => LayerTag::Add,
            LayerKind::Matmul { .. } => LayerTag::Matmul,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add | LayerKind::Matmul { .. } => 2,
            _ => 1,
        }
    }

    pub fn is_normalization(&self) -> bool {
        matches!(self, LayerKind::BatchNorm2d { .. } | LayerKind::LayerNorm { .. })
    }

    /// Weight shape and optional bias shape, for layers that own parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        let with_bias = |b: bool, n: usize| b.then(|| vec![n]);
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => Some((vec![out_features, in_features], with_bias(bias, out_features))),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                with_bias(bias, out_channels),
            )),
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel, kernel],
                with_bias(bias, out_channels),
            )),
            LayerKind::BatchNorm2d { channels, .. } => Some((vec![channels], Some(vec![channels]))),
            LayerKind::LayerNorm { features, .. } => Some((vec![features], Some(vec![features]))),
            _ => None,
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_shapes().is_some()
    }

    /// Output shape for the given input shapes.
    pub fn output_shape(&self, inputs: &[&Shape]) -> std::result::Result<Shape, String> {
        let x = inputs[0];
        let d = x.dims();
        let rank4 = |what: &str| -> std::result::Result<[usize; 4], String> {
            d.try_into()
                .map_err(|_| format!("{what} expects rank 4 input, got {x}"))
        };
        let dims: Vec<usize> = match *self {
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                if d.len() < 2 || d[d.len() - 1] != in_features {
                    return Err(format!("linear expects (..., {in_features}), got {x}"));
                }
                let mut o = d.to_vec();
                *o.last_mut().unwrap() = out_features;
                o
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [n, c, h, w] = rank4("conv2d")?;
                if c != in_channels {
                    return Err(format!("conv2d expects {in_channels} channels, got {x}"));
                }
                let (ho, wo) = conv2d_output_hw(h, w, (kernel, kernel), stride, padding)
                    .ok_or_else(|| format!("conv2d geometry does not fit {x}"))?;
                vec![n, out_channels, ho, wo]
            }
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [n, c, h, w] = rank4("conv_transpose2d")?;
                if c != in_channels {
                    return Err(format!("conv_transpose2d expects {in_channels} channels, got {x}"));
                }
                let (ho, wo) = conv_transpose2d_output_hw(h, w, (kernel, kernel), stride, padding)
                    .ok_or_else(|| format!("conv_transpose2d geometry does not fit {x}"))?;
                vec![n, out_channels, ho, wo]
            }
            LayerKind::BatchNorm2d { channels, .. } => {
                let [_, c, _, _] = rank4("batchnorm2d")?;
                if c != channels {
                    return Err(format!("batchnorm2d expects {channels} channels, got {x}"));
                }
                d.to_vec()
            }
            LayerKind::LayerNorm { features, .. } => {
                if x.last() != Some(features) {
                    return Err(format!("layernorm expects last dim {features}, got {x}"));
                }
                d.to_vec()
            }
            LayerKind::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("dropout probability {p} outside [0, 1)"));
                }
                d.to_vec()
            }
            LayerKind::Relu | LayerKind::Softmax => d.to_vec(),
            LayerKind::MaxPool2d { window, stride } => {
                let [n, c, h, w] = rank4("maxpool2d")?;
                let (ho, wo) = maxpool2d_output_hw(h, w, window, stride.unwrap_or(window))
                    .ok_or_else(|| format!("maxpool2d window {window} does not fit {x}"))?;
                vec![n, c, ho, wo]
            }
            LayerKind::Add => {
                if inputs[0] != inputs[1] {
                    return Err(format!("add operands differ: {} vs {}", inputs[0], inputs[1]));
                }
                d.to_vec()
            }
            LayerKind::Matmul { transpose_rhs, .. } => {
                let b = inputs[1].dims();
                if d.len() != 3 || b.len() != 3 || d[0] != b[0] {
                    return Err(format!(
                        "matmul expects two rank-3 operands, got {} and {}",
                        x, inputs[1]
                    ));
                }
                let (k, n) = if transpose_rhs { (b[2], b[1]) } else { (b[1], b[2]) };
                if d[2] != k {
                    return Err(format!("matmul inner dims differ: {} and {}", x, inputs[1]));
                }
                vec![d[0], d[1], n]
            }
        };
        Shape::new(dims).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub policy: StoragePolicy,
    /// Value indices consumed by this layer; defaults to the previous value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<usize>>,
    /// Overrides the scenario's choice for this layer's parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires_grad: Option<bool>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            policy: StoragePolicy::Naive,
            inputs: None,
            requires_grad: None,
        }
    }

    pub fn with_inputs(mut self, inputs: &[usize]) -> Self {
        self.inputs = Some(inputs.to_vec());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub name: String,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    pub input_shape: Shape,
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

impl NetworkDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.value_shapes()?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Value indices consumed by layer `i`.
    pub fn layer_inputs(&self, i: usize) -> Result<Vec<usize>> {
        let spec = &self.layers[i];
        let ins = match &spec.inputs {
            Some(v) => v.clone(),
            None if spec.kind.arity() == 1 => vec![i],
            None => {
                return Err(Error::ShapePropagation {
                    layer: i,
                    detail: format!("{} needs explicit inputs", spec.kind.tag()),
                })
            }
        };
        if ins.len() != spec.kind.arity() {
            return Err(Error::ShapePropagation {
                layer: i,
                detail: format!(
                    "{} takes {} inputs, got {}",
                    spec.kind.tag(),
                    spec.kind.arity(),
                    ins.len()
                ),
            });
        }
        if let Some(&bad) = ins.iter().find(|&&v| v > i) {
            return Err(Error::ShapePropagation {
                layer: i,
                detail: format!("input value {bad} is not produced by an earlier layer"),
            });
        }
        Ok(ins)
    }

    /// Shapes of all values, network input first.
    pub fn value_shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig(format!("network `{}` has no layers", self.name)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, spec) in self.layers.iter().enumerate() {
            let ins = self.layer_inputs(i)?;
            let refs: Vec<&Shape> = ins.iter().map(|&v| &shapes[v]).collect();
            let out = spec
                .kind
                .output_shape(&refs)
                .map_err(|detail| Error::ShapePropagation { layer: i, detail })?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// For every value, the last layer that reads it, if any.
    pub fn last_uses(&self) -> Result<Vec<Option<usize>>> {
        let mut last = vec![None; self.layers.len() + 1];
        for i in 0..self.layers.len() {
            for v in self.layer_inputs(i)? {
                last[v] = Some(i);
            }
        }
        Ok(last)
    }

    /// Indices of layers that own parameters, in order.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_params())
            .collect()
    }

    pub fn parameter_bytes(&self) -> usize {
        let numel = |d: &Vec<usize>| d.iter().product::<usize>();
        self.layers
            .iter()
            .filter_map(|l| l.kind.param_shapes())
            .map(|(w, b)| numel(&w) + b.as_ref().map_or(0, numel))
            .sum::<usize>()
            * self.dtype.width()
    }

    pub fn uniform_policy(&self) -> Option<StoragePolicy> {
        let first = self.layers.first()?.policy;
        self.layers.iter().all(|l| l.policy == first).then_some(first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let text = r#"{
            "name": "tiny",
            "input_shape": [2, 4, 8, 8],
            "layers": [
                {"kind": "conv2d", "in_channels": 4, "out_channels": 4, "kernel": 3, "padding": 1},
                {"kind": "relu", "policy": "memsave"},
                {"kind": "add", "inputs": [0, 2]},
                {"kind": "maxpool2d", "window": 2}
            ]
        }"#;
        let net = NetworkDescription::from_json(text).unwrap();
        assert_eq!(net.dtype, Dtype::F32);
        assert_eq!(net.layers[1].policy, StoragePolicy::MemSave);
        let shapes = net.value_shapes().unwrap();
        assert_eq!(shapes[4].dims(), [2, 4, 4, 4]);
        let again = NetworkDescription::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(again, net);
        assert_eq!(net.last_uses().unwrap(), [Some(2), Some(1), Some(2), Some(3), None]);
    }

    #[test]
    fn rejects_forward_references_and_bad_shapes() {
        let mut net = BuiltinNet::DeepCnn {
            depth: 2,
            channels: 2,
            batch: 1,
            size: 4,
        }
        .build();
        net.layers[0].inputs = Some(vec![1]);
        assert!(matches!(
            net.value_shapes(),
            Err(Error::ShapePropagation { layer: 0, .. })
        ));

        let mut net = BuiltinNet::DeepCnn {
            depth: 2,
            channels: 2,
            batch: 1,
            size: 4,
        }
        .build();
        net.input_shape = Shape::new(vec![1, 3, 4, 4]).unwrap();
        assert!(matches!(
            net.value_shapes(),
            Err(Error::ShapePropagation { layer: 0, .. })
        ));

        let add = LayerSpec::new(LayerKind::Add);
        let net = NetworkDescription {
            name: "x".into(),
            dtype: Dtype::F32,
            input_shape: Shape::new(vec![2, 2]).unwrap(),
            seed: 0,
            layers: vec![add],
        };
        assert!(net.value_shapes().is_err());
    }

    #[test]
    fn tags_parse_with_aliases() {
        for t in LayerTag::ALL {
            assert_eq!(t.name().parse::<LayerTag>().unwrap(), t);
        }
        assert_eq!(
            "ConvTranspose2d".parse::<LayerTag>().unwrap(),
            LayerTag::ConvTranspose2d
        );
        assert_eq!("bn".parse::<LayerTag>().unwrap(), LayerTag::BatchNorm2d);
        assert!(matches!("gelu".parse::<LayerTag>(), Err(Error::UnknownLayerKind(_))));
    }
}
