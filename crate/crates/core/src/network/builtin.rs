use std::fmt;
use std::str::FromStr;

use super::{LayerKind, LayerSpec, NetworkDescription, Scenario};
use crate::error::{Error, Result};
use crate::layers::{convert_network, BatchNormMode};
use crate::scalar::Dtype;
use crate::tape::StoragePolicy;
use crate::tensor::Shape;

/// Homogeneous size-preserving layer used by the depth sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeLayer {
    Linear,
    Conv2d,
    ConvTranspose2d,
    BatchNorm2dTrain,
    BatchNorm2dEval,
}

impl ProbeLayer {
    pub const ALL: [ProbeLayer; 5] = [
        ProbeLayer::Linear,
        ProbeLayer::Conv2d,
        ProbeLayer::ConvTranspose2d,
        ProbeLayer::BatchNorm2dTrain,
        ProbeLayer::BatchNorm2dEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeLayer::Linear => "linear",
            ProbeLayer::Conv2d => "conv2d",
            ProbeLayer::ConvTranspose2d => "conv_transpose2d",
            ProbeLayer::BatchNorm2dTrain => "batchnorm2d-train",
            ProbeLayer::BatchNorm2dEval => "batchnorm2d-eval",
        }
    }

    /// Chain input: (4, 8, 32, 32) for 2-d layers and (4, 128, 64) for
    /// linear layers, both 131072 bytes in f32.
    pub fn input_dims(self) -> Vec<usize> {
        match self {
            ProbeLayer::Linear => vec![4, 128, 64],
            _ => vec![4, 8, 32, 32],
        }
    }

    pub fn layer(self) -> LayerKind {
        match self {
            ProbeLayer::Linear => LayerKind::Linear {
                in_features: 64,
                out_features: 64,
                bias: false,
            },
            ProbeLayer::Conv2d => LayerKind::Conv2d {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            ProbeLayer::ConvTranspose2d => LayerKind::ConvTranspose2d {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            ProbeLayer::BatchNorm2dTrain => LayerKind::BatchNorm2d {
                channels: 8,
                mode: BatchNormMode::Train,
                eps: 1e-5,
            },
            ProbeLayer::BatchNorm2dEval => LayerKind::BatchNorm2d {
                channels: 8,
                mode: BatchNormMode::Eval,
                eps: 1e-5,
            },
        }
    }
}

impl FromStr for ProbeLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let found = match norm.as_str() {
            "linear" => ProbeLayer::Linear,
            "conv2d" | "conv" => ProbeLayer::Conv2d,
            "conv-transpose2d" | "convtranspose2d" => ProbeLayer::ConvTranspose2d,
            "batchnorm2d-train" | "batchnorm2d" | "bn-train" => ProbeLayer::BatchNorm2dTrain,
            "batchnorm2d-eval" | "bn-eval" => ProbeLayer::BatchNorm2dEval,
            _ => return Err(Error::UnknownLayerKind(s.to_string())),
        };
        Ok(found)
    }
}

impl fmt::Display for ProbeLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named network presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinNet {
    /// Bias-free size-preserving 3×3 convolutions.
    DeepCnn {
        depth: usize,
        channels: usize,
        batch: usize,
        size: usize,
    },
    /// Stem, then bottleneck residual blocks (1×1, 3×3, 1×1 convolutions
    /// with batch norm and ReLU), then a 1×1 head. Blocks narrow `width`
    /// channels to `width / 4`.
    BottleneckChain {
        blocks: usize,
        width: usize,
        size: usize,
        bn_mode: BatchNormMode,
    },
    /// Linear layers with bias, each followed by ReLU.
    Mlp {
        depth: usize,
        width: usize,
        batch: usize,
    },
    /// Single-head self-attention block with feed-forward sublayer.
    AttentionBlock {
        embed_dim: usize,
        seq_len: usize,
        batch: usize,
        dropout: f64,
    },
    ProbeChain {
        layer: ProbeLayer,
        depth: usize,
    },
}

const BUILTIN_NAMES: [&str; 5] = ["deep-cnn", "bottleneck", "bottleneck-eval", "mlp", "attention"];

pub fn builtin_names() -> &'static [&'static str] {
    &BUILTIN_NAMES
}

impl BuiltinNet {
    /// Desk-scale preset by name; `depth` overrides the preset depth or
    /// block count where the architecture has one.
    pub fn from_name(name: &str, depth: Option<usize>) -> Result<Self> {
        let name = name.trim().to_ascii_lowercase();
        let net = match name.as_str() {
            "deep-cnn" | "deepcnn" => BuiltinNet::DeepCnn {
                depth: depth.unwrap_or(8),
                channels: 8,
                batch: 4,
                size: 32,
            },
            "bottleneck" | "bottleneck-chain" => BuiltinNet::BottleneckChain {
                blocks: depth.unwrap_or(3),
                width: 32,
                size: 16,
                bn_mode: BatchNormMode::Train,
            },
            "bottleneck-eval" => BuiltinNet::BottleneckChain {
                blocks: depth.unwrap_or(3),
                width: 32,
                size: 16,
                bn_mode: BatchNormMode::Eval,
            },
            "mlp" => BuiltinNet::Mlp {
                depth: depth.unwrap_or(4),
                width: 32,
                batch: 8,
            },
            "attention" | "attention-block" => BuiltinNet::AttentionBlock {
                embed_dim: 16,
                seq_len: 8,
                batch: 2,
                dropout: 0.1,
            },
            other => {
                if let Some(layer) = other.strip_prefix("probe-") {
                    BuiltinNet::ProbeChain {
                        layer: layer.parse()?,
                        depth: depth.unwrap_or(4),
                    }
                } else {
                    return Err(Error::UnknownNet(name));
                }
            }
        };
        if net.depth() == 0 {
            return Err(Error::InvalidConfig(format!("{name} needs a positive depth")));
        }
        Ok(net)
    }

    /// Preset shrunk for finite differencing.
    pub fn small(name: &str, depth: Option<usize>) -> Result<Self> {
        Ok(match Self::from_name(name, depth)? {
            BuiltinNet::DeepCnn { depth, .. } => BuiltinNet::DeepCnn {
                depth,
                channels: 2,
                batch: 2,
                size: 5,
            },
            BuiltinNet::Mlp { depth, .. } => BuiltinNet::Mlp {
                depth,
                width: 6,
                batch: 3,
            },
            BuiltinNet::BottleneckChain { blocks, bn_mode, .. } => BuiltinNet::BottleneckChain {
                blocks,
                width: 8,
                size: 6,
                bn_mode,
            },
            BuiltinNet::AttentionBlock { dropout, .. } => BuiltinNet::AttentionBlock {
                embed_dim: 4,
                seq_len: 3,
                batch: 2,
                dropout,
            },
            other => other,
        })
    }

    fn depth(&self) -> usize {
        match *self {
            BuiltinNet::DeepCnn { depth, .. }
            | BuiltinNet::Mlp { depth, .. }
            | BuiltinNet::ProbeChain { depth, .. } => depth,
            BuiltinNet::BottleneckChain { blocks, .. } => blocks,
            BuiltinNet::AttentionBlock { .. } => 1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            BuiltinNet::DeepCnn { .. } => "deep-cnn".into(),
            BuiltinNet::BottleneckChain {
                bn_mode: BatchNormMode::Train,
                ..
            } => "bottleneck".into(),
            BuiltinNet::BottleneckChain {
                bn_mode: BatchNormMode::Eval,
                ..
            } => "bottleneck-eval".into(),
            BuiltinNet::Mlp { .. } => "mlp".into(),
            BuiltinNet::AttentionBlock { .. } => "attention".into(),
            BuiltinNet::ProbeChain { layer, .. } => format!("probe-{layer}"),
        }
    }

    pub fn build(&self) -> NetworkDescription {
        let (input, layers) = match *self {
            BuiltinNet::DeepCnn {
                depth,
                channels,
                batch,
                size,
            } => (
                vec![batch, channels, size, size],
                (0..depth)
                    .map(|_| LayerSpec::new(conv(channels, channels, 3, 1)))
                    .collect(),
            ),
            BuiltinNet::BottleneckChain {
                blocks,
                width,
                size,
                bn_mode,
            } => (vec![2, 1, size, size], bottleneck(blocks, width, bn_mode)),
            BuiltinNet::Mlp { depth, width, batch } => (
                vec![batch, width],
                (0..depth)
                    .flat_map(|_| {
                        [
                            LayerSpec::new(LayerKind::Linear {
                                in_features: width,
                                out_features: width,
                                bias: true,
                            }),
                            LayerSpec::new(LayerKind::Relu),
                        ]
                    })
                    .collect(),
            ),
            BuiltinNet::AttentionBlock {
                embed_dim,
                seq_len,
                batch,
                dropout,
            } => (vec![batch, seq_len, embed_dim], attention(embed_dim, dropout)),
            BuiltinNet::ProbeChain { layer, depth } => (
                layer.input_dims(),
                (0..depth).map(|_| LayerSpec::new(layer.layer())).collect(),
            ),
        };
        NetworkDescription {
            name: self.name(),
            dtype: Dtype::F32,
            input_shape: Shape::new(input).expect("builtin shapes are positive"),
            seed: 0,
            layers,
        }
    }
}

fn conv(cin: usize, cout: usize, kernel: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride: 1,
        padding,
        bias: false,
    }
}

fn bn(channels: usize, mode: BatchNormMode) -> LayerKind {
    LayerKind::BatchNorm2d {
        channels,
        mode,
        eps: 1e-5,
    }
}

fn bottleneck(blocks: usize, wide: usize, mode: BatchNormMode) -> Vec<LayerSpec> {
    let narrow = (wide / 4).max(1);
    let mut layers = vec![
        LayerSpec::new(conv(1, wide, 3, 1)),
        LayerSpec::new(bn(wide, mode)),
        LayerSpec::new(LayerKind::MaxPool2d {
            window: 2,
            stride: None,
        }),
        LayerSpec::new(LayerKind::Relu),
    ];
    for _ in 0..blocks {
        let skip = layers.len();
        layers.extend([
            LayerSpec::new(conv(wide, narrow, 1, 0)),
            LayerSpec::new(bn(narrow, mode)),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(conv(narrow, narrow, 3, 1)),
            LayerSpec::new(bn(narrow, mode)),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(conv(narrow, wide, 1, 0)),
            LayerSpec::new(bn(wide, mode)),
        ]);
        let last = layers.len();
        layers.push(LayerSpec::new(LayerKind::Add).with_inputs(&[last, skip]));
        layers.push(LayerSpec::new(LayerKind::Relu));
    }
    layers.push(LayerSpec::new(conv(wide, narrow, 1, 0)));
    layers
}

fn attention(e: usize, p: f64) -> Vec<LayerSpec> {
    let linear = |i, o| LayerKind::Linear {
        in_features: i,
        out_features: o,
        bias: true,
    };
    let ln = || LayerKind::LayerNorm { features: e, eps: 1e-5 };
    // Value indices: 0 is x, layer i produces i + 1.
    vec![
        LayerSpec::new(linear(e, e)).with_inputs(&[0]), // 1 q
        LayerSpec::new(linear(e, e)).with_inputs(&[0]), // 2 k
        LayerSpec::new(linear(e, e)).with_inputs(&[0]), // 3 v
        LayerSpec::new(LayerKind::Matmul {
            transpose_rhs: true,
            scale: 1.0 / (e as f64).sqrt(),
        })
        .with_inputs(&[1, 2]), // 4 scores
        LayerSpec::new(LayerKind::Softmax),             // 5
        LayerSpec::new(LayerKind::Dropout { p }),       // 6
        LayerSpec::new(LayerKind::Matmul {
            transpose_rhs: false,
            scale: 1.0,
        })
        .with_inputs(&[6, 3]), // 7 context
        LayerSpec::new(linear(e, e)),                   // 8 out projection
        LayerSpec::new(LayerKind::Dropout { p }),       // 9
        LayerSpec::new(LayerKind::Add).with_inputs(&[9, 0]), // 10
        LayerSpec::new(ln()),                           // 11
        LayerSpec::new(linear(e, 2 * e)),               // 12
        LayerSpec::new(LayerKind::Relu),                // 13
        LayerSpec::new(LayerKind::Dropout { p }),       // 14
        LayerSpec::new(linear(2 * e, e)),               // 15
        LayerSpec::new(LayerKind::Dropout { p }),       // 16
        LayerSpec::new(LayerKind::Add).with_inputs(&[16, 11]), // 17
        LayerSpec::new(ln()),                           // 18
    ]
}

/// One (network, scenario) pair of the verification corpus. The network
/// already carries its per-layer policies.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub net: NetworkDescription,
    pub scenario: Scenario,
}

impl CorpusEntry {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.net.name,
            self.scenario,
            crate::memwatch::policy_label(&self.net)
        )
    }
}

/// Every builtin under every scenario and both policies, the convolution-only
/// ablation of the bottleneck chain, and short probe chains under the sweep
/// scenarios.
pub fn corpus() -> Vec<CorpusEntry> {
    let mut out = Vec::new();
    let mut push_both = |net: &NetworkDescription, scenario: Scenario| {
        for policy in [StoragePolicy::Naive, StoragePolicy::MemSave] {
            out.push(CorpusEntry {
                net: convert_network(net, policy, None),
                scenario,
            });
        }
    };
    for name in BUILTIN_NAMES {
        let net = BuiltinNet::from_name(name, None).expect("builtin").build();
        for s in Scenario::PAPER_SET {
            push_both(&net, s);
        }
    }
    for layer in ProbeLayer::ALL {
        for depth in [1, 2, 5] {
            let net = BuiltinNet::ProbeChain { layer, depth }.build();
            for s in Scenario::sweep_set(4).into_iter().chain([Scenario::Input]) {
                push_both(&net, s);
            }
        }
    }
    let bottleneck = BuiltinNet::from_name("bottleneck", None).expect("builtin").build();
    let conv_only = [super::LayerTag::Conv2d].into_iter().collect();
    for s in Scenario::PAPER_SET {
        out.push(CorpusEntry {
            net: convert_network(&bottleneck, StoragePolicy::MemSave, Some(&conv_only)),
            scenario: s,
        });
    }
    out
}
