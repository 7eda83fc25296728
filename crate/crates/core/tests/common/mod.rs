#![allow(dead_code)]

use leantape::layers::BatchNormMode;
use leantape::network::{Differentiability, LayerKind, LayerSpec, NetworkDescription};
use leantape::{Dtype, Shape};

pub fn net(name: &str, input: &[usize], layers: Vec<LayerSpec>) -> NetworkDescription {
    NetworkDescription {
        name: name.to_string(),
        dtype: Dtype::F64,
        input_shape: Shape::new(input.to_vec()).unwrap(),
        seed: 0,
        layers,
    }
}

fn linear(i: usize, o: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::Linear {
        in_features: i,
        out_features: o,
        bias: true,
    })
}

/// Input and every parameter differentiable.
pub fn everything(net: &NetworkDescription) -> Differentiability {
    Differentiability {
        input: true,
        params: net.layers.iter().map(|l| l.kind.has_params()).collect(),
    }
}

/// One small network per layer kind, sized for finite differences.
pub fn layer_cases() -> Vec<NetworkDescription> {
    let bn = |mode| {
        LayerSpec::new(LayerKind::BatchNorm2d {
            channels: 2,
            mode,
            eps: 1e-5,
        })
    };
    vec![
        net("linear", &[2, 3, 4], vec![linear(4, 5)]),
        net(
            "conv2d",
            &[2, 2, 5, 5],
            vec![LayerSpec::new(LayerKind::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            })],
        ),
        net(
            "conv_transpose2d",
            &[2, 2, 3, 3],
            vec![LayerSpec::new(LayerKind::ConvTranspose2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            })],
        ),
        net("batchnorm2d-train", &[3, 2, 3, 3], vec![bn(BatchNormMode::Train)]),
        net("batchnorm2d-eval", &[3, 2, 3, 3], vec![bn(BatchNormMode::Eval)]),
        net(
            "layernorm",
            &[2, 3, 5],
            vec![LayerSpec::new(LayerKind::LayerNorm { features: 5, eps: 1e-5 })],
        ),
        net("relu", &[2, 3, 4], vec![linear(4, 4), LayerSpec::new(LayerKind::Relu)]),
        net(
            "dropout",
            &[2, 3, 4],
            vec![linear(4, 4), LayerSpec::new(LayerKind::Dropout { p: 0.3 })],
        ),
        net(
            "maxpool2d",
            &[2, 2, 4, 5],
            vec![LayerSpec::new(LayerKind::MaxPool2d {
                window: 2,
                stride: None,
            })],
        ),
        net(
            "softmax",
            &[2, 3, 4],
            vec![linear(4, 4), LayerSpec::new(LayerKind::Softmax)],
        ),
        net(
            "add",
            &[2, 3, 4],
            vec![linear(4, 4), LayerSpec::new(LayerKind::Add).with_inputs(&[0, 1])],
        ),
        net(
            "matmul",
            &[2, 3, 4],
            vec![
                linear(4, 4),
                LayerSpec::new(LayerKind::Matmul {
                    transpose_rhs: true,
                    scale: 0.5,
                })
                .with_inputs(&[0, 1]),
            ],
        ),
    ]
}
