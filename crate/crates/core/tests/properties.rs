use proptest::prelude::*;

use leantape::exec::{Model, RunOptions};
use leantape::layers::{self, convert_network, BatchNormMode, LayerParams};
use leantape::network::{Differentiability, LayerKind, LayerSpec, NetworkDescription};
use leantape::planner::plan;
use leantape::rng::Rng;
use leantape::tape::LeafKind;
use leantape::{Dtype, Shape, StoragePolicy, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
enum Block {
    Conv,
    BatchNorm(bool),
    Relu,
    Pool,
    Dropout,
    Skip,
}

fn block() -> impl Strategy<Value = Block> {
    prop_oneof![
        3 => Just(Block::Conv),
        1 => any::<bool>().prop_map(Block::BatchNorm),
        2 => Just(Block::Relu),
        1 => Just(Block::Pool),
        1 => Just(Block::Dropout),
        1 => Just(Block::Skip),
    ]
}

/// A chain over (2, c, 6, 6) inputs built from `blocks`, with one random
/// policy per layer.
fn build(blocks: &[Block], policies: &[bool], c: usize) -> NetworkDescription {
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut size = 6;
    for b in blocks {
        let kind = match *b {
            Block::Conv => LayerKind::Conv2d {
                in_channels: c,
                out_channels: c,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: layers.len().is_multiple_of(2),
            },
            Block::BatchNorm(train) => LayerKind::BatchNorm2d {
                channels: c,
                mode: if train {
                    BatchNormMode::Train
                } else {
                    BatchNormMode::Eval
                },
                eps: 1e-5,
            },
            Block::Relu => LayerKind::Relu,
            Block::Pool if size >= 2 => {
                size /= 2;
                LayerKind::MaxPool2d {
                    window: 2,
                    stride: None,
                }
            }
            Block::Pool => LayerKind::Relu,
            Block::Dropout => LayerKind::Dropout { p: 0.25 },
            Block::Skip => LayerKind::Add,
        };
        let mut spec = LayerSpec::new(kind);
        if matches!(spec.kind, LayerKind::Add) {
            let n = layers.len();
            spec = spec.with_inputs(&[n, n.saturating_sub(1)]);
            if n == 0 {
                spec = spec.with_inputs(&[0, 0]);
            }
        }
        spec.policy = if policies[layers.len() % policies.len()] {
            StoragePolicy::MemSave
        } else {
            StoragePolicy::Naive
        };
        layers.push(spec);
    }
    NetworkDescription {
        name: "random".into(),
        dtype: Dtype::F64,
        input_shape: Shape::new(vec![2, c, 6, 6]).unwrap(),
        seed: 0,
        layers,
    }
}

fn chain() -> impl Strategy<Value = (NetworkDescription, Differentiability)> {
    (
        prop::collection::vec(block(), 1..8),
        prop::collection::vec(any::<bool>(), 1..8),
        1usize..4,
        any::<bool>(),
        prop::collection::vec(any::<bool>(), 8),
        any::<u64>(),
    )
        .prop_filter_map(
            "skip shapes must agree",
            |(blocks, policies, c, input, params, seed)| {
                let net = build(&blocks, &policies, c).with_seed(seed);
                net.value_shapes().ok()?;
                let params = net
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| l.kind.has_params() && params[i])
                    .collect();
                Some((net, Differentiability { input, params }))
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 96,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn dominant_inheritance((net, diff) in chain()) {
        let p = plan(&net, &diff).unwrap();
        for node in &p.nodes {
            prop_assert_eq!(node.output_requires_grad, node.input_requires_grad.iter().any(|&f| f));
            prop_assert_eq!(p.value_requires_grad[node.layer + 1], node.output_requires_grad);
        }
    }

    #[test]
    fn execution_matches_plan_and_memsave_reads_all((net, diff) in chain()) {
        for policy in [None, Some(StoragePolicy::MemSave)] {
            let net = match policy {
                Some(p) => convert_network(&net, p, None),
                None => net.clone(),
            };
            let run = Model::<f64>::new(&net).unwrap().run(&diff, &RunOptions::default()).unwrap();
            if policy.is_some() {
                prop_assert!(run.summary.unread.is_empty(), "{:?}", run.summary.unread);
            }
        }
    }

    #[test]
    fn policies_give_identical_gradients((net, diff) in chain()) {
        let grads: Vec<_> = [StoragePolicy::Naive, StoragePolicy::MemSave]
            .iter()
            .map(|&p| Model::<f64>::new(&convert_network(&net, p, None)).unwrap().run(&diff, &RunOptions::default()).unwrap().grads)
            .collect();
        prop_assert_eq!(&grads[0], &grads[1]);
    }

    #[test]
    fn memsave_never_keeps_more_activations((net, diff) in chain()) {
        let naive = plan(&convert_network(&net, StoragePolicy::Naive, None), &diff).unwrap();
        let memsave = plan(&convert_network(&net, StoragePolicy::MemSave, None), &diff).unwrap();
        prop_assert!(memsave.tape_activation_bytes <= naive.tape_activation_bytes);
        if !net.layers.iter().any(|l| matches!(l.kind, LayerKind::Relu)) {
            prop_assert!(memsave.tape_bytes <= naive.tape_bytes);
        }
    }

    #[test]
    fn transpose_conv_is_conv_input_vjp(
        c_in in 1usize..4,
        c_out in 1usize..4,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
        out_hw in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(pad < k);
        let h = (out_hw - 1) * stride + k;
        prop_assume!(h > 2 * pad);
        let h = h - 2 * pad;
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(Shape::new(vec![2, c_in, h, h]).unwrap(), &mut rng).requires_grad(true);
        let w = Tensor::<f64>::randn(Shape::new(vec![c_out, c_in, k, k]).unwrap(), &mut rng);
        let mut tape = Tape::new();
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&w, LeafKind::Parameter).unwrap();
        let params = LayerParams::new(w.clone(), None);
        let z = layers::conv2d(&x, &params, stride, pad, StoragePolicy::MemSave, &mut tape).unwrap();
        let g = Tensor::<f64>::randn(z.shape().clone(), &mut rng);
        tape.register_leaf(&g, LeafKind::Constant).unwrap();
        let prod = layers::mul(&z, &g, &mut tape).unwrap();
        let loss = layers::sum(&prod, &mut tape).unwrap();
        let vjp = tape.backward(&loss).unwrap().grads.get(x.id()).unwrap().to_vec();

        let mut t2 = Tape::new();
        let g2 = Tensor::from_vec(g.shape().clone(), g.to_vec()).unwrap();
        t2.register_leaf(&g2, LeafKind::Input).unwrap();
        t2.register_leaf(&w, LeafKind::Parameter).unwrap();
        let y = layers::conv_transpose2d(&g2, &params, stride, pad, StoragePolicy::MemSave, &mut t2).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        for (a, b) in y.data().iter().zip(&vjp) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}
