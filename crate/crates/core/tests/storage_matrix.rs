mod common;

use leantape::exec::{run_dyn, RunOptions};
use leantape::layers::{convert_network, BatchNormMode};
use leantape::network::{Differentiability, LayerKind};
use leantape::tape::SavedKind;
use leantape::StoragePolicy;

/// Saved kinds of the last layer of each case, written out independently of
/// the rules table. `a` and `b` are the differentiability of its two
/// parents (operand or input, then weight or right operand).
fn expected(kind: &LayerKind, policy: StoragePolicy, a: bool, b: bool) -> Vec<SavedKind> {
    use SavedKind::*;
    let out = a || b;
    let memsave = policy == StoragePolicy::MemSave;
    let mut v = match kind {
        LayerKind::Linear { .. } => [(b, Input), (a, Weight)].to_vec(),
        LayerKind::Conv2d { .. }
        | LayerKind::ConvTranspose2d { .. }
        | LayerKind::BatchNorm2d {
            mode: BatchNormMode::Eval,
            ..
        } => {
            if memsave {
                vec![(b, Input), (a, Weight)]
            } else {
                vec![(out, Input), (out, Weight)]
            }
        }
        LayerKind::BatchNorm2d { .. } | LayerKind::LayerNorm { .. } => {
            vec![(out, Input), (out, NormStats), (a, Weight)]
        }
        LayerKind::Relu => vec![(out, if memsave { OutputMask } else { Output })],
        LayerKind::Dropout { .. } => vec![(out, if memsave { DropoutSeed } else { DropoutMask })],
        LayerKind::MaxPool2d { .. } => vec![(out, ArgmaxIndices)],
        LayerKind::Softmax => vec![(out, Output)],
        LayerKind::Matmul { .. } => vec![(b, Lhs), (a, Rhs)],
        LayerKind::Add => vec![],
    }
    .into_iter()
    .filter_map(|(keep, k)| keep.then_some(k))
    .collect::<Vec<_>>();
    v.sort();
    v
}

#[test]
fn every_layer_matches_the_table() {
    let mut cells = 0;
    for base in common::layer_cases() {
        let last = base.layers.len() - 1;
        let kind = base.layers[last].kind.clone();
        for policy in [StoragePolicy::Naive, StoragePolicy::MemSave] {
            let net = convert_network(&base, policy, None);
            for x in [false, true] {
                for w in [false, true] {
                    let diff = Differentiability {
                        input: x,
                        params: net.layers.iter().map(|l| w && l.kind.has_params()).collect(),
                    };
                    // Parents of the layer under test: the previous value, or
                    // (input, previous value) for two-operand layers.
                    let (a, b) = match (last, kind.arity()) {
                        (0, _) => (x, w && kind.has_params()),
                        (_, 2) => (x, x || w),
                        _ => (x || w, false),
                    };
                    let run = run_dyn(&net, &diff, &RunOptions::default()).unwrap();
                    assert_eq!(
                        run.saved_kinds[last],
                        expected(&kind, policy, a, b),
                        "{} {policy} input={x} params={w}",
                        base.name
                    );
                    cells += 1;
                }
            }
        }
    }
    assert_eq!(cells, 12 * 8);
}
