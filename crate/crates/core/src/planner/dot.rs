use std::fmt::Write;

use super::{StoragePlan, TensorRef};
use crate::network::NetworkDescription;
use crate::tape::SavedKind;

fn tensor_id(t: TensorRef) -> String {
    match t {
        TensorRef::Value(v) => format!("v{v}"),
        TensorRef::Weight(i) => format!("w{i}"),
        TensorRef::Bias(i) => format!("b{i}"),
    }
}

fn tensor_name(t: TensorRef, n_layers: usize) -> String {
    match t {
        TensorRef::Value(0) => "input".into(),
        TensorRef::Value(v) if v == n_layers => "output".into(),
        TensorRef::Value(v) => format!("layer {} output", v - 1),
        TensorRef::Weight(i) => format!("layer {i} weight"),
        TensorRef::Bias(i) => format!("layer {i} bias"),
    }
}

fn aux_label(kind: SavedKind) -> &'static str {
    match kind {
        SavedKind::OutputMask => "bit mask",
        SavedKind::DropoutMask => "byte mask",
        SavedKind::DropoutSeed => "rng seed",
        SavedKind::ArgmaxIndices => "argmax indices",
        SavedKind::NormStats => "statistics",
        _ => "tensor",
    }
}

/// Graphviz rendering of `net` with tape-held tensors marked
/// `[saved tensor]` and drawn red. Op labels carry the layer kind only, so
/// plans that keep the same values render identically.
pub fn export_dot(net: &NetworkDescription, plan: &StoragePlan) -> String {
    let n_layers = net.layers.len();
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", net.name.replace('"', "'"));
    out.push_str("  rankdir=TB;\n  node [fontname=\"Helvetica\"];\n");

    let mut tensors: Vec<TensorRef> = (0..=n_layers).map(TensorRef::Value).collect();
    for node in &plan.nodes {
        tensors.extend(node.inputs.iter().copied().filter(|t| t.is_parameter()));
    }
    for t in tensors {
        let shape = match t {
            TensorRef::Value(v) => plan.value_shapes[v].to_string(),
            TensorRef::Weight(i) | TensorRef::Bias(i) => {
                let (w, b) = net.layers[i].kind.param_shapes().unwrap_or_default();
                let dims = if matches!(t, TensorRef::Weight(_)) {
                    w
                } else {
                    b.unwrap_or_default()
                };
                format!("({})", dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", "))
            }
        };
        let mut label = format!("{}\\n{}", tensor_name(t, n_layers), shape);
        let mut attrs = String::from("shape=ellipse");
        if plan.is_saved(t) {
            let _ = write!(label, "\\n[saved tensor] {} B", plan.tensor_bytes(net, t));
            attrs.push_str(", color=red, fontcolor=red");
        }
        let _ = writeln!(out, "  {} [{attrs}, label=\"{label}\"];", tensor_id(t));
    }
    for node in &plan.nodes {
        let mut label = node.tag.name().to_string();
        for s in node.saves.iter().filter(|s| s.tensor.is_none()) {
            let _ = write!(label, "\\n[saved {}] {} B", aux_label(s.kind), s.bytes);
        }
        let _ = writeln!(out, "  op{} [shape=box, label=\"{label}\"];", node.layer);
        for &t in &node.inputs {
            let _ = writeln!(out, "  {} -> op{};", tensor_id(t), node.layer);
        }
        let _ = writeln!(out, "  op{} -> v{};", node.layer, node.layer + 1);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::convert_network;
    use crate::network::{BuiltinNet, ProbeLayer, Scenario};
    use crate::planner::plan;
    use crate::tape::StoragePolicy;

    fn render(layer: ProbeLayer, policy: StoragePolicy, scenario: Scenario) -> String {
        let net = convert_network(&BuiltinNet::ProbeChain { layer, depth: 1 }.build(), policy, None);
        let p = plan(&net, &scenario.resolve(&net)).unwrap();
        export_dot(&net, &p)
    }

    #[test]
    fn conv_input_scenario_marks_input_only_under_naive() {
        let naive = render(ProbeLayer::Conv2d, StoragePolicy::Naive, Scenario::Input);
        let memsave = render(ProbeLayer::Conv2d, StoragePolicy::MemSave, Scenario::Input);
        let input_line = |s: &str| {
            s.lines()
                .find(|l| l.trim_start().starts_with("v0 ["))
                .unwrap()
                .to_string()
        };
        assert!(input_line(&naive).contains("[saved tensor] 131072 B"));
        assert!(!input_line(&memsave).contains("saved"));
    }

    #[test]
    fn nothing_saved_means_no_annotation() {
        let dot = render(ProbeLayer::Conv2d, StoragePolicy::Naive, Scenario::None);
        assert!(!dot.contains("saved"));
    }

    #[test]
    fn linear_graphs_identical_across_policies() {
        for s in [Scenario::Input, Scenario::All, Scenario::None] {
            assert_eq!(
                render(ProbeLayer::Linear, StoragePolicy::Naive, s),
                render(ProbeLayer::Linear, StoragePolicy::MemSave, s)
            );
        }
    }
}
