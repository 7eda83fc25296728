use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::network::{LayerTag, NetworkDescription};
use crate::tape::StoragePolicy;

/// Sets the storage policy of every layer whose kind is in `filter` (every
/// layer when `filter` is `None`) to `target`. Other layers keep theirs.
pub fn convert_network(
    net: &NetworkDescription,
    target: StoragePolicy,
    filter: Option<&BTreeSet<LayerTag>>,
) -> NetworkDescription {
    let mut out = net.clone();
    for layer in &mut out.layers {
        if filter.is_none_or(|f| f.contains(&layer.kind.tag())) {
            layer.policy = target;
        }
    }
    out
}

/// Parses `conv2d,relu` or `all` into a set of layer kinds.
pub fn parse_layer_filter(spec: &str) -> Result<BTreeSet<LayerTag>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(LayerTag::ALL.into_iter().collect());
    }
    let set: BTreeSet<LayerTag> = spec
        .split([',', '+'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if set.is_empty() {
        return Err(Error::UnknownLayerKind(spec.to_string()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerKind, LayerSpec};
    use crate::scalar::Dtype;
    use crate::tensor::Shape;

    fn conv_relu_chain() -> NetworkDescription {
        let conv = LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        };
        NetworkDescription {
            name: "chain".into(),
            dtype: Dtype::F32,
            input_shape: Shape::new(vec![1, 2, 4, 4]).unwrap(),
            seed: 0,
            layers: vec![
                LayerSpec::new(conv.clone()),
                LayerSpec::new(LayerKind::Relu),
                LayerSpec::new(conv),
                LayerSpec::new(LayerKind::Relu),
            ],
        }
    }

    #[test]
    fn filter_swaps_only_named_kinds() {
        let net = conv_relu_chain();
        let f = parse_layer_filter("conv2d").unwrap();
        let out = convert_network(&net, StoragePolicy::MemSave, Some(&f));
        for l in &out.layers {
            let expect = match l.kind.tag() {
                LayerTag::Conv2d => StoragePolicy::MemSave,
                _ => StoragePolicy::Naive,
            };
            assert_eq!(l.policy, expect);
        }
    }

    #[test]
    fn all_swaps_everything_and_is_idempotent() {
        let net = conv_relu_chain();
        let all = parse_layer_filter("all").unwrap();
        let once = convert_network(&net, StoragePolicy::MemSave, Some(&all));
        assert!(once.layers.iter().all(|l| l.policy == StoragePolicy::MemSave));
        assert_eq!(convert_network(&once, StoragePolicy::MemSave, Some(&all)), once);
        assert_eq!(convert_network(&net, StoragePolicy::MemSave, None), once);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(matches!(
            parse_layer_filter("conv2d,gelu"),
            Err(Error::UnknownLayerKind(_))
        ));
        assert!(parse_layer_filter(" , ").is_err());
        assert_eq!(parse_layer_filter("conv2d+relu").unwrap().len(), 2);
    }
}
