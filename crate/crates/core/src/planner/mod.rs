//! Predicts what a run will keep and how much memory it will need, from
//! shapes and differentiability flags alone.
//!
//! The plan consults the same storage rules the layers use, but prices saved
//! values and replays the forward live set on its own. Every executed run is
//! compared against it.

mod dot;
mod probe;

pub use dot::export_dot;
pub use probe::{probe_sweep, ProbeConfig, ProbeRow};

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::Result;
use crate::layers::{storage_rule, BatchNormMode, OpClass, ParentFlags};
use crate::network::{Differentiability, LayerKind, LayerTag, NetworkDescription};
use crate::scalar::Dtype;
use crate::tape::{SavedKind, StoragePolicy, RNG_SEED_BYTES};
use crate::tensor::{bytes_for, Shape};

/// A tensor of the network: a value (`0` is the input) or a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TensorRef {
    Value(usize),
    Weight(usize),
    Bias(usize),
}

impl TensorRef {
    pub fn is_parameter(self) -> bool {
        !matches!(self, TensorRef::Value(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedSave {
    pub kind: SavedKind,
    pub bytes: usize,
    /// The tensor referenced, for full-tensor saves.
    pub tensor: Option<TensorRef>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannedNode {
    pub layer: usize,
    pub tag: LayerTag,
    pub policy: StoragePolicy,
    pub inputs: Vec<TensorRef>,
    pub input_requires_grad: Vec<bool>,
    pub output_requires_grad: bool,
    pub saves: Vec<PlannedSave>,
}

impl PlannedNode {
    pub fn kinds(&self) -> Vec<SavedKind> {
        self.saves.iter().map(|s| s.kind).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StoragePlan {
    pub net: String,
    pub dtype: Dtype,
    pub nodes: Vec<PlannedNode>,
    pub value_shapes: Vec<Shape>,
    pub value_requires_grad: Vec<bool>,
    /// Full tensors the tape holds, deduplicated.
    pub held: BTreeSet<TensorRef>,
    pub tape_bytes: usize,
    pub tape_activation_bytes: usize,
    pub tape_parameter_bytes: usize,
    pub tape_aux_bytes: usize,
    pub peak_bytes: usize,
    pub peak_total_bytes: usize,
    pub parameter_bytes: usize,
}

impl StoragePlan {
    pub fn is_saved(&self, t: TensorRef) -> bool {
        self.held.contains(&t)
    }

    /// Bytes of a full tensor referenced by the plan.
    pub fn tensor_bytes(&self, net: &NetworkDescription, t: TensorRef) -> usize {
        let numel = match t {
            TensorRef::Value(v) => self.value_shapes[v].numel(),
            TensorRef::Weight(i) => param_numel(net, i).0,
            TensorRef::Bias(i) => param_numel(net, i).1,
        };
        bytes_for(numel, self.dtype)
    }
}

fn param_numel(net: &NetworkDescription, layer: usize) -> (usize, usize) {
    net.layers[layer].kind.param_shapes().map_or((0, 0), |(w, b)| {
        (w.iter().product(), b.map_or(0, |b| b.iter().product()))
    })
}

fn op_class(kind: &LayerKind) -> OpClass {
    match kind {
        LayerKind::Linear { .. } => OpClass::Linear,
        LayerKind::Conv2d { .. } => OpClass::Conv2d,
        LayerKind::ConvTranspose2d { .. } => OpClass::ConvTranspose2d,
        LayerKind::BatchNorm2d {
            mode: BatchNormMode::Train,
            ..
        } => OpClass::BatchNormTrain,
        LayerKind::BatchNorm2d {
            mode: BatchNormMode::Eval,
            ..
        } => OpClass::BatchNormEval,
        LayerKind::LayerNorm { .. } => OpClass::LayerNorm,
        LayerKind::Relu => OpClass::Relu,
        LayerKind::Dropout { .. } => OpClass::Dropout,
        LayerKind::MaxPool2d { .. } => OpClass::MaxPool2d,
        LayerKind::Softmax => OpClass::Softmax,
        LayerKind::Add => OpClass::Add,
        LayerKind::Matmul { .. } => OpClass::Matmul,
    }
}

/// Plans `net` under `diff`, with each layer's own policy.
pub fn plan(net: &NetworkDescription, diff: &Differentiability) -> Result<StoragePlan> {
    let shapes = net.value_shapes()?;
    let last_uses = net.last_uses()?;
    let dtype = net.dtype;
    let width = dtype.width();
    let bytes = |v: usize| bytes_for(shapes[v].numel(), dtype);
    let n_layers = net.layers.len();
    let final_value = n_layers;

    let mut rg = vec![false; n_layers + 1];
    rg[0] = diff.input;
    let mut nodes = Vec::with_capacity(n_layers);
    let mut held: BTreeSet<TensorRef> = BTreeSet::new();
    let mut aux_bytes = 0;
    let mut live = bytes(0);
    let mut peak = live;

    for (i, spec) in net.layers.iter().enumerate() {
        let ins = net.layer_inputs(i)?;
        let out_numel = shapes[i + 1].numel();
        let params = spec.kind.param_shapes();
        let p_rg = params.is_some() && diff.param(i);

        let mut inputs: Vec<TensorRef> = ins.iter().map(|&v| TensorRef::Value(v)).collect();
        let mut input_rg: Vec<bool> = ins.iter().map(|&v| rg[v]).collect();
        if let Some((_, b)) = &params {
            inputs.push(TensorRef::Weight(i));
            input_rg.push(p_rg);
            if b.is_some() {
                inputs.push(TensorRef::Bias(i));
                input_rg.push(p_rg);
            }
        }
        let has_bias = params.as_ref().is_some_and(|(_, b)| b.is_some());
        let flags = match (&params, spec.kind.arity()) {
            (Some(_), _) => ParentFlags::new(rg[ins[0]], p_rg, has_bias && p_rg),
            (None, 2) => ParentFlags::new(rg[ins[0]], rg[ins[1]], false),
            (None, _) => ParentFlags::new(rg[ins[0]], false, false),
        };
        let out_rg = input_rg.iter().any(|&f| f);
        rg[i + 1] = out_rg;

        let kinds = storage_rule(op_class(&spec.kind), spec.policy, flags);
        let saves: Vec<PlannedSave> = kinds
            .iter()
            .map(|&kind| {
                let full = |t: TensorRef| (Some(t), 0);
                let (tensor, aux) = match kind {
                    SavedKind::Input => full(TensorRef::Value(ins[0])),
                    SavedKind::Weight => full(TensorRef::Weight(i)),
                    SavedKind::Output => full(TensorRef::Value(i + 1)),
                    SavedKind::Lhs => full(TensorRef::Value(ins[0])),
                    SavedKind::Rhs => full(TensorRef::Value(ins[1])),
                    SavedKind::OutputMask => (None, out_numel.div_ceil(8)),
                    SavedKind::DropoutMask => (None, out_numel),
                    SavedKind::DropoutSeed => (None, RNG_SEED_BYTES),
                    SavedKind::ArgmaxIndices => (None, 4 * out_numel),
                    SavedKind::NormStats => {
                        let groups = match spec.kind {
                            LayerKind::BatchNorm2d { channels, .. } => channels,
                            _ => shapes[ins[0]].numel() / shapes[ins[0]].last().unwrap_or(1),
                        };
                        (None, 2 * groups * width)
                    }
                };
                let cost = match tensor {
                    Some(TensorRef::Value(v)) => bytes(v),
                    Some(TensorRef::Weight(l)) => bytes_for(param_numel(net, l).0, dtype),
                    Some(TensorRef::Bias(l)) => bytes_for(param_numel(net, l).1, dtype),
                    None => aux,
                };
                PlannedSave {
                    kind,
                    bytes: cost,
                    tensor,
                }
            })
            .collect();

        // Output first, then auxiliary saves, then releases.
        live += bytes(i + 1);
        peak = peak.max(live);
        for s in &saves {
            match s.tensor {
                Some(t) => {
                    held.insert(t);
                }
                None => {
                    aux_bytes += s.bytes;
                    live += s.bytes;
                    peak = peak.max(live);
                }
            }
        }
        let mut done: Vec<usize> = ins.iter().copied().filter(|&v| last_uses[v] == Some(i)).collect();
        if last_uses[i + 1].is_none() {
            done.push(i + 1);
        }
        done.sort_unstable();
        done.dedup();
        for v in done {
            if v != 0 && v != final_value && !held.contains(&TensorRef::Value(v)) {
                live -= bytes(v);
            }
        }

        nodes.push(PlannedNode {
            layer: i,
            tag: spec.kind.tag(),
            policy: spec.policy,
            inputs,
            input_requires_grad: input_rg,
            output_requires_grad: out_rg,
            saves,
        });
    }

    let mut activation = 0;
    let mut parameter = 0;
    for &t in &held {
        let b = match t {
            TensorRef::Value(v) => bytes(v),
            TensorRef::Weight(l) => bytes_for(param_numel(net, l).0, dtype),
            TensorRef::Bias(l) => bytes_for(param_numel(net, l).1, dtype),
        };
        if t.is_parameter() {
            parameter += b;
        } else {
            activation += b;
        }
    }
    let parameter_bytes = net.parameter_bytes();
    Ok(StoragePlan {
        net: net.name.clone(),
        dtype,
        nodes,
        value_shapes: shapes,
        value_requires_grad: rg,
        held,
        tape_bytes: activation + parameter + aux_bytes,
        tape_activation_bytes: activation,
        tape_parameter_bytes: parameter,
        tape_aux_bytes: aux_bytes,
        peak_bytes: peak,
        peak_total_bytes: peak + parameter_bytes,
        parameter_bytes,
    })
}
