//! Executes a network description on a fresh tape: one forward pass, the
//! weighted-sum loss, and one backward pass.
//!
//! Intermediates are released right after their last consumer. The tape
//! keeps the ones it saved until backward. Every run is checked against the
//! planner unless told otherwise.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{self, BatchNormState, DropoutConfig, LayerParams};
use crate::memwatch::{timed, CategoryBytes};
use crate::network::{Differentiability, LayerKind, NetworkDescription};
use crate::planner;
use crate::rng::Rng;
use crate::scalar::{Dtype, Scalar};
use crate::tape::{LeafKind, SavedKind, Tape, UnreadSave};
use crate::tensor::{Shape, Tensor, TensorId};

const LOSS_STREAM: u64 = u64::MAX;

/// Loss value, gradients, loss differentiability, combined peak and unread saves.
type LossPass<T> = (T, BTreeMap<Leaf, Vec<T>>, bool, usize, Vec<UnreadSave>);

/// A leaf tensor of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Leaf {
    Input,
    Weight(usize),
    Bias(usize),
}

impl std::fmt::Display for Leaf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Leaf::Input => f.write_str("input"),
            Leaf::Weight(i) => write!(f, "layer{i}.weight"),
            Leaf::Bias(i) => write!(f, "layer{i}.bias"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Compare saved sets, tape bytes and peaks against the planner.
    pub check_plan: bool,
    /// Run backward when the loss requires grad.
    pub backward: bool,
    /// Fingerprint ReLU signs and max-pool argmaxes.
    pub signature: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            check_plan: true,
            backward: true,
            signature: false,
        }
    }
}

/// Memory and timing of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub tape_bytes: usize,
    pub tape_activation_bytes: usize,
    pub tape_parameter_bytes: usize,
    pub tape_aux_bytes: usize,
    pub peak_bytes: usize,
    pub peak_total_bytes: usize,
    pub combined_peak_bytes: usize,
    pub parameter_bytes: usize,
    pub largest_alloc_bytes: usize,
    pub peak_breakdown: CategoryBytes,
    pub forward_seconds: f64,
    pub backward_seconds: f64,
    pub loss_requires_grad: bool,
    /// Saved kinds per layer, sorted.
    pub saved_kinds: Vec<Vec<SavedKind>>,
    /// Saved values backward never read.
    pub unread: Vec<UnreadSave>,
}

#[derive(Debug, Clone)]
pub struct Run<T> {
    pub summary: RunSummary,
    pub loss: T,
    pub grads: BTreeMap<Leaf, Vec<T>>,
    pub signature: u64,
}

/// Leaf data and module state of a network, initialized from its seed.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    net: NetworkDescription,
    last_uses: Vec<Option<usize>>,
    input: Vec<T>,
    weights: Vec<Option<Vec<T>>>,
    biases: Vec<Option<Vec<T>>>,
    bn: Vec<Option<BatchNormState<T>>>,
    dropout_seeds: Vec<u64>,
    loss_weight: Vec<T>,
    shapes: Vec<Shape>,
}

fn normals<T: Scalar>(rng: &mut Rng, n: usize, scale: f64, shift: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(shift + scale * rng.normal())).collect()
}

impl<T: Scalar> Model<T> {
    pub fn new(net: &NetworkDescription) -> Result<Self> {
        if net.dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                declared: net.dtype,
                requested: T::DTYPE,
            });
        }
        let shapes = net.value_shapes()?;
        let last_uses = net.last_uses()?;
        let n = net.layers.len();
        let mut input_rng = Rng::with_stream(net.seed, 0);
        let input = normals(&mut input_rng, shapes[0].numel(), 1.0, 0.0);
        let mut weights = vec![None; n];
        let mut biases = vec![None; n];
        let mut bn = vec![None; n];
        let mut dropout_seeds = vec![0; n];
        for (i, spec) in net.layers.iter().enumerate() {
            let mut rng = Rng::with_stream(net.seed, 1 + i as u64);
            dropout_seeds[i] = rng.next_u64();
            let Some((w, b)) = spec.kind.param_shapes() else {
                continue;
            };
            let w_numel: usize = w.iter().product();
            let fan_in = (w_numel / w[0]).max(1) as f64;
            let norm = spec.kind.is_normalization();
            weights[i] = Some(if norm {
                normals(&mut rng, w_numel, 0.1, 1.0)
            } else {
                normals(&mut rng, w_numel, 1.0 / fan_in.sqrt(), 0.0)
            });
            biases[i] = b.map(|b| normals(&mut rng, b.iter().product(), 0.1, 0.0));
            if let LayerKind::BatchNorm2d { channels, mode, eps } = spec.kind {
                let mut s = BatchNormState::new(channels, eps, mode);
                s.running_mean = normals(&mut rng, channels, 0.1, 0.0);
                s.running_var = (0..channels).map(|_| T::lit(1.0 + 0.5 * rng.uniform())).collect();
                bn[i] = Some(s);
            }
        }
        let mut loss_rng = Rng::with_stream(net.seed, LOSS_STREAM);
        let loss_weight = normals(&mut loss_rng, shapes[n].numel(), 1.0, 0.0);
        Ok(Self {
            net: net.clone(),
            last_uses,
            input,
            weights,
            biases,
            bn,
            dropout_seeds,
            loss_weight,
            shapes,
        })
    }

    pub fn net(&self) -> &NetworkDescription {
        &self.net
    }

    /// Every leaf, input first, then weight and bias per layer.
    pub fn leaves(&self) -> Vec<Leaf> {
        let mut out = vec![Leaf::Input];
        for i in 0..self.net.layers.len() {
            if self.weights[i].is_some() {
                out.push(Leaf::Weight(i));
            }
            if self.biases[i].is_some() {
                out.push(Leaf::Bias(i));
            }
        }
        out
    }

    pub fn requires_grad(&self, leaf: Leaf, diff: &Differentiability) -> bool {
        match leaf {
            Leaf::Input => diff.input,
            Leaf::Weight(i) | Leaf::Bias(i) => diff.param(i),
        }
    }

    pub fn leaf(&self, leaf: Leaf) -> Option<&[T]> {
        match leaf {
            Leaf::Input => Some(&self.input),
            Leaf::Weight(i) => self.weights.get(i)?.as_deref(),
            Leaf::Bias(i) => self.biases.get(i)?.as_deref(),
        }
    }

    pub fn leaf_mut(&mut self, leaf: Leaf) -> Option<&mut [T]> {
        match leaf {
            Leaf::Input => Some(&mut self.input),
            Leaf::Weight(i) => self.weights.get_mut(i)?.as_deref_mut(),
            Leaf::Bias(i) => self.biases.get_mut(i)?.as_deref_mut(),
        }
    }

    /// Forward, loss and (if requested and possible) backward on a fresh
    /// tape. Module state is copied, so repeated runs are identical.
    pub fn run(&self, diff: &Differentiability, opts: &RunOptions) -> Result<Run<T>> {
        let net = &self.net;
        let n_layers = net.layers.len();
        if diff.params.len() != n_layers {
            return Err(Error::InvalidConfig(format!(
                "differentiability covers {} layers, network has {n_layers}",
                diff.params.len()
            )));
        }
        let mut tape = Tape::<T>::new();
        let mut leaf_ids: HashMap<TensorId, Leaf> = HashMap::new();

        let x = Tensor::from_vec(self.shapes[0].clone(), self.input.clone())?.requires_grad(diff.input);
        tape.register_leaf(&x, LeafKind::Input)?;
        leaf_ids.insert(x.id(), Leaf::Input);

        let mut params: Vec<Option<LayerParams<T>>> = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let Some((w_shape, b_shape)) = net.layers[i].kind.param_shapes() else {
                params.push(None);
                continue;
            };
            let rg = diff.param(i);
            let w = Tensor::from_vec(Shape::new(w_shape)?, self.weights[i].clone().expect("weight"))?.requires_grad(rg);
            tape.register_leaf(&w, LeafKind::Parameter)?;
            leaf_ids.insert(w.id(), Leaf::Weight(i));
            let b = match b_shape {
                Some(s) => {
                    let b = Tensor::from_vec(Shape::new(s)?, self.biases[i].clone().expect("bias"))?.requires_grad(rg);
                    tape.register_leaf(&b, LeafKind::Parameter)?;
                    leaf_ids.insert(b.id(), Leaf::Bias(i));
                    Some(b)
                }
                None => None,
            };
            params.push(Some(LayerParams::new(w, b)));
        }
        let mut bn = self.bn.clone();

        let mut values: Vec<Option<Tensor<T>>> = vec![None; n_layers + 1];
        values[0] = Some(x);
        let mut sig = DefaultHasher::new();
        let (fwd, forward_seconds) = timed(|| -> Result<()> {
            for i in 0..n_layers {
                let ins = net.layer_inputs(i)?;
                let out = {
                    let args: Vec<&Tensor<T>> = ins
                        .iter()
                        .map(|&v| values[v].as_ref().expect("value released before its last use"))
                        .collect();
                    if opts.signature {
                        fingerprint(&net.layers[i].kind, &args, &mut sig)?;
                    }
                    self.forward_layer(i, &args, params[i].as_ref(), bn[i].as_mut(), &mut tape)?
                };
                values[i + 1] = Some(out);
                let mut done: Vec<usize> = ins.iter().copied().filter(|&v| self.last_uses[v] == Some(i)).collect();
                if self.last_uses[i + 1].is_none() {
                    done.push(i + 1);
                }
                done.sort_unstable();
                done.dedup();
                for v in done {
                    if v != 0 && v != n_layers {
                        let t = values[v].take().expect("value present");
                        tape.release(t)?;
                    }
                }
            }
            Ok(())
        });
        fwd?;

        let tape_split = tape.breakdown();
        let ledger = tape.ledger();
        let mut summary = RunSummary {
            tape_bytes: tape_split.total(),
            tape_activation_bytes: tape_split.activation,
            tape_parameter_bytes: tape_split.parameter,
            tape_aux_bytes: tape_split.aux,
            peak_bytes: ledger.peak(),
            peak_total_bytes: ledger.peak_total(),
            combined_peak_bytes: 0,
            parameter_bytes: net.parameter_bytes(),
            largest_alloc_bytes: ledger.largest_alloc(),
            peak_breakdown: ledger.peak_breakdown(),
            forward_seconds,
            backward_seconds: 0.0,
            loss_requires_grad: false,
            saved_kinds: tape.nodes().iter().map(|n| n.saved_kinds()).collect(),
            unread: Vec::new(),
        };
        if opts.check_plan {
            check_against_plan(net, diff, &summary)?;
        }

        let y = values[n_layers].take().expect("network output");
        let (loss_out, backward_seconds) = timed(|| -> Result<LossPass<T>> {
            let c = Tensor::from_vec(y.shape().clone(), self.loss_weight.clone())?;
            tape.register_leaf(&c, LeafKind::Constant)?;
            let weighted = layers::mul(&y, &c, &mut tape)?;
            let loss = layers::sum(&weighted, &mut tape)?;
            let value = loss.item();
            let rg = loss.is_differentiable();
            if !(rg && opts.backward) {
                return Ok((value, BTreeMap::new(), rg, tape.ledger().peak(), Vec::new()));
            }
            drop((weighted, c, y));
            values.clear();
            let result = tape.backward(&loss)?;
            let mut grads = BTreeMap::new();
            for (id, g) in result.grads.iter() {
                if let Some(&leaf) = leaf_ids.get(id) {
                    grads.insert(leaf, g.to_vec());
                }
            }
            Ok((value, grads, rg, result.ledger.peak(), result.unread))
        });
        let (loss, grads, rg, combined, unread) = loss_out?;
        summary.backward_seconds = backward_seconds;
        summary.loss_requires_grad = rg;
        summary.combined_peak_bytes = combined;
        summary.unread = unread;
        Ok(Run {
            summary,
            loss,
            grads,
            signature: sig.finish(),
        })
    }

    /// Loss value with nothing differentiable, plus the kink fingerprint.
    pub fn loss(&self) -> Result<(T, u64)> {
        let opts = RunOptions {
            check_plan: false,
            backward: false,
            signature: true,
        };
        let run = self.run(&Differentiability::none(&self.net), &opts)?;
        Ok((run.loss, run.signature))
    }

    fn forward_layer(
        &self,
        i: usize,
        args: &[&Tensor<T>],
        params: Option<&LayerParams<T>>,
        bn: Option<&mut BatchNormState<T>>,
        tape: &mut Tape<T>,
    ) -> Result<Tensor<T>> {
        let spec = &self.net.layers[i];
        let policy = spec.policy;
        let x = args[0];
        let p = || params.expect("parameterized layer has params");
        match spec.kind {
            LayerKind::Linear { .. } => layers::linear(x, p(), policy, tape),
            LayerKind::Conv2d { stride, padding, .. } => layers::conv2d(x, p(), stride, padding, policy, tape),
            LayerKind::ConvTranspose2d { stride, padding, .. } => {
                layers::conv_transpose2d(x, p(), stride, padding, policy, tape)
            }
            LayerKind::BatchNorm2d { .. } => layers::batchnorm2d(x, p(), bn.expect("batch-norm state"), policy, tape),
            LayerKind::LayerNorm { eps, .. } => layers::layernorm(x, p(), eps, policy, tape),
            LayerKind::Relu => layers::relu(x, policy, tape),
            LayerKind::Dropout { p } => {
                let cfg = DropoutConfig::new(p, self.dropout_seeds[i])?;
                layers::dropout(x, &cfg, policy, tape)
            }
            LayerKind::MaxPool2d { window, stride } => {
                layers::maxpool2d(x, window, stride.unwrap_or(window), policy, tape)
            }
            LayerKind::Softmax => layers::softmax(x, policy, tape),
            LayerKind::Add => layers::add(x, args[1], tape),
            LayerKind::Matmul { transpose_rhs, scale } => {
                layers::matmul(x, args[1], transpose_rhs, scale, policy, tape)
            }
        }
    }
}

/// Hashes the decisions that make a layer non-smooth.
fn fingerprint<T: Scalar>(kind: &LayerKind, args: &[&Tensor<T>], h: &mut DefaultHasher) -> Result<()> {
    match *kind {
        LayerKind::Relu => {
            for &v in args[0].data() {
                (v > T::zero()).hash(h);
            }
        }
        LayerKind::MaxPool2d { window, stride } => {
            let (_, idx, _) = layers::pool::pool_forward(args[0], window, stride.unwrap_or(window))?;
            idx.hash(h);
        }
        _ => {}
    }
    Ok(())
}

fn check_against_plan(net: &NetworkDescription, diff: &Differentiability, s: &RunSummary) -> Result<()> {
    let plan = planner::plan(net, diff)?;
    for (i, node) in plan.nodes.iter().enumerate() {
        let planned = node.kinds();
        if s.saved_kinds.get(i) != Some(&planned) {
            return Err(Error::OracleMismatch(format!(
                "{}: layer {i} ({}) saved {:?}, plan says {:?}",
                net.name,
                node.tag,
                s.saved_kinds.get(i),
                planned
            )));
        }
    }
    let pairs = [
        ("tape_bytes", plan.tape_bytes, s.tape_bytes),
        (
            "tape_activation_bytes",
            plan.tape_activation_bytes,
            s.tape_activation_bytes,
        ),
        (
            "tape_parameter_bytes",
            plan.tape_parameter_bytes,
            s.tape_parameter_bytes,
        ),
        ("tape_aux_bytes", plan.tape_aux_bytes, s.tape_aux_bytes),
        ("peak_bytes", plan.peak_bytes, s.peak_bytes),
        ("peak_total_bytes", plan.peak_total_bytes, s.peak_total_bytes),
    ];
    for (what, planned, executed) in pairs {
        if planned != executed {
            return Err(Error::OracleMismatch(format!(
                "{}: {what} planned {planned}, executed {executed}",
                net.name
            )));
        }
    }
    Ok(())
}

/// Builds a model of the requested element type and runs it.
pub fn run<T: Scalar>(net: &NetworkDescription, diff: &Differentiability, opts: &RunOptions) -> Result<Run<T>> {
    Model::<T>::new(net)?.run(diff, opts)
}

/// Runs with the element type the description declares.
pub fn run_dyn(net: &NetworkDescription, diff: &Differentiability, opts: &RunOptions) -> Result<RunSummary> {
    Ok(match net.dtype {
        Dtype::F32 => run::<f32>(net, diff, opts)?.summary,
        Dtype::F64 => run::<f64>(net, diff, opts)?.summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BuiltinNet, Scenario};
    use crate::tape::StoragePolicy;

    fn tiny_cnn(depth: usize) -> NetworkDescription {
        BuiltinNet::DeepCnn {
            depth,
            channels: 2,
            batch: 1,
            size: 4,
        }
        .build()
    }

    #[test]
    fn non_differentiable_chain_peaks_at_three_activations() {
        let s = 2 * 16 * 4;
        for depth in 1..5 {
            let net = tiny_cnn(depth);
            let diff = Scenario::None.resolve(&net);
            let sum = run_dyn(&net, &diff, &RunOptions::default()).unwrap();
            assert_eq!(sum.peak_bytes, if depth == 1 { 2 * s } else { 3 * s });
            assert_eq!(sum.tape_bytes, 0);
            assert!(!sum.loss_requires_grad);
        }
    }

    #[test]
    fn fully_differentiable_chain_holds_every_input() {
        let s = 2 * 16 * 4;
        let net = tiny_cnn(10);
        let diff = Scenario::All.resolve(&net);
        let sum = run_dyn(&net, &diff, &RunOptions::default()).unwrap();
        assert_eq!(sum.tape_activation_bytes, 10 * s);
        assert_eq!(sum.peak_bytes, 11 * s);
        assert!(sum.unread.is_empty() || sum.unread.iter().all(|u| u.policy == StoragePolicy::Naive));
    }

    #[test]
    fn runs_are_deterministic_and_dtype_checked() {
        let net = tiny_cnn(3).with_dtype(Dtype::F64);
        let diff = Scenario::All.resolve(&net);
        let a = run::<f64>(&net, &diff, &RunOptions::default()).unwrap();
        let b = run::<f64>(&net, &diff, &RunOptions::default()).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.grads.len(), 3);
        assert!(matches!(Model::<f32>::new(&net), Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn surgical_grads_cover_exactly_the_first_quarter() {
        let net = BuiltinNet::small("mlp", Some(8))
            .unwrap()
            .build()
            .with_dtype(Dtype::F64);
        let diff = Scenario::Surgical.resolve(&net);
        let r = run::<f64>(&net, &diff, &RunOptions::default()).unwrap();
        let keys: Vec<Leaf> = r.grads.keys().copied().collect();
        assert_eq!(keys, [Leaf::Weight(0), Leaf::Weight(2), Leaf::Bias(0), Leaf::Bias(2)]);
    }
}
