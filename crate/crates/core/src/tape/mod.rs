//! The recorded computation graph.
//!
//! Every layer call appends one [`TapeNode`] carrying exactly the saved
//! values its storage rule selected. Full tensors saved by several nodes are
//! reference counted so their bytes count once. [`Tape::backward`] consumes
//! the tape, runs the vector-Jacobian products in reverse recording order and
//! returns gradients for every differentiable leaf.

mod saved;

pub use saved::{BitMask, Saved, SavedData, SavedKind, StoragePolicy, RNG_SEED_BYTES};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::memwatch::{Category, MemoryLedger};
use crate::scalar::Scalar;
use crate::tensor::{bytes_for, Shape, Tensor, TensorId};

/// Operation recorded in a node, with the configuration its VJP needs.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Linear,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        stride: usize,
        padding: usize,
    },
    BatchNormTrain,
    /// Running statistics are module state referenced here; they are not
    /// tape storage.
    BatchNormEval {
        mean: Arc<[T]>,
        inv_std: Arc<[T]>,
    },
    LayerNorm,
    Relu,
    Dropout {
        p: f64,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Softmax,
    Add,
    Mul,
    Sum,
    Matmul {
        transpose_rhs: bool,
        scale: f64,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Linear => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNormTrain => "batchnorm2d_train",
            Op::BatchNormEval { .. } => "batchnorm2d_eval",
            Op::LayerNorm => "layernorm",
            Op::Relu => "relu",
            Op::Dropout { .. } => "dropout",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::Matmul { .. } => "matmul",
        }
    }
}

/// How a leaf enters the tape; decides its ledger category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Parameter,
    /// Any other external tensor, e.g. loss weights.
    Constant,
}

#[derive(Debug, Clone)]
struct TensorInfo {
    shape: Shape,
    requires_grad: bool,
    leaf: Option<LeafKind>,
}

#[derive(Debug, Clone, Copy)]
struct SavedEntry {
    refs: usize,
    bytes: usize,
    parameter: bool,
}

#[derive(Debug)]
pub struct TapeNode<T> {
    pub op: Op<T>,
    pub policy: StoragePolicy,
    pub inputs: Vec<TensorId>,
    pub input_shapes: Vec<Shape>,
    pub input_requires_grad: Vec<bool>,
    pub output: TensorId,
    pub output_shape: Shape,
    pub output_requires_grad: bool,
    pub saved: Vec<Saved<T>>,
    index: usize,
}

impl<T: Scalar> TapeNode<T> {
    /// Builds a node; the output flag follows dominant inheritance.
    pub fn new(
        op: Op<T>,
        policy: StoragePolicy,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        saved: Vec<Saved<T>>,
    ) -> Self {
        Self {
            op,
            policy,
            inputs: inputs.iter().map(|t| t.id()).collect(),
            input_shapes: inputs.iter().map(|t| t.shape().clone()).collect(),
            input_requires_grad: inputs.iter().map(|t| t.is_differentiable()).collect(),
            output: output.id(),
            output_shape: output.shape().clone(),
            output_requires_grad: inputs.iter().any(|t| t.is_differentiable()),
            saved,
            index: 0,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn needs_grad(&self, input: usize) -> bool {
        self.input_requires_grad.get(input).copied().unwrap_or(false)
    }

    pub fn saved_kinds(&self) -> Vec<SavedKind> {
        let mut k: Vec<_> = self.saved.iter().map(|s| s.kind).collect();
        k.sort();
        k
    }

    /// Looks up a saved value for a VJP and counts the read.
    pub fn fetch(&self, kind: SavedKind) -> Result<&SavedData<T>> {
        match self.saved.iter().find(|s| s.kind == kind) {
            Some(s) => {
                s.reads.set(s.reads.get() + 1);
                Ok(&s.data)
            }
            None => Err(Error::MissingSavedValue {
                node: self.index,
                op: self.op.name(),
                kind,
            }),
        }
    }

    pub fn fetch_tensor(&self, kind: SavedKind) -> Result<&Tensor<T>> {
        match self.fetch(kind)? {
            SavedData::Full(t) => Ok(t),
            _ => Err(Error::MissingSavedValue {
                node: self.index,
                op: self.op.name(),
                kind,
            }),
        }
    }
}

/// Deduplicated tape bytes split by what they hold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeBytes {
    pub activation: usize,
    pub parameter: usize,
    pub aux: usize,
}

impl TapeBytes {
    pub fn total(&self) -> usize {
        self.activation + self.parameter + self.aux
    }
}

/// A saved value that no executed VJP read.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct UnreadSave {
    pub node: usize,
    pub op: &'static str,
    pub policy: StoragePolicy,
    pub kind: SavedKind,
}

/// Gradients of the differentiable leaves.
#[derive(Debug, Clone, Default)]
pub struct GradStore<T> {
    grads: BTreeMap<TensorId, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: TensorId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TensorId, &Tensor<T>)> {
        self.grads.iter()
    }
}

pub struct BackwardResult<T> {
    pub grads: GradStore<T>,
    pub unread: Vec<UnreadSave>,
    /// Ledger after backward, with gradient buffers still live and the
    /// tape's own storage released.
    pub ledger: MemoryLedger,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<TapeNode<T>>,
    tensors: HashMap<TensorId, TensorInfo>,
    saved_registry: HashMap<TensorId, SavedEntry>,
    aux_bytes: usize,
    deferred: Vec<TensorId>,
    ledger: MemoryLedger,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tensors: HashMap::new(),
            saved_registry: HashMap::new(),
            aux_bytes: 0,
            deferred: Vec::new(),
            ledger: MemoryLedger::new(),
        }
    }

    /// Announces an externally created tensor.
    pub fn register_leaf(&mut self, t: &Tensor<T>, kind: LeafKind) -> Result<()> {
        if self.tensors.contains_key(&t.id()) {
            return Err(Error::DuplicateTensor(t.id()));
        }
        self.tensors.insert(
            t.id(),
            TensorInfo {
                shape: t.shape().clone(),
                requires_grad: t.is_differentiable(),
                leaf: Some(kind),
            },
        );
        let category = match kind {
            LeafKind::Input | LeafKind::Constant => Category::NetworkInput,
            LeafKind::Parameter => Category::Parameter,
        };
        self.ledger.alloc(t.id(), t.byte_size(), category)
    }

    pub fn is_known(&self, id: TensorId) -> bool {
        self.tensors.contains_key(&id)
    }

    pub fn requires_grad(&self, id: TensorId) -> Option<bool> {
        self.tensors.get(&id).map(|i| i.requires_grad)
    }

    /// Appends a node and takes ownership of its saved values.
    pub fn record(&mut self, mut node: TapeNode<T>) -> Result<()> {
        let mut any_rg = false;
        for (id, &flag) in node.inputs.iter().zip(&node.input_requires_grad) {
            let info = self.tensors.get(id).ok_or(Error::UnknownTensor(*id))?;
            if info.requires_grad != flag {
                return Err(Error::InvalidConfig(format!(
                    "node input {id} flag disagrees with its registration"
                )));
            }
            any_rg |= flag;
        }
        if any_rg != node.output_requires_grad {
            return Err(Error::InvalidConfig(format!(
                "{} output must require grad iff a parent does",
                node.op.name()
            )));
        }
        if self.tensors.contains_key(&node.output) {
            return Err(Error::DuplicateTensor(node.output));
        }
        self.tensors.insert(
            node.output,
            TensorInfo {
                shape: node.output_shape.clone(),
                requires_grad: node.output_requires_grad,
                leaf: None,
            },
        );
        self.ledger.alloc(
            node.output,
            bytes_for(node.output_shape.numel(), T::DTYPE),
            Category::Activation,
        )?;

        for s in &mut node.saved {
            match &s.data {
                SavedData::Full(t) => {
                    let info = self.tensors.get(&t.id()).ok_or(Error::UnknownTensor(t.id()))?;
                    let parameter = info.leaf == Some(LeafKind::Parameter);
                    self.saved_registry
                        .entry(t.id())
                        .and_modify(|e| e.refs += 1)
                        .or_insert(SavedEntry {
                            refs: 1,
                            bytes: t.byte_size(),
                            parameter,
                        });
                }
                aux => {
                    let id = TensorId::fresh();
                    let cost = aux.cost();
                    self.ledger.alloc(id, cost, Category::TapeSaved)?;
                    self.aux_bytes += cost;
                    s.ledger_id = Some(id);
                }
            }
        }
        node.index = self.nodes.len();
        self.nodes.push(node);
        Ok(())
    }

    /// Builds the output tensor, lets `saves` pick what to keep, records
    /// the node and returns the output.
    pub fn emit(
        &mut self,
        op: Op<T>,
        policy: StoragePolicy,
        inputs: &[&Tensor<T>],
        output_shape: Shape,
        output_data: Vec<T>,
        saves: impl FnOnce(&Tensor<T>) -> Vec<Saved<T>>,
    ) -> Result<Tensor<T>> {
        let rg = inputs.iter().any(|t| t.is_differentiable());
        let output = Tensor::from_vec(output_shape, output_data)?.requires_grad(rg);
        let saved = saves(&output);
        self.record(TapeNode::new(op, policy, inputs, &output, saved))?;
        Ok(output)
    }

    /// Deduplicated byte cost of everything the tape holds.
    pub fn tape_bytes(&self) -> usize {
        self.breakdown().total()
    }

    pub fn breakdown(&self) -> TapeBytes {
        let mut b = TapeBytes {
            aux: self.aux_bytes,
            ..Default::default()
        };
        for e in self.saved_registry.values() {
            if e.parameter {
                b.parameter += e.bytes;
            } else {
                b.activation += e.bytes;
            }
        }
        b
    }

    /// Whether the tape keeps a reference to tensor `id`.
    pub fn holds(&self, id: TensorId) -> bool {
        self.saved_registry.contains_key(&id)
    }

    /// Reference count of a saved full tensor.
    pub fn save_count(&self, id: TensorId) -> usize {
        self.saved_registry.get(&id).map_or(0, |e| e.refs)
    }

    /// Hands back the owner's handle to `t`. If the tape does not hold the
    /// tensor it is freed now and must have no other live handle; otherwise
    /// it is freed together with the tape.
    pub fn release(&mut self, t: Tensor<T>) -> Result<()> {
        let id = t.id();
        if !self.tensors.contains_key(&id) {
            return Err(Error::UnknownTensor(id));
        }
        if self.holds(id) {
            self.deferred.push(id);
            return Ok(());
        }
        let holders = t.buffer_handles();
        if holders != 1 {
            return Err(Error::LifetimeMismatch {
                id,
                holders: holders - 1,
            });
        }
        drop(t);
        self.ledger.free(id)?;
        Ok(())
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut MemoryLedger {
        &mut self.ledger
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: &Tensor<T>) -> Result<BackwardResult<T>> {
        let Tape {
            nodes,
            tensors,
            deferred,
            mut ledger,
            ..
        } = self;

        let info = tensors.get(&loss.id()).ok_or(Error::UnknownTensor(loss.id()))?;
        if info.shape.numel() != 1 {
            return Err(Error::LossNotScalar(loss.id()));
        }
        if !info.requires_grad {
            return Err(Error::LossNotDifferentiable(loss.id()));
        }

        let width = T::DTYPE.width();
        let mut grads: HashMap<TensorId, (Vec<T>, TensorId)> = HashMap::new();
        let seed_id = TensorId::fresh();
        ledger.alloc(seed_id, width, Category::Gradient)?;
        grads.insert(loss.id(), (vec![T::one()], seed_id));

        for node in nodes.iter().rev() {
            if !node.output_requires_grad {
                continue;
            }
            let Some((g, g_ledger)) = grads.remove(&node.output) else {
                continue;
            };
            let input_grads = crate::layers::vjp(node, &g)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((id, &rg), ig) in node.inputs.iter().zip(&node.input_requires_grad).zip(input_grads) {
                if !rg {
                    continue;
                }
                let ig = ig.ok_or(Error::InvalidConfig(format!(
                    "{} produced no gradient for a differentiable input",
                    node.op.name()
                )))?;
                match grads.get_mut(id) {
                    Some((acc, _)) => {
                        for (a, v) in acc.iter_mut().zip(&ig) {
                            *a += *v;
                        }
                    }
                    None => {
                        let gid = TensorId::fresh();
                        ledger.alloc(gid, ig.len() * width, Category::Gradient)?;
                        grads.insert(*id, (ig, gid));
                    }
                }
            }
            ledger.free(g_ledger)?;
        }

        let mut store = GradStore::default();
        let mut leaves: Vec<_> = tensors
            .iter()
            .filter(|(_, i)| i.leaf.is_some() && i.requires_grad)
            .collect();
        leaves.sort_by_key(|(id, _)| **id);
        for (id, info) in leaves {
            let data = match grads.remove(id) {
                Some((g, _)) => g,
                None => {
                    let gid = TensorId::fresh();
                    ledger.alloc(gid, info.shape.numel() * width, Category::Gradient)?;
                    vec![T::zero(); info.shape.numel()]
                }
            };
            store.grads.insert(*id, Tensor::from_vec(info.shape.clone(), data)?);
        }
        // Gradients of intermediates that never reached a leaf.
        for (_, (_, gid)) in grads {
            ledger.free(gid)?;
        }

        let mut unread = Vec::new();
        for node in &nodes {
            for s in &node.saved {
                if s.reads.get() == 0 {
                    unread.push(UnreadSave {
                        node: node.index,
                        op: node.op.name(),
                        policy: node.policy,
                        kind: s.kind,
                    });
                }
                if let Some(id) = s.ledger_id {
                    ledger.free(id)?;
                }
            }
        }
        drop(nodes);
        for id in deferred {
            ledger.free(id)?;
        }

        Ok(BackwardResult {
            grads: store,
            unread,
            ledger,
        })
    }
}
