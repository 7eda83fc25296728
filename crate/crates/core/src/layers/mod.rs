//! Layer forwards, their vector-Jacobian products, and the storage rules
//! that decide what each forward leaves on the tape.

mod activation;
mod batchnorm;
mod conv;
mod convert;
mod dropout;
mod elementwise;
mod layernorm;
mod linear;
pub(crate) mod pool;
pub mod rules;

pub use activation::{relu, softmax};
pub use batchnorm::{batchnorm2d, BatchNormMode, BatchNormState};
pub use conv::{conv2d, conv2d_output_hw, conv_transpose2d, conv_transpose2d_output_hw};
pub use convert::{convert_network, parse_layer_filter};
pub use dropout::{dropout, dropout_mask, DropoutConfig, DropoutVariant};
pub use elementwise::{add, matmul, mul, sum};
pub use layernorm::layernorm;
pub use linear::linear;
pub use pool::{maxpool2d, maxpool2d_output_hw};
pub use rules::{storage_rule, OpClass, ParentFlags};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Saved, SavedData, SavedKind, TapeNode};
use crate::tensor::Tensor;

/// Weight and optional bias of a parameterized layer. Differentiability is
/// carried by the tensors themselves.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        Self { weight, bias }
    }

    pub fn weight_requires_grad(&self) -> bool {
        self.weight.is_differentiable()
    }

    pub fn bias_requires_grad(&self) -> bool {
        self.bias.as_ref().is_some_and(|b| b.is_differentiable())
    }

    pub(crate) fn flags(&self, x: &Tensor<T>) -> ParentFlags {
        ParentFlags::new(
            x.is_differentiable(),
            self.weight_requires_grad(),
            self.bias_requires_grad(),
        )
    }

    pub(crate) fn inputs<'a>(&'a self, x: &'a Tensor<T>) -> Vec<&'a Tensor<T>> {
        let mut v = vec![x, &self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Wraps each selected kind into a tape entry.
pub(crate) fn materialize<T: Scalar>(
    kinds: &[SavedKind],
    mut f: impl FnMut(SavedKind) -> SavedData<T>,
) -> Vec<Saved<T>> {
    kinds.iter().map(|&k| Saved::new(k, f(k))).collect()
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Per-input gradients of one node; `None` where the input needs none.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

pub(crate) fn vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    match &node.op {
        Op::Linear => linear::vjp(node, g),
        Op::Conv2d { stride, padding } => conv::conv2d_vjp(node, g, *stride, *padding),
        Op::ConvTranspose2d { stride, padding } => conv::conv_transpose2d_vjp(node, g, *stride, *padding),
        Op::BatchNormTrain => batchnorm::train_vjp(node, g),
        Op::BatchNormEval { mean, inv_std } => batchnorm::eval_vjp(node, g, mean, inv_std),
        Op::LayerNorm => layernorm::vjp(node, g),
        Op::Relu => activation::relu_vjp(node, g),
        Op::Softmax => activation::softmax_vjp(node, g),
        Op::Dropout { p } => dropout::vjp(node, g, *p),
        Op::MaxPool2d { .. } => pool::vjp(node, g),
        Op::Add => elementwise::add_vjp(node, g),
        Op::Mul => elementwise::mul_vjp(node, g),
        Op::Sum => elementwise::sum_vjp(node, g),
        Op::Matmul { transpose_rhs, scale } => elementwise::matmul_vjp(node, g, *transpose_rhs, *scale),
    }
}

/// Σ over the leading dimensions for a bias of length `n`.
pub(crate) fn bias_grad<T: Scalar>(g: &[T], n: usize, inner: usize) -> Vec<T> {
    let mut db = vec![T::zero(); n];
    for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
        let c = chunk_idx % n;
        db[c] += chunk.iter().copied().sum::<T>();
    }
    db
}
