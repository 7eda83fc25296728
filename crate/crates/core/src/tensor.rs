//! Dense, immutable, row-major tensors.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{Dtype, Scalar};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-wide unique tensor identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(u64);

impl TensorId {
    pub fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    /// A rank-0 shape is allowed and has one element.
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        if self.0.len() == 1 {
            f.write_str(",")?;
        }
        f.write_str(")")
    }
}

/// Bytes occupied by `numel` elements of `dtype`.
pub fn bytes_for(numel: usize, dtype: Dtype) -> usize {
    numel * dtype.width()
}

/// An immutable dense buffer with a differentiability flag.
///
/// Cloning shares the buffer; the strong count of that buffer is what the
/// memory model checks when a tensor is released.
#[derive(Clone)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Shape,
    data: Arc<[T]>,
    requires_grad: bool,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<T>())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::BufferLength { len: data.len(), shape });
        }
        Ok(Self {
            id: TensorId::fresh(),
            shape,
            data: data.into(),
            requires_grad: false,
        })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let data = vec![value; shape.numel()];
        Self::from_vec(shape, data).expect("length matches by construction")
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn(shape: Shape, rng: &mut Rng) -> Self {
        let data = (0..shape.numel()).map(|_| T::lit(rng.normal())).collect();
        Self::from_vec(shape, data).expect("length matches by construction")
    }

    /// Builder-style differentiability flag; only meaningful before the
    /// tensor is registered on a tape.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn is_differentiable(&self) -> bool {
        self.requires_grad
    }

    pub fn byte_size(&self) -> usize {
        bytes_for(self.numel(), T::DTYPE)
    }

    /// Number of live handles to the underlying buffer.
    pub fn buffer_handles(&self) -> usize {
        Arc::strong_count(&self.data)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }
}

/// `byte_size` as a free function, for symmetry with the planner.
pub fn byte_size<T: Scalar>(t: &Tensor<T>) -> usize {
    t.byte_size()
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{} vs {}", a.shape, b.shape),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape.clone(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape.clone(), data)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_vec(a.shape.clone(), data).expect("same length")
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data().iter().copied().sum())
}
