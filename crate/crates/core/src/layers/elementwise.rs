//! Residual addition, the weighted-loss product, reduction and batched
//! matrix products.

use super::{materialize, shape_err, storage_rule, InputGrads, OpClass, ParentFlags};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::{self, Shape, Tensor};

fn two_flags<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> ParentFlags {
    ParentFlags::new(a.is_differentiable(), b.is_differentiable(), false)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tape: &mut Tape<T>) -> Result<Tensor<T>> {
    let out = tensor::add(a, b)?;
    tape.emit(
        Op::Add,
        StoragePolicy::Naive,
        &[a, b],
        a.shape().clone(),
        out.to_vec(),
        |_| Vec::new(),
    )
}

pub(super) fn add_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    Ok((0..2).map(|i| node.needs_grad(i).then(|| g.to_vec())).collect())
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, tape: &mut Tape<T>) -> Result<Tensor<T>> {
    let out = tensor::mul(a, b)?;
    let kinds = storage_rule(OpClass::Mul, StoragePolicy::Naive, two_flags(a, b));
    tape.emit(
        Op::Mul,
        StoragePolicy::Naive,
        &[a, b],
        a.shape().clone(),
        out.to_vec(),
        |_| {
            materialize(&kinds, |k| match k {
                SavedKind::Lhs => SavedData::Full(a.clone()),
                SavedKind::Rhs => SavedData::Full(b.clone()),
                other => unreachable!("mul never saves {other}"),
            })
        },
    )
}

pub(super) fn mul_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    let mut grads: InputGrads<T> = vec![None, None];
    if node.needs_grad(0) {
        let b = node.fetch_tensor(SavedKind::Rhs)?.data();
        grads[0] = Some(g.iter().zip(b).map(|(&x, &y)| x * y).collect());
    }
    if node.needs_grad(1) {
        let a = node.fetch_tensor(SavedKind::Lhs)?.data();
        grads[1] = Some(g.iter().zip(a).map(|(&x, &y)| x * y).collect());
    }
    Ok(grads)
}

pub fn sum<T: Scalar>(a: &Tensor<T>, tape: &mut Tape<T>) -> Result<Tensor<T>> {
    let s = tensor::sum(a).item();
    tape.emit(Op::Sum, StoragePolicy::Naive, &[a], Shape::scalar(), vec![s], |_| {
        Vec::new()
    })
}

pub(super) fn sum_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    Ok(vec![node
        .needs_grad(0)
        .then(|| vec![g[0]; node.input_shapes[0].numel()])])
}

/// Batched `scale · A·B` (or `scale · A·Bᵀ`) over rank-3 operands.
pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_rhs: bool,
    scale: f64,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let (batch, m, k, n) = mm_dims(a.shape(), b.shape(), transpose_rhs)?;
    let s = T::lit(scale);
    let (ad, bd) = (a.data(), b.data());
    let mut z = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a = &ad[bi * m * k..][..m * k];
        let b = &bd[bi * k * n..][..k * n];
        let z = &mut z[bi * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for l in 0..k {
                    let bv = if transpose_rhs { b[j * k + l] } else { b[l * n + j] };
                    acc += a[i * k + l] * bv;
                }
                z[i * n + j] = s * acc;
            }
        }
    }
    let kinds = storage_rule(OpClass::Matmul, policy, two_flags(a, b));
    let shape = Shape::new(vec![batch, m, n])?;
    tape.emit(Op::Matmul { transpose_rhs, scale }, policy, &[a, b], shape, z, |_| {
        materialize(&kinds, |kind| match kind {
            SavedKind::Lhs => SavedData::Full(a.clone()),
            SavedKind::Rhs => SavedData::Full(b.clone()),
            other => unreachable!("matmul never saves {other}"),
        })
    })
}

fn mm_dims(a: &Shape, b: &Shape, transpose_rhs: bool) -> Result<(usize, usize, usize, usize)> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
        return Err(shape_err("matmul", format!("{a} x {b}")));
    }
    let (kb, n) = if transpose_rhs { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
    if ad[2] != kb {
        return Err(shape_err("matmul", format!("inner dims {a} x {b}")));
    }
    Ok((ad[0], ad[1], ad[2], n))
}

pub(super) fn matmul_vjp<T: Scalar>(
    node: &TapeNode<T>,
    g: &[T],
    transpose_rhs: bool,
    scale: f64,
) -> Result<InputGrads<T>> {
    let (batch, m, k, n) = mm_dims(&node.input_shapes[0], &node.input_shapes[1], transpose_rhs)?;
    let s = T::lit(scale);
    let mut grads: InputGrads<T> = vec![None, None];
    if node.needs_grad(0) {
        // dA = s · G · Bᵀ   (or s · G · B when B was transposed)
        let bd = node.fetch_tensor(SavedKind::Rhs)?.data();
        let mut da = vec![T::zero(); batch * m * k];
        for bi in 0..batch {
            let b = &bd[bi * k * n..][..k * n];
            let gz = &g[bi * m * n..][..m * n];
            let da = &mut da[bi * m * k..][..m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        let bv = if transpose_rhs { b[j * k + l] } else { b[l * n + j] };
                        acc += gz[i * n + j] * bv;
                    }
                    da[i * k + l] = s * acc;
                }
            }
        }
        grads[0] = Some(da);
    }
    if node.needs_grad(1) {
        // dB = s · Aᵀ · G   (or s · Gᵀ · A when B was transposed)
        let ad = node.fetch_tensor(SavedKind::Lhs)?.data();
        let mut db = vec![T::zero(); batch * k * n];
        for bi in 0..batch {
            let a = &ad[bi * m * k..][..m * k];
            let gz = &g[bi * m * n..][..m * n];
            let db = &mut db[bi * k * n..][..k * n];
            for l in 0..k {
                for j in 0..n {
                    let mut acc = T::zero();
                    for i in 0..m {
                        acc += a[i * k + l] * gz[i * n + j];
                    }
                    let slot = if transpose_rhs { j * k + l } else { l * n + j };
                    db[slot] = s * acc;
                }
            }
        }
        grads[1] = Some(db);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::LeafKind;

    #[test]
    fn matmul_small_example() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::from_vec(Shape::new(vec![1, 2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(Shape::new(vec![1, 2, 2]).unwrap(), vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        tape.register_leaf(&a, LeafKind::Input).unwrap();
        tape.register_leaf(&b, LeafKind::Input).unwrap();
        let z = matmul(&a, &b, false, 1.0, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(z.data(), &[19.0, 22.0, 43.0, 50.0]);
        let zt = matmul(&a, &b, true, 0.5, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(zt.data(), &[8.5, 11.5, 19.5, 26.5]);
    }

    #[test]
    fn add_saves_nothing() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::<f32>::ones(Shape::new(vec![4]).unwrap()).requires_grad(true);
        let b = Tensor::<f32>::ones(Shape::new(vec![4]).unwrap()).requires_grad(true);
        tape.register_leaf(&a, LeafKind::Input).unwrap();
        tape.register_leaf(&b, LeafKind::Input).unwrap();
        let c = add(&a, &b, &mut tape).unwrap();
        assert_eq!(c.data(), &[2.0; 4]);
        assert_eq!(tape.tape_bytes(), 0);
    }
}
