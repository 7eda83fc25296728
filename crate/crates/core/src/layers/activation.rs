use super::{materialize, storage_rule, InputGrads, OpClass, ParentFlags};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{BitMask, Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::Tensor;

/// `max(x, 0)`. Under `Naive` the output tensor is kept; under `MemSave` a
/// bit mask of `output > 0`. A zero input gets mask bit 0 in both variants.
pub fn relu<T: Scalar>(x: &Tensor<T>, policy: StoragePolicy, tape: &mut Tape<T>) -> Result<Tensor<T>> {
    let y: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let kinds = storage_rule(
        OpClass::Relu,
        policy,
        ParentFlags::new(x.is_differentiable(), false, false),
    );
    tape.emit(Op::Relu, policy, &[x], x.shape().clone(), y, |out| {
        materialize(&kinds, |k| match k {
            SavedKind::Output => SavedData::Full(out.clone()),
            SavedKind::OutputMask => {
                let d = out.data();
                SavedData::BitMask(BitMask::from_fn(d.len(), |i| d[i] > T::zero()))
            }
            other => unreachable!("relu never saves {other}"),
        })
    })
}

pub(super) fn relu_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    if !node.needs_grad(0) {
        return Ok(vec![None]);
    }
    let dx = match node.policy {
        StoragePolicy::Naive => {
            let y = node.fetch_tensor(SavedKind::Output)?.data();
            g.iter()
                .zip(y)
                .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                .collect()
        }
        StoragePolicy::MemSave => {
            let SavedData::BitMask(mask) = node.fetch(SavedKind::OutputMask)? else {
                unreachable!("relu mask is always a BitMask")
            };
            g.iter()
                .enumerate()
                .map(|(i, &gv)| if mask.get(i) { gv } else { T::zero() })
                .collect()
        }
    };
    Ok(vec![Some(dx)])
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax<T: Scalar>(x: &Tensor<T>, policy: StoragePolicy, tape: &mut Tape<T>) -> Result<Tensor<T>> {
    let d = x.shape().last().unwrap_or(1);
    let mut y = vec![T::zero(); x.numel()];
    for (xr, yr) in x.data().chunks(d).zip(y.chunks_mut(d)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - m).exp();
            z += *yv;
        }
        yr.iter_mut().for_each(|v| *v = *v / z);
    }
    let kinds = storage_rule(
        OpClass::Softmax,
        policy,
        ParentFlags::new(x.is_differentiable(), false, false),
    );
    tape.emit(Op::Softmax, policy, &[x], x.shape().clone(), y, |out| {
        materialize(&kinds, |_| SavedData::Full(out.clone()))
    })
}

pub(super) fn softmax_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    if !node.needs_grad(0) {
        return Ok(vec![None]);
    }
    let d = node.output_shape.last().unwrap_or(1);
    let y = node.fetch_tensor(SavedKind::Output)?.data();
    let mut dx = vec![T::zero(); g.len()];
    for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
            *dv = yv * (gv - dot);
        }
    }
    Ok(vec![Some(dx)])
}
