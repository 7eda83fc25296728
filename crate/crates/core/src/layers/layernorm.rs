use super::{materialize, shape_err, storage_rule, InputGrads, LayerParams, OpClass};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::Tensor;

/// Normalizes over the last dimension, then applies per-feature scale and
/// shift. Keeps `X` plus per-row mean and inverse std for backward.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    eps: f64,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let d = x.shape().last().unwrap_or(1);
    if x.shape().rank() == 0 || p.weight.dims() != [d] || p.bias.as_ref().is_some_and(|b| b.dims() != [d]) {
        return Err(shape_err(
            "layernorm",
            format!("input {} with weight {}", x.shape(), p.weight.shape()),
        ));
    }
    let rows = x.numel() / d;
    let df = T::lit(d as f64);
    let eps = T::lit(eps);
    let gamma = p.weight.data();
    let beta = p.bias.as_ref().map(|b| b.data());
    let mut mean = Vec::with_capacity(rows);
    let mut inv = Vec::with_capacity(rows);
    let mut y = vec![T::zero(); x.numel()];
    for (xr, yr) in x.data().chunks(d).zip(y.chunks_mut(d)) {
        let mu = xr.iter().copied().sum::<T>() / df;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
        let is = T::one() / (var + eps).sqrt();
        for (j, (yv, &xv)) in yr.iter_mut().zip(xr).enumerate() {
            *yv = (xv - mu) * is * gamma[j] + beta.map_or(T::zero(), |b| b[j]);
        }
        mean.push(mu);
        inv.push(is);
    }
    let kinds = storage_rule(OpClass::LayerNorm, policy, p.flags(x));
    tape.emit(Op::LayerNorm, policy, &p.inputs(x), x.shape().clone(), y, |_| {
        materialize(&kinds, |k| match k {
            SavedKind::Input => SavedData::Full(x.clone()),
            SavedKind::Weight => SavedData::Full(p.weight.clone()),
            SavedKind::NormStats => SavedData::Stats(mean.iter().chain(&inv).copied().collect()),
            other => unreachable!("layernorm never saves {other}"),
        })
    })
}

pub(super) fn vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    let d = node.input_shapes[0].last().unwrap_or(1);
    let rows = g.len() / d;
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];
    if node.needs_grad(0) || node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?.data();
        let stats = match node.fetch(SavedKind::NormStats)? {
            SavedData::Stats(s) => s,
            _ => unreachable!("norm stats are always Stats"),
        };
        let (mean, inv) = stats.split_at(rows);
        if node.needs_grad(0) {
            let gamma = node.fetch_tensor(SavedKind::Weight)?.data();
            let df = T::lit(d as f64);
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let xr = &x[r * d..][..d];
                let gr = &g[r * d..][..d];
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    sg += gh;
                    sgx += gh * (xr[j] - mean[r]) * inv[r];
                }
                for j in 0..d {
                    let xhat = (xr[j] - mean[r]) * inv[r];
                    dx[r * d + j] = inv[r] / df * (df * gr[j] * gamma[j] - sg - xhat * sgx);
                }
            }
            grads[0] = Some(dx);
        }
        if node.needs_grad(1) {
            let mut dw = vec![T::zero(); d];
            for r in 0..rows {
                for j in 0..d {
                    dw[j] += g[r * d + j] * (x[r * d + j] - mean[r]) * inv[r];
                }
            }
            grads[1] = Some(dw);
        }
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        let mut db = vec![T::zero(); d];
        for gr in g.chunks(d) {
            for (b, &v) in db.iter_mut().zip(gr) {
                *b += v;
            }
        }
        grads[2] = Some(db);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::LeafKind;
    use crate::tensor::Shape;

    #[test]
    fn constant_row_normalizes_to_bias() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(Shape::new(vec![2, 4]).unwrap(), 3.0);
        let p = LayerParams::new(
            Tensor::full(Shape::new(vec![4]).unwrap(), 2.0),
            Some(Tensor::full(Shape::new(vec![4]).unwrap(), 0.25)),
        );
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&p.weight, LeafKind::Parameter).unwrap();
        tape.register_leaf(p.bias.as_ref().unwrap(), LeafKind::Parameter)
            .unwrap();
        let y = layernorm(&x, &p, 1e-5, StoragePolicy::Naive, &mut tape).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn norm_scenario_still_keeps_input() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::ones(Shape::new(vec![2, 4]).unwrap());
        let p = LayerParams::new(
            Tensor::ones(Shape::new(vec![4]).unwrap()).requires_grad(true),
            Some(Tensor::zeros(Shape::new(vec![4]).unwrap()).requires_grad(true)),
        );
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&p.weight, LeafKind::Parameter).unwrap();
        tape.register_leaf(p.bias.as_ref().unwrap(), LeafKind::Parameter)
            .unwrap();
        layernorm(&x, &p, 1e-5, StoragePolicy::MemSave, &mut tape).unwrap();
        assert_eq!(tape.nodes()[0].saved_kinds(), [SavedKind::Input, SavedKind::NormStats]);
    }
}
