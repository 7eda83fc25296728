use super::{bias_grad, materialize, shape_err, storage_rule, InputGrads, LayerParams, OpClass};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::{Shape, Tensor};

/// `Z = X Wᵀ + b` over the last dimension of `x`; `W` is `(out, in)`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let wd = p.weight.dims();
    if wd.len() != 2 {
        return Err(shape_err(
            "linear",
            format!("weight must be rank 2, got {}", p.weight.shape()),
        ));
    }
    let (out_f, in_f) = (wd[0], wd[1]);
    if x.shape().rank() < 2 || x.shape().last() != Some(in_f) {
        return Err(shape_err(
            "linear",
            format!("input {} does not end in {in_f} features", x.shape()),
        ));
    }
    if let Some(b) = &p.bias {
        if b.dims() != [out_f] {
            return Err(shape_err("linear", format!("bias {} for {out_f} outputs", b.shape())));
        }
    }
    let rows = x.numel() / in_f;
    let xs = x.data();
    let ws = p.weight.data();
    let mut z = vec![T::zero(); rows * out_f];
    for (r, zrow) in z.chunks_mut(out_f).enumerate() {
        let xrow = &xs[r * in_f..(r + 1) * in_f];
        for (o, zv) in zrow.iter_mut().enumerate() {
            let wrow = &ws[o * in_f..(o + 1) * in_f];
            let mut acc = p.bias.as_ref().map_or(T::zero(), |b| b.data()[o]);
            for (a, b) in xrow.iter().zip(wrow) {
                acc += *a * *b;
            }
            *zv = acc;
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = out_f;
    let kinds = storage_rule(OpClass::Linear, policy, p.flags(x));
    tape.emit(Op::Linear, policy, &p.inputs(x), Shape::new(dims)?, z, |_| {
        materialize(&kinds, |k| match k {
            SavedKind::Input => SavedData::Full(x.clone()),
            SavedKind::Weight => SavedData::Full(p.weight.clone()),
            other => unreachable!("linear never saves {other}"),
        })
    })
}

pub(super) fn vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    let wshape = node.input_shapes[1].dims();
    let (out_f, in_f) = (wshape[0], wshape[1]);
    let rows = g.len() / out_f;
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];

    if node.needs_grad(0) {
        let w = node.fetch_tensor(SavedKind::Weight)?.data();
        let mut dx = vec![T::zero(); rows * in_f];
        for r in 0..rows {
            let dxrow = &mut dx[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                let gv = g[r * out_f + o];
                for (d, wv) in dxrow.iter_mut().zip(&w[o * in_f..(o + 1) * in_f]) {
                    *d += gv * *wv;
                }
            }
        }
        grads[0] = Some(dx);
    }
    if node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?.data();
        let mut dw = vec![T::zero(); out_f * in_f];
        for r in 0..rows {
            let xrow = &x[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                let gv = g[r * out_f + o];
                for (d, xv) in dw[o * in_f..(o + 1) * in_f].iter_mut().zip(xrow) {
                    *d += gv * *xv;
                }
            }
        }
        grads[1] = Some(dw);
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        grads[2] = Some(bias_grad(g, out_f, 1));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::LeafKind;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn identity_weight_is_identity_map() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(shape(&[2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = Tensor::from_vec(shape(&[3, 3]), eye).unwrap();
        let b = Tensor::zeros(shape(&[3]));
        let p = LayerParams::new(w, Some(b));
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&p.weight, LeafKind::Parameter).unwrap();
        tape.register_leaf(p.bias.as_ref().unwrap(), LeafKind::Parameter)
            .unwrap();
        let z = linear(&x, &p, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn rank_three_input_flattens_leading_dims() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::<f32>::ones(shape(&[2, 4, 3]));
        let w = Tensor::<f32>::ones(shape(&[5, 3]));
        let p = LayerParams::new(w, None);
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&p.weight, LeafKind::Parameter).unwrap();
        let z = linear(&x, &p, StoragePolicy::MemSave, &mut tape).unwrap();
        assert_eq!(z.dims(), &[2, 4, 5]);
        assert!(z.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn rejects_feature_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::<f32>::ones(shape(&[2, 4]));
        let p = LayerParams::new(Tensor::<f32>::ones(shape(&[5, 3])), None);
        assert!(linear(&x, &p, StoragePolicy::Naive, &mut tape).is_err());
    }
}
