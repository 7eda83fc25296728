use super::{materialize, shape_err, storage_rule, InputGrads, OpClass, ParentFlags};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::{Shape, Tensor};

pub fn maxpool2d_output_hw(h: usize, w: usize, window: usize, stride: usize) -> Option<(usize, usize)> {
    if window == 0 || stride == 0 || window > h || window > w {
        return None;
    }
    Some(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Max over `window × window` patches; trailing rows and columns that do
/// not fill a window are dropped. Ties resolve to the first position in
/// row-major order.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let (y, idx, shape) = pool_forward(x, window, stride)?;
    let kinds = storage_rule(
        OpClass::MaxPool2d,
        policy,
        ParentFlags::new(x.is_differentiable(), false, false),
    );
    tape.emit(Op::MaxPool2d { window, stride }, policy, &[x], shape, y, |_| {
        let mut idx = Some(idx);
        materialize(&kinds, |_| SavedData::IndexMap(idx.take().expect("one index map")))
    })
}

/// Pooled values, flat in-plane argmax per output element, output shape.
pub(crate) fn pool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<u32>, Shape)> {
    let [n, c, h, w]: [usize; 4] = x
        .dims()
        .try_into()
        .map_err(|_| shape_err("maxpool2d", format!("expected rank 4, got {}", x.shape())))?;
    let (ho, wo) = maxpool2d_output_hw(h, w, window, stride)
        .ok_or_else(|| Error::InvalidConfig(format!("maxpool window {window} stride {stride} on {h}x{w}")))?;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = oh * stride * w + ow * stride;
                for kh in 0..window {
                    for kw in 0..window {
                        let i = (oh * stride + kh) * w + ow * stride + kw;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                }
                y.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((y, idx, Shape::new(vec![n, c, ho, wo])?))
}

pub(super) fn vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    if !node.needs_grad(0) {
        return Ok(vec![None]);
    }
    let SavedData::IndexMap(idx) = node.fetch(SavedKind::ArgmaxIndices)? else {
        unreachable!("argmax indices are an IndexMap")
    };
    let d = node.input_shapes[0].dims();
    let plane_in = d[2] * d[3];
    let o = node.output_shape.dims();
    let plane_out = o[2] * o[3];
    let mut dx = vec![T::zero(); node.input_shapes[0].numel()];
    for (p, (gp, ip)) in g.chunks(plane_out).zip(idx.chunks(plane_out)).enumerate() {
        let base = p * plane_in;
        for (&gv, &i) in gp.iter().zip(ip) {
            dx[base + i as usize] += gv;
        }
    }
    Ok(vec![Some(dx)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::LeafKind;

    fn saved_indices(tape: &Tape<f64>) -> Vec<u32> {
        match &tape.nodes()[0].saved[0].data {
            SavedData::IndexMap(v) => v.clone(),
            _ => panic!("expected index map"),
        }
    }

    #[test]
    fn picks_max_and_records_index() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(Shape::new(vec![1, 1, 2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .requires_grad(true);
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        let y = maxpool2d(&x, 2, 2, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(saved_indices(&tape), [3]); // row 1, col 1
        assert_eq!(tape.tape_bytes(), 4);
    }

    #[test]
    fn ties_break_to_first_occurrence() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(Shape::new(vec![1, 1, 4, 4]).unwrap(), 1.0).requires_grad(true);
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        maxpool2d(&x, 2, 2, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(saved_indices(&tape), [0, 2, 8, 10]);
    }

    #[test]
    fn truncates_partial_windows() {
        assert_eq!(maxpool2d_output_hw(5, 5, 2, 2), Some((2, 2)));
        assert_eq!(maxpool2d_output_hw(3, 3, 4, 1), None);
        let mut tape = Tape::<f32>::new();
        let x = Tensor::<f32>::ones(Shape::new(vec![1, 1, 3, 3]).unwrap());
        assert!(matches!(
            maxpool2d(&x, 0, 1, StoragePolicy::Naive, &mut tape),
            Err(Error::InvalidConfig(_))
        ));
    }
}
