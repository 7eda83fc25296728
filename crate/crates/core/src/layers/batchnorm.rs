use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{bias_grad, materialize, shape_err, storage_rule, InputGrads, LayerParams, OpClass};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer. Module state, never tape state.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BatchNormMode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, eps: f64, mode: BatchNormMode) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum: 0.1,
            mode,
        }
    }

    fn inv_std(&self) -> Result<Vec<T>> {
        self.running_var
            .iter()
            .map(|&v| {
                let d = v.as_f64() + self.eps;
                if d > 0.0 {
                    Ok(T::lit(1.0 / d.sqrt()))
                } else {
                    Err(Error::InvalidConfig("running variance + eps must be positive".into()))
                }
            })
            .collect()
    }
}

/// Channels, elements per channel per sample.
fn geometry<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, s: &BatchNormState<T>) -> Result<(usize, usize, usize)> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(shape_err("batchnorm2d", format!("expected rank 4, got {}", x.shape())));
    }
    let c = d[1];
    let bias_ok = p.bias.as_ref().is_none_or(|b| b.dims() == [c]);
    if p.weight.dims() != [c] || !bias_ok || s.running_mean.len() != c || s.running_var.len() != c {
        return Err(Error::InvalidConfig(format!(
            "batchnorm2d channel counts disagree with input {}",
            x.shape()
        )));
    }
    Ok((d[0], c, d[2] * d[3]))
}

pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    state: &mut BatchNormState<T>,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let (n, c, plane) = geometry(x, p, state)?;
    let xs = x.data();
    let gamma = p.weight.data();
    let beta = p.bias.as_ref().map(|b| b.data());
    let mut y = vec![T::zero(); xs.len()];

    match state.mode {
        BatchNormMode::Train => {
            let m = n * plane;
            let mf = T::lit(m as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, chunk) in xs.chunks(plane).enumerate() {
                mean[i % c] += chunk.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|v| *v = *v / mf);
            for (i, chunk) in xs.chunks(plane).enumerate() {
                let mu = mean[i % c];
                var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            let eps = T::lit(state.eps);
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            for (i, (yc, xc)) in y.chunks_mut(plane).zip(xs.chunks(plane)).enumerate() {
                let ch = i % c;
                let b = beta.map_or(T::zero(), |b| b[ch]);
                for (yv, &xv) in yc.iter_mut().zip(xc) {
                    *yv = gamma[ch] * (xv - mean[ch]) * inv[ch] + b;
                }
            }
            let mom = T::lit(state.momentum);
            let unbias = if m > 1 {
                T::lit(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            let kinds = storage_rule(OpClass::BatchNormTrain, policy, p.flags(x));
            tape.emit(Op::BatchNormTrain, policy, &p.inputs(x), x.shape().clone(), y, |_| {
                materialize(&kinds, |k| match k {
                    SavedKind::Input => SavedData::Full(x.clone()),
                    SavedKind::Weight => SavedData::Full(p.weight.clone()),
                    SavedKind::NormStats => SavedData::Stats(mean.iter().chain(&inv).copied().collect()),
                    other => unreachable!("batchnorm2d never saves {other}"),
                })
            })
        }
        BatchNormMode::Eval => {
            let inv = state.inv_std()?;
            let mean = &state.running_mean;
            for (i, (yc, xc)) in y.chunks_mut(plane).zip(xs.chunks(plane)).enumerate() {
                let ch = i % c;
                let b = beta.map_or(T::zero(), |b| b[ch]);
                for (yv, &xv) in yc.iter_mut().zip(xc) {
                    *yv = gamma[ch] * (xv - mean[ch]) * inv[ch] + b;
                }
            }
            let kinds = storage_rule(OpClass::BatchNormEval, policy, p.flags(x));
            let op = Op::BatchNormEval {
                mean: Arc::from(mean.as_slice()),
                inv_std: Arc::from(inv),
            };
            tape.emit(op, policy, &p.inputs(x), x.shape().clone(), y, |_| {
                materialize(&kinds, |k| match k {
                    SavedKind::Input => SavedData::Full(x.clone()),
                    SavedKind::Weight => SavedData::Full(p.weight.clone()),
                    other => unreachable!("batchnorm2d eval never saves {other}"),
                })
            })
        }
    }
}

fn dims(node: &TapeNode<impl Scalar>) -> (usize, usize, usize) {
    let d = node.input_shapes[0].dims();
    (d[0], d[1], d[2] * d[3])
}

pub(super) fn train_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T]) -> Result<InputGrads<T>> {
    let (n, c, plane) = dims(node);
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];
    if node.needs_grad(0) || node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?.data();
        let stats = match node.fetch(SavedKind::NormStats)? {
            SavedData::Stats(s) => s,
            _ => unreachable!("norm stats are always Stats"),
        };
        let (mean, inv) = stats.split_at(c);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (gc, xc)) in g.chunks(plane).zip(x.chunks(plane)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in gc.iter().zip(xc) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * (xv - mean[ch]) * inv[ch];
            }
        }
        if node.needs_grad(0) {
            let gamma = node.fetch_tensor(SavedKind::Weight)?.data();
            let m = T::lit((n * plane) as f64);
            let mut dx = vec![T::zero(); x.len()];
            for (i, ((dc, gc), xc)) in dx
                .chunks_mut(plane)
                .zip(g.chunks(plane))
                .zip(x.chunks(plane))
                .enumerate()
            {
                let ch = i % c;
                let scale = gamma[ch] * inv[ch] / m;
                for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                    let xhat = (xv - mean[ch]) * inv[ch];
                    *d = scale * (m * gv - sum_g[ch] - xhat * sum_gx[ch]);
                }
            }
            grads[0] = Some(dx);
        }
        if node.needs_grad(1) {
            grads[1] = Some(sum_gx);
        }
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        grads[2] = Some(bias_grad(g, c, plane));
    }
    Ok(grads)
}

pub(super) fn eval_vjp<T: Scalar>(node: &TapeNode<T>, g: &[T], mean: &[T], inv: &[T]) -> Result<InputGrads<T>> {
    let (_, c, plane) = dims(node);
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];
    if node.needs_grad(0) {
        let gamma = node.fetch_tensor(SavedKind::Weight)?.data();
        let mut dx = vec![T::zero(); g.len()];
        for (i, (dc, gc)) in dx.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
            let s = gamma[i % c] * inv[i % c];
            for (d, &gv) in dc.iter_mut().zip(gc) {
                *d = gv * s;
            }
        }
        grads[0] = Some(dx);
    }
    if node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?.data();
        let mut dw = vec![T::zero(); c];
        for (i, (gc, xc)) in g.chunks(plane).zip(x.chunks(plane)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in gc.iter().zip(xc) {
                dw[ch] += gv * (xv - mean[ch]) * inv[ch];
            }
        }
        grads[1] = Some(dw);
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        grads[2] = Some(bias_grad(g, c, plane));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::LeafKind;
    use crate::tensor::Shape;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    fn setup(x: Tensor<f64>, x_rg: bool, w_rg: bool) -> (Tape<f64>, Tensor<f64>, LayerParams<f64>) {
        let c = x.dims()[1];
        let mut tape = Tape::new();
        let x = x.requires_grad(x_rg);
        let p = LayerParams::new(
            Tensor::ones(shape(&[c])).requires_grad(w_rg),
            Some(Tensor::zeros(shape(&[c])).requires_grad(w_rg)),
        );
        tape.register_leaf(&x, LeafKind::Input).unwrap();
        tape.register_leaf(&p.weight, LeafKind::Parameter).unwrap();
        tape.register_leaf(p.bias.as_ref().unwrap(), LeafKind::Parameter)
            .unwrap();
        (tape, x, p)
    }

    #[test]
    fn eval_identity_normalization() {
        let x = Tensor::randn(shape(&[2, 3, 2, 2]), &mut Rng::new(4));
        let (mut tape, x, p) = setup(x, false, false);
        let mut st = BatchNormState::new(3, 0.0, BatchNormMode::Eval);
        let y = batchnorm2d(&x, &p, &mut st, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn eval_input_scenario_saves_nothing_large() {
        let x = Tensor::randn(shape(&[2, 3, 4, 4]), &mut Rng::new(5));
        let (mut tape, x, p) = setup(x, true, false);
        let mut st = BatchNormState::new(3, 1e-5, BatchNormMode::Eval);
        batchnorm2d(&x, &p, &mut st, StoragePolicy::MemSave, &mut tape).unwrap();
        assert_eq!(tape.nodes()[0].saved_kinds(), [SavedKind::Weight]);
        assert_eq!(tape.breakdown().activation, 0);

        let (mut tape, x, p) = setup(x.clone().requires_grad(true), true, false);
        batchnorm2d(&x, &p, &mut st, StoragePolicy::Naive, &mut tape).unwrap();
        assert_eq!(tape.nodes()[0].saved_kinds(), [SavedKind::Input, SavedKind::Weight]);
        assert_eq!(tape.breakdown().activation, x.byte_size());
    }

    #[test]
    fn train_normalizes_and_updates_running_stats() {
        let x = Tensor::randn(shape(&[4, 2, 3, 3]), &mut Rng::new(6));
        let (mut tape, x, p) = setup(x, false, false);
        let mut st = BatchNormState::new(2, 1e-5, BatchNormMode::Train);
        let y = batchnorm2d(&x, &p, &mut st, StoragePolicy::Naive, &mut tape).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y
                .data()
                .chunks(9)
                .enumerate()
                .filter(|(i, _)| i % 2 == ch)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
        assert!(st.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn channel_mismatch_is_invalid_config() {
        let x = Tensor::<f64>::ones(shape(&[1, 3, 2, 2]));
        let mut tape = Tape::new();
        let p = LayerParams::new(Tensor::ones(shape(&[2])), None);
        let mut st = BatchNormState::new(2, 1e-5, BatchNormMode::Eval);
        assert!(matches!(
            batchnorm2d(&x, &p, &mut st, StoragePolicy::Naive, &mut tape),
            Err(Error::InvalidConfig(_))
        ));
    }
}
