//! Direct-loop 2-d convolution and transpose convolution.
//!
//! Cross-correlation convention. Conv kernels are `(C_out, C_in, kH, kW)`;
//! transpose-conv kernels are `(C_in, C_out, kH, kW)`, so the same tensor
//! serves as a conv kernel and as the kernel of the matching transpose conv.

use std::ops::Range;

use super::{bias_grad, materialize, shape_err, storage_rule, InputGrads, LayerParams, OpClass};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, SavedData, SavedKind, StoragePolicy, Tape, TapeNode};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    // channels and extent on the "image" side of a conv (its input)
    c_img: usize,
    h: usize,
    w: usize,
    // channels and extent on the "feature" side (its output)
    c_feat: usize,
    ho: usize,
    wo: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
}

pub fn conv2d_output_hw(h: usize, w: usize, k: (usize, usize), stride: usize, pad: usize) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * pad < k.0 || w + 2 * pad < k.1 {
        return None;
    }
    Some(((h + 2 * pad - k.0) / stride + 1, (w + 2 * pad - k.1) / stride + 1))
}

pub fn conv_transpose2d_output_hw(
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    if stride == 0 {
        return None;
    }
    let ho = ((h - 1) * stride + k.0).checked_sub(2 * pad)?;
    let wo = ((w - 1) * stride + k.1).checked_sub(2 * pad)?;
    (ho > 0 && wo > 0).then_some((ho, wo))
}

/// Output positions `o` with `0 <= o*stride + k - pad < in_len`.
fn valid(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// feat[n, f, oh, ow] = Σ kernel[f, c, kh, kw] · img[n, c, oh·s - p + kh, ow·s - p + kw]
fn correlate<T: Scalar>(img: &[T], kernel: &[T], g: Geom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c_feat * g.ho * g.wo];
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for n in 0..g.n {
        for f in 0..g.c_feat {
            let o = &mut out[(n * g.c_feat + f) * plane_out..][..plane_out];
            for c in 0..g.c_img {
                let x = &img[(n * g.c_img + c) * plane_in..][..plane_in];
                for kh in 0..g.k_h {
                    let rows = valid(g.ho, g.h, g.stride, g.pad, kh);
                    for kw in 0..g.k_w {
                        let wv = kernel[((f * g.c_img + c) * g.k_h + kh) * g.k_w + kw];
                        let cols = valid(g.wo, g.w, g.stride, g.pad, kw);
                        for oh in rows.clone() {
                            let ih = oh * g.stride + kh - g.pad;
                            let orow = &mut o[oh * g.wo..][..g.wo];
                            let xrow = &x[ih * g.w..][..g.w];
                            for ow in cols.clone() {
                                orow[ow] += wv * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`correlate`] in the image: scatters `feat` back through the kernel.
fn scatter<T: Scalar>(feat: &[T], kernel: &[T], g: Geom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c_img * g.h * g.w];
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for n in 0..g.n {
        for f in 0..g.c_feat {
            let gf = &feat[(n * g.c_feat + f) * plane_out..][..plane_out];
            for c in 0..g.c_img {
                let dx = &mut out[(n * g.c_img + c) * plane_in..][..plane_in];
                for kh in 0..g.k_h {
                    let rows = valid(g.ho, g.h, g.stride, g.pad, kh);
                    for kw in 0..g.k_w {
                        let wv = kernel[((f * g.c_img + c) * g.k_h + kh) * g.k_w + kw];
                        let cols = valid(g.wo, g.w, g.stride, g.pad, kw);
                        for oh in rows.clone() {
                            let ih = oh * g.stride + kh - g.pad;
                            for ow in cols.clone() {
                                dx[ih * g.w + ow * g.stride + kw - g.pad] += wv * gf[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`correlate`] in the kernel.
fn kernel_grad<T: Scalar>(img: &[T], feat: &[T], g: Geom) -> Vec<T> {
    let mut dk = vec![T::zero(); g.c_feat * g.c_img * g.k_h * g.k_w];
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for n in 0..g.n {
        for f in 0..g.c_feat {
            let gf = &feat[(n * g.c_feat + f) * plane_out..][..plane_out];
            for c in 0..g.c_img {
                let x = &img[(n * g.c_img + c) * plane_in..][..plane_in];
                for kh in 0..g.k_h {
                    let rows = valid(g.ho, g.h, g.stride, g.pad, kh);
                    for kw in 0..g.k_w {
                        let cols = valid(g.wo, g.w, g.stride, g.pad, kw);
                        let mut acc = T::zero();
                        for oh in rows.clone() {
                            let ih = oh * g.stride + kh - g.pad;
                            let xrow = &x[ih * g.w..][..g.w];
                            let grow = &gf[oh * g.wo..][..g.wo];
                            for ow in cols.clone() {
                                acc += grow[ow] * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                        dk[((f * g.c_img + c) * g.k_h + kh) * g.k_w + kw] += acc;
                    }
                }
            }
        }
    }
    dk
}

/// Transpose-conv forward written as a gather over output positions, so it
/// does not share a code path with [`scatter`].
fn transpose_gather<T: Scalar>(img_side: &[T], kernel: &[T], g: Geom) -> Vec<T> {
    // `g` describes the conv whose input-adjoint this is: the transpose conv
    // maps feature-side (c_feat, ho, wo) tensors to image-side (c_img, h, w).
    let mut out = vec![T::zero(); g.n * g.c_img * g.h * g.w];
    let plane_in = g.ho * g.wo;
    let plane_out = g.h * g.w;
    let s = g.stride as isize;
    for n in 0..g.n {
        for c in 0..g.c_img {
            let o = &mut out[(n * g.c_img + c) * plane_out..][..plane_out];
            for y in 0..g.h {
                for x in 0..g.w {
                    let mut acc = T::zero();
                    for f in 0..g.c_feat {
                        let src = &img_side[(n * g.c_feat + f) * plane_in..][..plane_in];
                        let kbase = (f * g.c_img + c) * g.k_h * g.k_w;
                        for kh in 0..g.k_h {
                            let t = y as isize + g.pad as isize - kh as isize;
                            if t < 0 || t % s != 0 || (t / s) as usize >= g.ho {
                                continue;
                            }
                            let ih = (t / s) as usize;
                            for kw in 0..g.k_w {
                                let u = x as isize + g.pad as isize - kw as isize;
                                if u < 0 || u % s != 0 || (u / s) as usize >= g.wo {
                                    continue;
                                }
                                let iw = (u / s) as usize;
                                acc += kernel[kbase + kh * g.k_w + kw] * src[ih * g.wo + iw];
                            }
                        }
                    }
                    o[y * g.w + x] = acc;
                }
            }
        }
    }
    out
}

fn check_bias<T: Scalar>(op: &'static str, p: &LayerParams<T>, c_out: usize) -> Result<()> {
    match &p.bias {
        Some(b) if b.dims() != [c_out] => Err(shape_err(op, format!("bias {} for {c_out} channels", b.shape()))),
        _ => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], p: &LayerParams<T>, channels: usize, plane: usize) {
    if let Some(b) = &p.bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn rank4(op: &'static str, t: &Shape) -> Result<[usize; 4]> {
    t.dims()
        .try_into()
        .map_err(|_| shape_err(op, format!("expected rank 4, got {t}")))
}

fn conv_geom(x: &Shape, w: &Shape, stride: usize, pad: usize) -> Result<Geom> {
    if stride == 0 {
        return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
    }
    let [n, c, h, wd] = rank4("conv2d", x)?;
    let [co, ci, kh, kw] = rank4("conv2d", w)?;
    if ci != c {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels, kernel expects {ci}"),
        ));
    }
    let (ho, wo) = conv2d_output_hw(h, wd, (kh, kw), stride, pad)
        .ok_or_else(|| shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")))?;
    Ok(Geom {
        n,
        c_img: c,
        h,
        w: wd,
        c_feat: co,
        ho,
        wo,
        k_h: kh,
        k_w: kw,
        stride,
        pad,
    })
}

fn transpose_geom(x: &Shape, w: &Shape, stride: usize, pad: usize) -> Result<Geom> {
    if stride == 0 {
        return Err(Error::InvalidConfig("conv_transpose2d stride must be positive".into()));
    }
    let [n, c, h, wd] = rank4("conv_transpose2d", x)?;
    let [ci, co, kh, kw] = rank4("conv_transpose2d", w)?;
    if ci != c {
        return Err(shape_err(
            "conv_transpose2d",
            format!("input has {c} channels, kernel expects {ci}"),
        ));
    }
    let (ho, wo) = conv_transpose2d_output_hw(h, wd, (kh, kw), stride, pad)
        .ok_or_else(|| shape_err("conv_transpose2d", "padding removes the whole output"))?;
    // Described from the viewpoint of the conv it is the adjoint of.
    Ok(Geom {
        n,
        c_img: co,
        h: ho,
        w: wo,
        c_feat: c,
        ho: h,
        wo: wd,
        k_h: kh,
        k_w: kw,
        stride,
        pad,
    })
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    padding: usize,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), p.weight.shape(), stride, padding)?;
    check_bias("conv2d", p, g.c_feat)?;
    let mut out = correlate(x.data(), p.weight.data(), g);
    add_bias(&mut out, p, g.c_feat, g.ho * g.wo);
    let kinds = storage_rule(OpClass::Conv2d, policy, p.flags(x));
    let shape = Shape::new(vec![g.n, g.c_feat, g.ho, g.wo])?;
    tape.emit(Op::Conv2d { stride, padding }, policy, &p.inputs(x), shape, out, |_| {
        materialize(&kinds, |k| match k {
            SavedKind::Input => SavedData::Full(x.clone()),
            SavedKind::Weight => SavedData::Full(p.weight.clone()),
            other => unreachable!("conv2d never saves {other}"),
        })
    })
}

pub(super) fn conv2d_vjp<T: Scalar>(
    node: &TapeNode<T>,
    grad: &[T],
    stride: usize,
    pad: usize,
) -> Result<InputGrads<T>> {
    let g = conv_geom(&node.input_shapes[0], &node.input_shapes[1], stride, pad)?;
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];
    if node.needs_grad(0) {
        let w = node.fetch_tensor(SavedKind::Weight)?;
        grads[0] = Some(scatter(grad, w.data(), g));
    }
    if node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?;
        grads[1] = Some(kernel_grad(x.data(), grad, g));
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        grads[2] = Some(bias_grad(grad, g.c_feat, g.ho * g.wo));
    }
    Ok(grads)
}

pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    stride: usize,
    padding: usize,
    policy: StoragePolicy,
    tape: &mut Tape<T>,
) -> Result<Tensor<T>> {
    let g = transpose_geom(x.shape(), p.weight.shape(), stride, padding)?;
    check_bias("conv_transpose2d", p, g.c_img)?;
    let mut out = transpose_gather(x.data(), p.weight.data(), g);
    add_bias(&mut out, p, g.c_img, g.h * g.w);
    let kinds = storage_rule(OpClass::ConvTranspose2d, policy, p.flags(x));
    let shape = Shape::new(vec![g.n, g.c_img, g.h, g.w])?;
    tape.emit(
        Op::ConvTranspose2d { stride, padding },
        policy,
        &p.inputs(x),
        shape,
        out,
        |_| {
            materialize(&kinds, |k| match k {
                SavedKind::Input => SavedData::Full(x.clone()),
                SavedKind::Weight => SavedData::Full(p.weight.clone()),
                other => unreachable!("conv_transpose2d never saves {other}"),
            })
        },
    )
}

pub(super) fn conv_transpose2d_vjp<T: Scalar>(
    node: &TapeNode<T>,
    grad: &[T],
    stride: usize,
    pad: usize,
) -> Result<InputGrads<T>> {
    let g = transpose_geom(&node.input_shapes[0], &node.input_shapes[1], stride, pad)?;
    let mut grads: InputGrads<T> = vec![None; node.inputs.len()];
    if node.needs_grad(0) {
        // The adjoint of the adjoint is the conv itself.
        let w = node.fetch_tensor(SavedKind::Weight)?;
        grads[0] = Some(correlate(grad, w.data(), g));
    }
    if node.needs_grad(1) {
        let x = node.fetch_tensor(SavedKind::Input)?;
        grads[1] = Some(kernel_grad(grad, x.data(), g));
    }
    if node.inputs.len() > 2 && node.needs_grad(2) {
        grads[2] = Some(bias_grad(grad, g.c_img, g.h * g.w));
    }
    Ok(grads)
}
