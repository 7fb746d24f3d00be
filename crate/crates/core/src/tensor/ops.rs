use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from classification losses.
pub const IGNORE_LABEL: i32 = -1;

pub fn channel_concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "no inputs"))?
        .shape();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        let s = t.shape();
        for (dim, e, a) in [("n", first.n, s.n), ("h", first.h, s.h), ("w", first.w, s.w)] {
            if e != a {
                return Err(Error::shape(
                    "channel_concat",
                    format!("input {i} dimension {dim}"),
                    e,
                    a,
                ));
            }
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let out_shape = Shape::new(first.n, c, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for t in inputs {
            out.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Splits a concatenated gradient back into per-input pieces.
pub fn channel_concat_backward<T: Scalar>(shapes: &[Shape], grad_out: &[T]) -> Result<Vec<Vec<T>>> {
    let total: usize = shapes.iter().map(Shape::len).sum();
    if total != grad_out.len() {
        return Err(Error::shape(
            "channel_concat_backward",
            "grad_out length",
            total,
            grad_out.len(),
        ));
    }
    let n = shapes.first().map_or(0, |s| s.n);
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.len())).collect();
    let mut off = 0;
    for _ in 0..n {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            part.extend_from_slice(&grad_out[off..off + s.item()]);
            off += s.item();
        }
    }
    Ok(parts)
}

pub fn channel_softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.c < 2 {
        return Err(Error::shape("channel_softmax", "channels (minimum)", 2, s.c));
    }
    let p = s.plane();
    let mut out = input.data().to_vec();
    for n in 0..s.n {
        let item = &mut out[n * s.item()..(n + 1) * s.item()];
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(item[c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (item[c * p + i] - m).exp();
                item[c * p + i] = e;
                z = z + e;
            }
            for c in 0..s.c {
                item[c * p + i] = item[c * p + i] / z;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Backward through softmax given its output `probs`.
pub fn channel_softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let s = probs.shape();
    let p = s.plane();
    let y = probs.data();
    let mut g = vec![T::zero(); s.len()];
    for n in 0..s.n {
        let base = n * s.item();
        for i in 0..p {
            let mut dot = T::zero();
            for c in 0..s.c {
                let k = base + c * p + i;
                dot = dot + y[k] * grad_out[k];
            }
            for c in 0..s.c {
                let k = base + c * p + i;
                g[k] = y[k] * (grad_out[k] - dot);
            }
        }
    }
    g
}

/// Multiplies every channel of `features` pointwise by a 1-channel `map`.
pub fn elementwise_scale<T: Scalar>(features: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    check_scale_operands(features.shape(), map.shape())?;
    let s = features.shape();
    let p = s.plane();
    let mut out = features.data().to_vec();
    for n in 0..s.n {
        let m = map.item(n);
        for c in 0..s.c {
            let start = (n * s.c + c) * p;
            out[start..start + p].iter_mut().zip(m).for_each(|(v, &w)| *v = *v * w);
        }
    }
    Tensor::from_vec(s, out)
}

fn check_scale_operands(fs: Shape, ms: Shape) -> Result<()> {
    for (dim, e, a) in [
        ("map n", fs.n, ms.n),
        ("map channels", 1, ms.c),
        ("map h", fs.h, ms.h),
        ("map w", fs.w, ms.w),
    ] {
        if e != a {
            return Err(Error::shape("elementwise_scale", dim, e, a));
        }
    }
    Ok(())
}

/// Returns `(grad_features, grad_map)`.
pub fn elementwise_scale_backward<T: Scalar>(
    features: &Tensor<T>,
    map: &Tensor<T>,
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    check_scale_operands(features.shape(), map.shape())?;
    let s = features.shape();
    let p = s.plane();
    let mut gf = vec![T::zero(); s.len()];
    let mut gm = vec![T::zero(); map.shape().len()];
    let f = features.data();
    for n in 0..s.n {
        let m = map.item(n);
        let gmi = &mut gm[n * p..(n + 1) * p];
        for c in 0..s.c {
            let start = (n * s.c + c) * p;
            for i in 0..p {
                let go = grad_out[start + i];
                gf[start + i] = go * m[i];
                gmi[i] = gmi[i] + go * f[start + i];
            }
        }
    }
    Ok((gf, gm))
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resizing.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let t = pos - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    if out_shape.is_empty() {
        return Err(Error::invalid("resize_bilinear", "output size must be >= 1"));
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Vec::with_capacity(out_shape.len());
    let d = input.data();
    for nc in 0..s.n * s.c {
        let plane = &d[nc * s.plane()..(nc + 1) * s.plane()];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let v = plane[y0 * s.w + x0] * T::lit(wy0 * wx0)
                    + plane[y0 * s.w + x1] * T::lit(wy0 * wx1)
                    + plane[y1 * s.w + x0] * T::lit(wy1 * wx0)
                    + plane[y1 * s.w + x1] * T::lit(wy1 * wx1);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn resize_bilinear_backward<T: Scalar>(
    input_shape: Shape,
    out_h: usize,
    out_w: usize,
    grad_out: &[T],
) -> Result<Vec<T>> {
    let s = input_shape;
    let expect = s.n * s.c * out_h * out_w;
    if grad_out.len() != expect {
        return Err(Error::shape(
            "resize_bilinear_backward",
            "grad_out length",
            expect,
            grad_out.len(),
        ));
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut g = vec![T::zero(); s.len()];
    let mut k = 0;
    for nc in 0..s.n * s.c {
        let plane = &mut g[nc * s.plane()..(nc + 1) * s.plane()];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let go = grad_out[k];
                k += 1;
                plane[y0 * s.w + x0] = plane[y0 * s.w + x0] + go * T::lit(wy0 * wx0);
                plane[y0 * s.w + x1] = plane[y0 * s.w + x1] + go * T::lit(wy0 * wx1);
                plane[y1 * s.w + x0] = plane[y1 * s.w + x0] + go * T::lit(wy1 * wx0);
                plane[y1 * s.w + x1] = plane[y1 * s.w + x1] + go * T::lit(wy1 * wx1);
            }
        }
    }
    Ok(g)
}

/// Sum of the smooth-L1 penalty over `pred - target`.
pub fn smooth_l1<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::shape("smooth_l1", "length", pred.len(), target.len()));
    }
    Ok(pred.iter().zip(target).map(|(&p, &t)| smooth_l1_elem(p - t)).sum())
}

#[inline]
pub(crate) fn smooth_l1_elem<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

/// Derivative of the smooth-L1 penalty at `x`.
#[inline]
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

fn check_ce_operands<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i32],
    classes: usize,
    ignore_label: i32,
) -> Result<usize> {
    let s = logits.shape();
    if classes < 2 || !s.c.is_multiple_of(classes) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("{} channels do not split into groups of {classes} classes", s.c),
        ));
    }
    let groups = s.c / classes;
    let expect = s.n * groups * s.plane();
    if labels.len() != expect {
        return Err(Error::shape(
            "softmax_cross_entropy",
            "label count",
            expect,
            labels.len(),
        ));
    }
    if let Some(bad) = labels
        .iter()
        .find(|&&l| l != ignore_label && (l < 0 || l as usize >= classes))
    {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range"),
        ));
    }
    Ok(groups)
}

/// Visits every labelled position: `(label, logit offsets base, channel stride)`.
fn for_each_position(
    shape: Shape,
    groups: usize,
    classes: usize,
    labels: &[i32],
    mut f: impl FnMut(i32, usize, usize),
) {
    let p = shape.plane();
    let mut k = 0;
    for n in 0..shape.n {
        for g in 0..groups {
            let base = n * shape.item() + g * classes * p;
            for i in 0..p {
                f(labels[k], base + i, p);
                k += 1;
            }
        }
    }
}

/// Summed negative log-likelihood and the number of non-ignored positions.
///
/// `logits` has `groups * classes` channels; channel `g * classes + k` holds
/// class `k` of group `g`. `labels` is laid out `(n, groups, h, w)`.
pub fn softmax_cross_entropy_sum<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i32],
    classes: usize,
    ignore_label: i32,
) -> Result<(T, usize)> {
    let groups = check_ce_operands(logits, labels, classes, ignore_label)?;
    let d = logits.data();
    let mut total = T::zero();
    let mut count = 0;
    for_each_position(logits.shape(), groups, classes, labels, |label, base, stride| {
        if label == ignore_label {
            return;
        }
        let mut m = T::neg_infinity();
        for k in 0..classes {
            m = m.max(d[base + k * stride]);
        }
        let z: T = (0..classes).map(|k| (d[base + k * stride] - m).exp()).sum();
        total = total + (z.ln() + m - d[base + label as usize * stride]);
        count += 1;
    });
    Ok((total, count))
}

/// Mean negative log-likelihood over non-ignored positions (0 when all are ignored).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i32],
    classes: usize,
    ignore_label: i32,
) -> Result<T> {
    let (sum, count) = softmax_cross_entropy_sum(logits, labels, classes, ignore_label)?;
    Ok(if count == 0 {
        T::zero()
    } else {
        sum / T::lit(count as f64)
    })
}

/// Gradient of `scale * sum_nll` with respect to the logits; ignored positions get exactly zero.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[i32],
    classes: usize,
    ignore_label: i32,
    scale: T,
) -> Result<Vec<T>> {
    let groups = check_ce_operands(logits, labels, classes, ignore_label)?;
    let d = logits.data();
    let mut g = vec![T::zero(); d.len()];
    for_each_position(logits.shape(), groups, classes, labels, |label, base, stride| {
        if label == ignore_label {
            return;
        }
        let mut m = T::neg_infinity();
        for k in 0..classes {
            m = m.max(d[base + k * stride]);
        }
        let z: T = (0..classes).map(|k| (d[base + k * stride] - m).exp()).sum();
        for k in 0..classes {
            let p = (d[base + k * stride] - m).exp() / z;
            let t = if k as i32 == label { T::one() } else { T::zero() };
            g[base + k * stride] = scale * (p - t);
        }
    });
    Ok(g)
}
