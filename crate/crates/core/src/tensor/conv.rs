use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. Padding is zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1, no dilation, padding that preserves spatial size for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            stride: (1, 1),
            pad: (kh / 2, kw / 2),
            dilation: (1, 1),
            in_channels,
            out_channels,
        }
    }

    /// Size-preserving dilated convolution (odd kernels).
    pub fn dilated_same(in_channels: usize, out_channels: usize, kh: usize, kw: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel: (kh, kw),
            stride: (1, 1),
            pad: (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
            dilation: (dilation, dilation),
            in_channels,
            out_channels,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("conv2d", format!("illegal spec {self:?}")))
        }
    }

    /// `floor((H + 2p - d(k-1) - 1) / s) + 1` per axis; errors when the result would be < 1.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize, name: &str| -> Result<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            if padded < span {
                return Err(Error::invalid(
                    "conv2d",
                    format!("zero-size output along {name}: padded extent {padded} < receptive span {span}"),
                ));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.pad.0, self.dilation.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.pad.1, self.dilation.1, "width")?,
        ))
    }
}

/// Image <-> column-matrix mapping. `img` is the padded-over plane, `grid`
/// the set of kernel placements.
#[derive(Debug, Clone, Copy)]
struct Lowering {
    img_h: usize,
    img_w: usize,
    grid_h: usize,
    grid_w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
}

impl Lowering {
    fn from_conv(spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Lowering {
            img_h: h,
            img_w: w,
            grid_h: oh,
            grid_w: ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.pad.0,
            pw: spec.pad.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
        }
    }

    fn grid(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Fills `cols` (`channels*kh*kw` rows by `grid` columns).
    fn im2col<T: Scalar>(&self, img: &[T], channels: usize, cols: &mut [T]) {
        let g = self.grid();
        let mut row = 0;
        for c in 0..channels {
            let plane = &img[c * self.img_h * self.img_w..(c + 1) * self.img_h * self.img_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * g..(row + 1) * g];
                    for oy in 0..self.grid_h {
                        let iy = (oy * self.sh + ky * self.dh) as isize - self.ph as isize;
                        let out_row = &mut dst[oy * self.grid_w..(oy + 1) * self.grid_w];
                        if iy < 0 || iy >= self.img_h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.img_w..(iy as usize + 1) * self.img_w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kx * self.dw) as isize - self.pw as isize;
                            *v = if ix < 0 || ix >= self.img_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Lowering::im2col`]: scatters-adds columns back into `img`.
    fn col2im<T: Scalar>(&self, cols: &[T], channels: usize, img: &mut [T]) {
        let g = self.grid();
        let mut row = 0;
        for c in 0..channels {
            let plane = &mut img[c * self.img_h * self.img_w..(c + 1) * self.img_h * self.img_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * g..(row + 1) * g];
                    for oy in 0..self.grid_h {
                        let iy = (oy * self.sh + ky * self.dh) as isize - self.ph as isize;
                        if iy < 0 || iy >= self.img_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.img_w..(iy as usize + 1) * self.img_w];
                        let src_row = &src[oy * self.grid_w..(oy + 1) * self.grid_w];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * self.sw + kx * self.dw) as isize - self.pw as isize;
                            if ix >= 0 && ix < self.img_w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_conv_operands<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias_len: usize,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    let ws = weights.shape();
    let want = spec.weight_shape();
    for (dim, e, a) in [
        ("weight out_channels", want.n, ws.n),
        ("weight in_channels", want.c, ws.c),
        ("weight kernel height", want.h, ws.h),
        ("weight kernel width", want.w, ws.w),
        ("input channels", spec.in_channels, input.shape().c),
        ("bias length", spec.out_channels, bias_len),
    ] {
        if e != a {
            return Err(Error::shape(op, dim, e, a));
        }
    }
    Ok(())
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T], spec: &ConvSpec) -> Result<Tensor<T>> {
    check_conv_operands("conv2d", input, weights, bias.len(), spec)?;
    let s = input.shape();
    let (oh, ow) = spec.output_size(s.h, s.w)?;
    let low = Lowering::from_conv(spec, s.h, s.w, oh, ow);
    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let g = low.grid();
    let out_shape = Shape::new(s.n, spec.out_channels, oh, ow);
    let mut out = vec![T::zero(); out_shape.len()];
    let mut cols = vec![T::zero(); k * g];
    for n in 0..s.n {
        low.im2col(input.item(n), s.c, &mut cols);
        let dst = &mut out[n * out_shape.item()..(n + 1) * out_shape.item()];
        for (co, &b) in bias.iter().enumerate() {
            dst[co * g..(co + 1) * g].fill(b);
        }
        T::gemm(
            spec.out_channels,
            k,
            g,
            T::one(),
            weights.data(),
            (k as isize, 1),
            &cols,
            (g as isize, 1),
            T::one(),
            dst,
            (g as isize, 1),
        );
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradients of a convolution with respect to its operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    check_conv_operands("conv2d_backward", input, weights, spec.out_channels, spec)?;
    let s = input.shape();
    let (oh, ow) = spec.output_size(s.h, s.w)?;
    let out_shape = Shape::new(s.n, spec.out_channels, oh, ow);
    if grad_out.len() != out_shape.len() {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out length",
            out_shape.len(),
            grad_out.len(),
        ));
    }
    let low = Lowering::from_conv(spec, s.h, s.w, oh, ow);
    let k = spec.in_channels * spec.kernel.0 * spec.kernel.1;
    let g = low.grid();
    let mut gw = vec![T::zero(); weights.data().len()];
    let mut gb = vec![T::zero(); spec.out_channels];
    let mut gin = need_input_grad.then(|| vec![T::zero(); s.len()]);
    let mut cols = vec![T::zero(); k * g];
    let mut gcols = vec![T::zero(); if need_input_grad { k * g } else { 0 }];
    for n in 0..s.n {
        let go = &grad_out[n * out_shape.item()..(n + 1) * out_shape.item()];
        for (co, b) in gb.iter_mut().enumerate() {
            *b = *b + go[co * g..(co + 1) * g].iter().copied().sum::<T>();
        }
        low.im2col(input.item(n), s.c, &mut cols);
        // gW += gout (co x g) * cols^T (g x k)
        T::gemm(
            spec.out_channels,
            g,
            k,
            T::one(),
            go,
            (g as isize, 1),
            &cols,
            (1, g as isize),
            T::one(),
            &mut gw,
            (k as isize, 1),
        );
        if let Some(gin) = gin.as_mut() {
            // gcols = W^T (k x co) * gout (co x g)
            T::gemm(
                k,
                spec.out_channels,
                g,
                T::one(),
                weights.data(),
                (1, k as isize),
                go,
                (g as isize, 1),
                T::zero(),
                &mut gcols,
                (g as isize, 1),
            );
            low.col2im(&gcols, s.c, &mut gin[n * s.item()..(n + 1) * s.item()]);
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

fn transposed_lowering(h: usize, w: usize, factor: usize) -> Lowering {
    let k = 2 * factor;
    Lowering {
        img_h: h * factor,
        img_w: w * factor,
        grid_h: h,
        grid_w: w,
        kh: k,
        kw: k,
        sh: factor,
        sw: factor,
        ph: factor / 2,
        pw: factor / 2,
        dh: 1,
        dw: 1,
    }
}

fn check_transposed<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, factor: usize) -> Result<usize> {
    if factor < 1 {
        return Err(Error::invalid("transposed_conv2d", "upsampling factor must be >= 1"));
    }
    let ws = weights.shape();
    if ws.n != input.shape().c {
        return Err(Error::shape(
            "transposed_conv2d",
            "weight in_channels",
            input.shape().c,
            ws.n,
        ));
    }
    if ws.h != 2 * factor || ws.w != 2 * factor {
        return Err(Error::shape(
            "transposed_conv2d",
            "kernel size",
            2 * factor,
            ws.h.max(ws.w),
        ));
    }
    Ok(ws.c)
}

/// Stride-`factor` transposed convolution with a `2*factor` kernel, cropped so
/// the output is exactly `factor` times the input size.
///
/// Weights are laid out `(in_channels, out_channels, 2f, 2f)`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    factor: usize,
) -> Result<Tensor<T>> {
    let cout = check_transposed(input, weights, factor)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("transposed_conv2d", "bias length", cout, b.len()));
        }
    }
    let s = input.shape();
    let low = transposed_lowering(s.h, s.w, factor);
    let out_shape = Shape::new(s.n, cout, s.h * factor, s.w * factor);
    let rows = cout * low.kh * low.kw;
    let g = low.grid();
    let mut cols = vec![T::zero(); rows * g];
    let mut out = vec![T::zero(); out_shape.len()];
    for n in 0..s.n {
        // cols (rows x g) = W^T (rows x cin) * x (cin x g)
        T::gemm(
            rows,
            s.c,
            g,
            T::one(),
            weights.data(),
            (1, rows as isize),
            input.item(n),
            (g as isize, 1),
            T::zero(),
            &mut cols,
            (g as isize, 1),
        );
        let dst = &mut out[n * out_shape.item()..(n + 1) * out_shape.item()];
        if let Some(b) = bias {
            let p = out_shape.plane();
            for (co, &bv) in b.iter().enumerate() {
                dst[co * p..(co + 1) * p].fill(bv);
            }
        }
        low.col2im(&cols, cout, dst);
    }
    Tensor::from_vec(out_shape, out)
}

pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    factor: usize,
    grad_out: &[T],
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let cout = check_transposed(input, weights, factor)?;
    let s = input.shape();
    let low = transposed_lowering(s.h, s.w, factor);
    let out_shape = Shape::new(s.n, cout, s.h * factor, s.w * factor);
    if grad_out.len() != out_shape.len() {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            "grad_out length",
            out_shape.len(),
            grad_out.len(),
        ));
    }
    let rows = cout * low.kh * low.kw;
    let g = low.grid();
    let mut cols = vec![T::zero(); rows * g];
    let mut gw = vec![T::zero(); weights.data().len()];
    let mut gb = vec![T::zero(); cout];
    let mut gin = need_input_grad.then(|| vec![T::zero(); s.len()]);
    for n in 0..s.n {
        let go = &grad_out[n * out_shape.item()..(n + 1) * out_shape.item()];
        let p = out_shape.plane();
        for (co, b) in gb.iter_mut().enumerate() {
            *b = *b + go[co * p..(co + 1) * p].iter().copied().sum::<T>();
        }
        low.im2col(go, cout, &mut cols);
        // gW (cin x rows) += x (cin x g) * cols^T (g x rows)
        T::gemm(
            s.c,
            g,
            rows,
            T::one(),
            input.item(n),
            (g as isize, 1),
            &cols,
            (1, g as isize),
            T::one(),
            &mut gw,
            (rows as isize, 1),
        );
        if let Some(gin) = gin.as_mut() {
            // gx (cin x g) = W (cin x rows) * cols (rows x g)
            T::gemm(
                s.c,
                rows,
                g,
                T::one(),
                weights.data(),
                (rows as isize, 1),
                &cols,
                (g as isize, 1),
                T::zero(),
                &mut gin[n * s.item()..(n + 1) * s.item()],
                (g as isize, 1),
            );
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// Channel-diagonal bilinear interpolation kernel for [`transposed_conv2d`].
pub fn bilinear_upsample_weights<T: Scalar>(channels: usize, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::invalid("bilinear_upsample_weights", "factor must be >= 1"));
    }
    let k = 2 * factor;
    let center = factor as f64 - 0.5;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor as f64;
    let shape = Shape::new(channels, channels, k, k);
    let mut t = Tensor::zeros(shape)?;
    for c in 0..channels {
        for y in 0..k {
            for x in 0..k {
                t.set(c, c, y, x, T::lit(tap(y) * tap(x)));
            }
        }
    }
    Ok(t)
}
