//! Dense NCHW tensors and the differentiable kernels the detector is built from.
//!
//! Every kernel comes as a pure forward function plus an explicit backward
//! function. [`Graph`] strings them together into a small tape so composite
//! paths (attention branch, inception block, whole detector) can be
//! differentiated and gradient-checked.

mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{
    bilinear_upsample_weights, conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward, ConvGrads,
    ConvSpec,
};
pub use graph::{Graph, Var};
pub use ops::{
    channel_concat, channel_concat_backward, channel_softmax, channel_softmax_backward, elementwise_scale,
    elementwise_scale_backward, resize_bilinear, resize_bilinear_backward, smooth_l1, smooth_l1_grad,
    softmax_cross_entropy, softmax_cross_entropy_backward, softmax_cross_entropy_sum, IGNORE_LABEL,
};
pub use pool::{maxpool2d, maxpool2d_backward, PoolOutput, PoolSpec};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                check_gemm_extent(c.len(), m, n, c_strides);
                // SAFETY: every operand extent was checked against its slice length above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Batch x channels x rows x cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array with an optional gradient buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        if data.len() != shape.len() {
            return Err(Error::shape("tensor", "data length", shape.len(), data.len()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Tensor {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
            grad: None,
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", "length", self.data.len(), g.len()));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let sz = self.shape.item();
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        validate_shape(shape)?;
        if shape.len() != self.shape.len() {
            return Err(Error::shape("reshape", "element count", self.shape.len(), shape.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors given"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for (i, t) in items.iter().enumerate() {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::invalid(
                    "stack",
                    format!("tensor {i} has shape {s}, expected item shape of {first}"),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.n).sum();
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }
}

fn validate_shape(shape: Shape) -> Result<()> {
    for (name, d) in [("n", shape.n), ("c", shape.c), ("h", shape.h), ("w", shape.w)] {
        if d == 0 {
            return Err(Error::invalid("tensor", format!("dimension {name} must be >= 1")));
        }
    }
    Ok(())
}
