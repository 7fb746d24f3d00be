use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        PoolSpec { kernel, stride, pad }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::invalid("maxpool2d", "kernel and stride must be >= 1"));
        }
        if self.pad >= self.kernel {
            // The first window would lie entirely in the padding.
            return Err(Error::invalid(
                "maxpool2d",
                format!(
                    "pad {} leaves a window entirely in padding (kernel {})",
                    self.pad, self.kernel
                ),
            ));
        }
        let axis = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::invalid("maxpool2d", "input smaller than pooling window"));
            }
            let out = (padded - self.kernel) / self.stride + 1;
            // The last window must touch at least one real element.
            if (out - 1) * self.stride >= len + self.pad {
                return Err(Error::invalid("maxpool2d", "a window lies entirely in padding"));
            }
            Ok(out)
        };
        Ok((axis(h)?, axis(w)?))
    }
}

/// Pooled values plus, per output element, the flat input index it came from.
#[derive(Debug, Clone)]
pub struct PoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max pooling. Ties resolve to the first element in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, spec: PoolSpec) -> Result<PoolOutput<T>> {
    let s = input.shape();
    let (oh, ow) = spec.output_size(s.h, s.w)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..oh {
                let y0 = (oy * spec.stride) as isize - spec.pad as isize;
                for ox in 0..ow {
                    let x0 = (ox * spec.stride) as isize - spec.pad as isize;
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..spec.kernel as isize {
                        let y = y0 + ky;
                        if y < 0 || y >= s.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel as isize {
                            let x = x0 + kx;
                            if x < 0 || x >= s.w as isize {
                                continue;
                            }
                            let i = base + y as usize * s.w + x as usize;
                            if best_i == usize::MAX || data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::from_vec(out_shape, out)?,
        argmax,
    })
}

/// Routes each output gradient to its argmax input element.
pub fn maxpool2d_backward<T: Scalar>(input_shape: Shape, argmax: &[usize], grad_out: &[T]) -> Result<Vec<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            "grad_out length",
            argmax.len(),
            grad_out.len(),
        ));
    }
    let mut g = vec![T::zero(); input_shape.len()];
    for (&i, &v) in argmax.iter().zip(grad_out) {
        g[i] = g[i] + v;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, PoolSpec::new(2, 2, 0)).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        let g = maxpool2d_backward(x.shape(), &p.argmax, &[1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn same_pool_on_constant() {
        let x = Tensor::<f32>::filled(Shape::new(2, 3, 5, 4), 2.5).unwrap();
        let p = maxpool2d(&x, PoolSpec::new(3, 1, 1)).unwrap();
        assert_eq!(p.output.shape(), x.shape());
        assert!(p.output.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ties_go_to_first_occurrence() {
        let x = Tensor::<f64>::filled(Shape::new(1, 1, 2, 2), 1.0).unwrap();
        let p = maxpool2d(&x, PoolSpec::new(2, 2, 0)).unwrap();
        assert_eq!(p.argmax, vec![0]);
    }

    #[test]
    fn padding_only_window_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4)).unwrap();
        assert!(maxpool2d(&x, PoolSpec::new(2, 2, 2)).is_err());
        assert!(maxpool2d(&x, PoolSpec::new(1, 1, 1)).is_err());
    }
}
