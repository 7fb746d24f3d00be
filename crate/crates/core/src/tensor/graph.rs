use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{conv2d, conv2d_backward, transposed_conv2d, transposed_conv2d_backward, ConvSpec};
use super::ops::{self, smooth_l1_elem, smooth_l1_grad};
use super::pool::{maxpool2d, maxpool2d_backward, PoolSpec};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    TransposedConv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        factor: usize,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    Slice {
        input: Var,
        start: usize,
        len: usize,
    },
    ScaleByMap {
        features: Var,
        map: Var,
    },
    Resize(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<i32>,
        classes: usize,
        norm: T,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
        norm: T,
    },
    ProbCe {
        probs: Var,
        mask: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Dot {
        input: Var,
        weight: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager tape over the fixed op set the detector uses. Values are computed
/// as nodes are added; [`Graph::backward`] fills gradient buffers in reverse.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Probability floor inside logarithms.
const PROB_FLOOR: f64 = 1e-12;

fn scalar_shape() -> Shape {
    Shape::new(1, 1, 1, 1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[T]>::to_vec);
        t.zero_grad();
        g
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(weight), self.value(bias).data(), &spec)?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
            &[input, weight, bias],
        ))
    }

    pub fn transposed_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, factor: usize) -> Result<Var> {
        let out = transposed_conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b).data()),
            factor,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::TransposedConv {
                input,
                weight,
                bias,
                factor,
            },
            &deps,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn maxpool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let p = maxpool2d(self.value(input), spec)?;
        Ok(self.push(
            p.output,
            Op::MaxPool {
                input,
                argmax: p.argmax,
            },
            &[input],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::channel_concat(&values)?;
        Ok(self.push(out, Op::Concat(inputs.to_vec()), inputs))
    }

    pub fn channel_softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::channel_softmax(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input), &[input]))
    }

    pub fn channel_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if len == 0 || start + len > s.c {
            return Err(Error::invalid(
                "channel_slice",
                format!("channels {start}..{} out of range for {s}", start + len),
            ));
        }
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let src = self.value(input);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            let item = src.item(n);
            data.extend_from_slice(&item[start * s.plane()..(start + len) * s.plane()]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Slice { input, start, len }, &[input]))
    }

    pub fn scale_by_map(&mut self, features: Var, map: Var) -> Result<Var> {
        let out = ops::elementwise_scale(self.value(features), self.value(map))?;
        Ok(self.push(out, Op::ScaleByMap { features, map }, &[features, map]))
    }

    pub fn resize_bilinear(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input), h, w)?;
        Ok(self.push(out, Op::Resize(input), &[input]))
    }

    /// `sum_nll / norm` over non-ignored positions; see [`ops::softmax_cross_entropy_sum`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<i32>, classes: usize, norm: T) -> Result<Var> {
        if !(norm > T::zero()) {
            return Err(Error::invalid("softmax_cross_entropy", "normaliser must be positive"));
        }
        let (sum, _) = ops::softmax_cross_entropy_sum(self.value(logits), &labels, classes, ops::IGNORE_LABEL)?;
        let out = Tensor::from_vec(scalar_shape(), vec![sum / norm])?;
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels,
                classes,
                norm,
            },
            &[logits],
        ))
    }

    /// `sum(weight * smooth_l1(pred - target)) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<T>, weight: Vec<T>, norm: T) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || weight.len() != p.len() {
            return Err(Error::shape(
                "smooth_l1",
                "target/weight length",
                p.len(),
                target.len().min(weight.len()),
            ));
        }
        if !(norm > T::zero()) {
            return Err(Error::invalid("smooth_l1", "normaliser must be positive"));
        }
        let sum: T = p
            .iter()
            .zip(&target)
            .zip(&weight)
            .filter(|(_, &w)| w != T::zero())
            .map(|((&a, &b), &w)| w * smooth_l1_elem(a - b))
            .sum();
        let out = Tensor::from_vec(scalar_shape(), vec![sum / norm])?;
        Ok(self.push(
            out,
            Op::SmoothL1 {
                pred,
                target,
                weight,
                norm,
            },
            &[pred],
        ))
    }

    /// Mean pixel-wise cross-entropy between a 2-channel probability map and a binary mask.
    pub fn prob_cross_entropy(&mut self, probs: Var, mask: Vec<T>) -> Result<Var> {
        let s = self.shape(probs);
        if s.c != 2 {
            return Err(Error::shape("attention_loss", "probability channels", 2, s.c));
        }
        if mask.len() != s.n * s.plane() {
            return Err(Error::shape("attention_loss", "mask size", s.n * s.plane(), mask.len()));
        }
        let pv = self.value(probs);
        let floor = T::lit(PROB_FLOOR);
        let p = s.plane();
        let mut sum = T::zero();
        for n in 0..s.n {
            let neg = pv.channel(n, 0);
            let pos = pv.channel(n, 1);
            for i in 0..p {
                let m = mask[n * p + i];
                sum = sum - (m * pos[i].max(floor).ln() + (T::one() - m) * neg[i].max(floor).ln());
            }
        }
        let out = Tensor::from_vec(scalar_shape(), vec![sum / T::lit((s.n * p) as f64)])?;
        Ok(self.push(out, Op::ProbCe { probs, mask }, &[probs]))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != scalar_shape() {
                return Err(Error::invalid("weighted_sum", format!("term has shape {}", t.shape())));
            }
            total = total + w * t.data()[0];
        }
        let out = Tensor::from_vec(scalar_shape(), vec![total])?;
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), &deps))
    }

    /// Scalar projection `sum(input * weight)`.
    pub fn dot(&mut self, input: Var, weight: Vec<T>) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weight.len() {
            return Err(Error::shape("dot", "weight length", x.len(), weight.len()));
        }
        let v: T = x.iter().zip(&weight).map(|(&a, &b)| a * b).sum();
        let out = Tensor::from_vec(scalar_shape(), vec![v])?;
        Ok(self.push(out, Op::Dot { input, weight }, &[input]))
    }

    /// Hash of every data-dependent branch taken in the forward pass
    /// (ReLU gates, pooling winners, smooth-L1 regimes).
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::SmoothL1 { pred, target, .. } => {
                    for (&a, &b) in self.value(*pred).data().iter().zip(target) {
                        ((a - b).abs() < T::one()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode pass from a scalar node. Gradients land in each node's
    /// tensor gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != scalar_shape() {
            return Err(Error::invalid("backward", "loss must be a scalar node"));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::one()])?;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].value.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let contributions = self.input_grads(i, &grad)?;
            for (v, g) in contributions {
                if self.nodes[v.0].needs_grad {
                    self.nodes[v.0].value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => {
                let grads = conv2d_backward(self.value(*input), self.value(*weight), spec, g, self.wants(*input))?;
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                out.push((*weight, grads.weight));
                out.push((*bias, grads.bias));
            }
            Op::TransposedConv {
                input,
                weight,
                bias,
                factor,
            } => {
                let grads = transposed_conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *factor,
                    g,
                    self.wants(*input),
                )?;
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                out.push((*weight, grads.weight));
                if let Some(b) = bias {
                    out.push((*b, grads.bias));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gi = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, gi));
            }
            Op::MaxPool { input, argmax } => {
                out.push((*input, maxpool2d_backward(self.shape(*input), argmax, g)?));
            }
            Op::Concat(inputs) => {
                let shapes: Vec<Shape> = inputs.iter().map(|&v| self.shape(v)).collect();
                for (v, part) in inputs.iter().zip(ops::channel_concat_backward(&shapes, g)?) {
                    out.push((*v, part));
                }
            }
            Op::Softmax(x) => {
                out.push((*x, ops::channel_softmax_backward(&node.value, g)));
            }
            Op::Slice { input, start, len } => {
                let s = self.shape(*input);
                let p = s.plane();
                let mut gi = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    let dst = n * s.item() + start * p;
                    let src = n * len * p;
                    gi[dst..dst + len * p].copy_from_slice(&g[src..src + len * p]);
                }
                out.push((*input, gi));
            }
            Op::ScaleByMap { features, map } => {
                let (gf, gm) = ops::elementwise_scale_backward(self.value(*features), self.value(*map), g)?;
                out.push((*features, gf));
                out.push((*map, gm));
            }
            Op::Resize(x) => {
                let s = node.value.shape();
                out.push((*x, ops::resize_bilinear_backward(self.shape(*x), s.h, s.w, g)?));
            }
            Op::SoftmaxCe {
                logits,
                labels,
                classes,
                norm,
            } => {
                let gi = ops::softmax_cross_entropy_backward(
                    self.value(*logits),
                    labels,
                    *classes,
                    ops::IGNORE_LABEL,
                    g[0] / *norm,
                )?;
                out.push((*logits, gi));
            }
            Op::SmoothL1 {
                pred,
                target,
                weight,
                norm,
            } => {
                let scale = g[0] / *norm;
                let gi = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&a, &b), &w)| {
                        if w == T::zero() {
                            T::zero()
                        } else {
                            scale * w * smooth_l1_grad(a - b)
                        }
                    })
                    .collect();
                out.push((*pred, gi));
            }
            Op::ProbCe { probs, mask } => {
                let pv = self.value(*probs);
                let s = pv.shape();
                let p = s.plane();
                let floor = T::lit(PROB_FLOOR);
                let scale = g[0] / T::lit((s.n * p) as f64);
                let mut gi = vec![T::zero(); s.len()];
                for n in 0..s.n {
                    for i in 0..p {
                        let m = mask[n * p + i];
                        let k0 = n * s.item() + i;
                        let k1 = k0 + p;
                        let p0 = pv.data()[k0];
                        let p1 = pv.data()[k1];
                        if p0 > floor {
                            gi[k0] = -scale * (T::one() - m) / p0;
                        }
                        if p1 > floor {
                            gi[k1] = -scale * m / p1;
                        }
                    }
                }
                out.push((*probs, gi));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    out.push((v, vec![g[0] * w]));
                }
            }
            Op::Dot { input, weight } => {
                out.push((*input, weight.iter().map(|&w| w * g[0]).collect()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_then_dot_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.5, 2.0]).unwrap(),
            true,
        );
        let r = g.relu(x);
        let d = g.dot(r, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.scalar(d), 7.0);
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0, 3.0]);
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0).unwrap(), false);
        let y = g.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 2.0).unwrap(), true);
        let c = g.concat(&[x, y]).unwrap();
        let d = g.dot(c, vec![1.0; 8]).unwrap();
        g.backward(d).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(y).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_backward_recovers_each_part() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(Shape::new(2, 1, 1, 2)).unwrap(), true);
        let b = g.leaf(Tensor::zeros(Shape::new(2, 2, 1, 2)).unwrap(), true);
        let c = g.concat(&[a, b]).unwrap();
        let w: Vec<f64> = (0..12).map(f64::from).collect();
        let d = g.dot(c, w).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
