//! Four-branch dilated inception block and aggregation of adjacent layers.
//!
//! Branches, concatenated in this order, each followed by ReLU:
//! 1. 1x1 conv
//! 2. 3x3 conv, dilated
//! 3. 3x3 max pool (stride 1) then 1x1 conv
//! 4. 1x5 conv then 5x1 conv, both dilated, ReLU in between

use crate::error::{Error, Result};
use crate::params::{conv_param_specs, ModelParams, ParamSpec, ParamVars};
use crate::tensor::{ConvSpec, Graph, PoolSpec, Scalar, Tensor, Var};

pub const BRANCHES: [&str; 4] = ["b1x1", "b3x3", "pool", "b5x5"];

/// Shape of one inception block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionParams {
    pub in_channels: usize,
    /// Output channels of every branch; the block emits four times this.
    pub branch_width: usize,
    pub dilation: usize,
}

impl InceptionParams {
    pub fn new(in_channels: usize, branch_width: usize, dilation: usize) -> Self {
        InceptionParams {
            in_channels,
            branch_width,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        4 * self.branch_width
    }

    /// Convolutions in evaluation order, keyed by their name suffix.
    pub fn convs(&self) -> [(&'static str, ConvSpec); 5] {
        let (i, b, d) = (self.in_channels, self.branch_width, self.dilation);
        [
            ("b1x1", ConvSpec::same(i, b, 1, 1)),
            ("b3x3", ConvSpec::dilated_same(i, b, 3, 3, d)),
            ("pool", ConvSpec::same(i, b, 1, 1)),
            ("b5x5.row", ConvSpec::dilated_same(i, b, 1, 5, d)),
            ("b5x5.col", ConvSpec::dilated_same(b, b, 5, 1, d)),
        ]
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        self.convs()
            .iter()
            .flat_map(|(n, s)| conv_param_specs(&format!("{prefix}.{n}"), s))
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, p: &ParamVars, prefix: &str) -> Result<Var> {
        let s = g.shape(x);
        if s.c != self.in_channels {
            return Err(Error::shape("inception_block", "input channels", self.in_channels, s.c));
        }
        let [c1, c3, cp, c5r, c5c] = self.convs();
        let conv = |g: &mut Graph<T>, input: Var, (name, spec): (&str, ConvSpec)| -> Result<Var> {
            let (w, b) = p.conv(&format!("{prefix}.{name}"))?;
            let y = g.conv2d(input, w, b, spec)?;
            Ok(g.relu(y))
        };
        let b1 = conv(g, x, c1)?;
        let b3 = conv(g, x, c3)?;
        let pooled = g.maxpool2d(x, PoolSpec::new(3, 1, 1))?;
        let bp = conv(g, pooled, cp)?;
        let row = conv(g, x, c5r)?;
        let b5 = conv(g, row, c5c)?;
        g.concat(&[b1, b3, bp, b5])
    }
}

/// Inception block on a plain tensor (no gradients).
pub fn inception_block<T: Scalar>(
    features: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    layout: &InceptionParams,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, |_| false);
    let x = g.leaf(features.clone(), false);
    let y = layout.forward(&mut g, x, &pv, prefix)?;
    Ok(g.value(y).clone())
}

/// Fusion of a layer's inception features with its neighbours: the lower
/// (finer) layer is max-pooled by 2, the higher (coarser) one bilinearly
/// upsampled by 2, the three are concatenated and projected by a 1x1 conv
/// followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AifParams {
    pub lower_channels: Option<usize>,
    pub current_channels: usize,
    pub higher_channels: Option<usize>,
    pub width: usize,
}

impl AifParams {
    pub fn concat_channels(&self) -> usize {
        self.lower_channels.unwrap_or(0) + self.current_channels + self.higher_channels.unwrap_or(0)
    }

    pub fn projection(&self) -> ConvSpec {
        ConvSpec::same(self.concat_channels(), self.width, 1, 1)
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        conv_param_specs(&format!("{prefix}.proj"), &self.projection()).to_vec()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        lower: Option<Var>,
        current: Var,
        higher: Option<Var>,
        p: &ParamVars,
        prefix: &str,
    ) -> Result<Var> {
        let op = "aggregate_aif";
        let cs = g.shape(current);
        if cs.c != self.current_channels {
            return Err(Error::shape(op, "current channels", self.current_channels, cs.c));
        }
        let mut parts = Vec::with_capacity(3);
        match (lower, self.lower_channels) {
            (Some(l), Some(lc)) => {
                let ls = g.shape(l);
                if ls.c != lc {
                    return Err(Error::shape(op, "lower channels", lc, ls.c));
                }
                if (ls.h, ls.w) != (2 * cs.h, 2 * cs.w) {
                    return Err(Error::invalid(
                        op,
                        format!("lower layer is {}x{}, expected twice {}x{}", ls.h, ls.w, cs.h, cs.w),
                    ));
                }
                parts.push(g.maxpool2d(l, PoolSpec::new(2, 2, 0))?);
            }
            (None, None) => {}
            _ => return Err(Error::invalid(op, "lower layer presence disagrees with the layout")),
        }
        parts.push(current);
        match (higher, self.higher_channels) {
            (Some(h), Some(hc)) => {
                let hs = g.shape(h);
                if hs.c != hc {
                    return Err(Error::shape(op, "higher channels", hc, hs.c));
                }
                if (2 * hs.h, 2 * hs.w) != (cs.h, cs.w) {
                    return Err(Error::invalid(
                        op,
                        format!("higher layer is {}x{}, expected half of {}x{}", hs.h, hs.w, cs.h, cs.w),
                    ));
                }
                parts.push(g.resize_bilinear(h, cs.h, cs.w)?);
            }
            (None, None) => {}
            _ => return Err(Error::invalid(op, "higher layer presence disagrees with the layout")),
        }
        let cat = g.concat(&parts)?;
        let (w, b) = p.conv(&format!("{prefix}.proj"))?;
        let y = g.conv2d(cat, w, b, self.projection())?;
        Ok(g.relu(y))
    }
}

/// Aggregation on plain tensors (no gradients).
pub fn aggregate_aif<T: Scalar>(
    lower: Option<&Tensor<T>>,
    current: &Tensor<T>,
    higher: Option<&Tensor<T>>,
    params: &ModelParams<T>,
    prefix: &str,
    layout: &AifParams,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, |_| false);
    let l = lower.map(|t| g.leaf(t.clone(), false));
    let c = g.leaf(current.clone(), false);
    let h = higher.map(|t| g.leaf(t.clone(), false));
    let y = layout.forward(&mut g, l, c, h, &pv, prefix)?;
    Ok(g.value(y).clone())
}
