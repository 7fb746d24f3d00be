//! Text attention: a pixel-wise text probability map computed from the first
//! aggregated feature map, used to gate prediction features and supervised by
//! a binary text mask.
//!
//! `F -> relu(conv3x3) -> relu(conv3x3) -> deconv(xF) -> conv1x1(2) -> softmax`

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{conv_param_specs, upsample_param_specs, ModelParams, ParamSpec, ParamVars};
use crate::tensor::{elementwise_scale, resize_bilinear, ConvSpec, Graph, Scalar, Shape, Tensor, Var};

/// Shape of the attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub in_channels: usize,
    pub conv_width: usize,
    /// Upsampling factor from the source feature map to the input image.
    pub factor: usize,
}

impl AttentionParams {
    pub fn convs(&self) -> [(&'static str, ConvSpec); 2] {
        [
            ("conv1", ConvSpec::same(self.in_channels, self.conv_width, 3, 3)),
            ("conv2", ConvSpec::same(self.conv_width, self.conv_width, 3, 3)),
        ]
    }

    pub fn projection(&self) -> ConvSpec {
        ConvSpec::same(self.conv_width, 2, 1, 1)
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = self
            .convs()
            .iter()
            .flat_map(|(n, s)| conv_param_specs(&format!("{prefix}.{n}"), s))
            .collect();
        v.extend(upsample_param_specs(
            &format!("{prefix}.deconv"),
            self.conv_width,
            self.factor,
        ));
        v.extend(conv_param_specs(&format!("{prefix}.proj"), &self.projection()));
        v
    }

    /// Returns the 2-channel softmax map at `factor` times the input resolution.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, features: Var, p: &ParamVars, prefix: &str) -> Result<Var> {
        let s = g.shape(features);
        if s.c != self.in_channels {
            return Err(Error::shape(
                "compute_attention",
                "input channels",
                self.in_channels,
                s.c,
            ));
        }
        let mut x = features;
        for (name, spec) in self.convs() {
            let (w, b) = p.conv(&format!("{prefix}.{name}"))?;
            let y = g.conv2d(x, w, b, spec)?;
            x = g.relu(y);
        }
        let (w, b) = p.conv(&format!("{prefix}.deconv"))?;
        let up = g.transposed_conv2d(x, w, Some(b), self.factor)?;
        let (w, b) = p.conv(&format!("{prefix}.proj"))?;
        let logits = g.conv2d(up, w, b, self.projection())?;
        g.channel_softmax(logits)
    }
}

/// Attention output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T: Scalar = f32> {
    /// Channel 0 is background, channel 1 text.
    pub alpha: Tensor<T>,
    /// Text probability at input resolution.
    pub alpha_pos: Tensor<T>,
    /// Text probability resized to each prediction layer.
    pub resized: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Builds the maps from `alpha`, resizing the text channel to each `(name, h, w)`.
    pub fn from_alpha(alpha: Tensor<T>, layers: &[(String, usize, usize)]) -> Result<Self> {
        let s = alpha.shape();
        if s.c != 2 {
            return Err(Error::shape("attention_maps", "channels", 2, s.c));
        }
        let mut pos = Vec::with_capacity(s.n * s.plane());
        for n in 0..s.n {
            pos.extend_from_slice(alpha.channel(n, 1));
        }
        let alpha_pos = Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), pos)?;
        let mut resized = BTreeMap::new();
        for (name, h, w) in layers {
            resized.insert(name.clone(), resize_bilinear(&alpha_pos, *h, *w)?);
        }
        Ok(AttentionMaps {
            alpha,
            alpha_pos,
            resized,
        })
    }
}

/// Runs the attention branch on a plain tensor and resizes the text channel
/// to each `(layer name, rows, cols)`. `image_size` must equal the source
/// resolution times the upsampling factor.
pub fn compute_attention<T: Scalar>(
    f_aif1: &Tensor<T>,
    params: &ModelParams<T>,
    prefix: &str,
    layout: &AttentionParams,
    image_size: usize,
    layers: &[(String, usize, usize)],
) -> Result<AttentionMaps<T>> {
    let s = f_aif1.shape();
    if s.h * layout.factor != image_size || s.w * layout.factor != image_size {
        return Err(Error::invalid(
            "compute_attention",
            format!(
                "source map {}x{} times {} does not give the {image_size}-pixel input",
                s.h, s.w, layout.factor
            ),
        ));
    }
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, |_| false);
    let x = g.leaf(f_aif1.clone(), false);
    let alpha = layout.forward(&mut g, x, &pv, prefix)?;
    AttentionMaps::from_alpha(g.value(alpha).clone(), layers)
}

/// Gates `features` with the resized text probability of `layer`.
pub fn encode_attention<T: Scalar>(features: &Tensor<T>, maps: &AttentionMaps<T>, layer: &str) -> Result<Tensor<T>> {
    let map = maps
        .resized
        .get(layer)
        .ok_or_else(|| Error::invalid("encode_attention", format!("no attention map for layer {layer}")))?;
    elementwise_scale(features, map)
}

/// Mean pixel-wise cross-entropy between `alpha` and a binary mask laid out
/// as `(n, h, w)`.
pub fn attention_loss<T: Scalar>(alpha: &Tensor<T>, mask: &[T]) -> Result<T> {
    let mut g = Graph::new();
    let a = g.leaf(alpha.clone(), false);
    let l = g.prob_cross_entropy(a, mask.to_vec())?;
    Ok(g.scalar(l))
}
