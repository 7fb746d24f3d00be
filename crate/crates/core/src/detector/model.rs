use std::collections::BTreeMap;

use crate::anchors::{generate_default_boxes, AnchorSet};
use crate::attention::{AttentionMaps, AttentionParams};
use crate::error::{Error, Result};
use crate::inception::{AifParams, InceptionParams};
use crate::params::{conv_param_specs, ModelParams, ParamSpec, ParamVars};
use crate::tensor::{ConvSpec, Graph, PoolSpec, Scalar, Shape, Tensor, Var};

use super::config::{BackboneLayer, DetectorConfig, FeatureInfo, INPUT_CHANNELS};

/// Inputs are standardised as `(pixel - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
/// Prediction heads and the attention projection start small, so untrained
/// scores sit near one half and the first updates do not swamp the features.
pub const HEAD_INIT_GAIN: f64 = 0.1;

pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone)]
enum Stage {
    Conv { name: String, spec: ConvSpec },
    Pool(PoolSpec),
}

#[derive(Debug, Clone)]
struct Head {
    name: String,
    source: String,
    gated: bool,
    anchors_per_location: usize,
    cls: ConvSpec,
    loc: ConvSpec,
}

/// A validated configuration together with its anchor set and layer layouts.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    anchors: AnchorSet,
    stages: Vec<Stage>,
    inception: Vec<(String, InceptionParams)>,
    aif: Vec<AifLayer>,
    attention: Option<(String, AttentionParams)>,
    heads: Vec<Head>,
}

#[derive(Debug, Clone)]
struct AifLayer {
    name: String,
    lower: Option<String>,
    current: String,
    higher: Option<String>,
    layout: AifParams,
}

/// Graph handles produced by [`Detector::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Per prediction layer, `(n, 2 * A, H, W)`; channel `2a + k` is class `k` of anchor `a`.
    pub cls: Vec<Var>,
    /// Per prediction layer, `(n, 5 * A, H, W)`; channel `5a + j` is offset `j` of anchor `a`.
    pub loc: Vec<Var>,
    /// Two-channel attention softmax at input resolution.
    pub alpha: Option<Var>,
    /// Gating map of each prediction layer, when gated.
    pub gates: Vec<Option<Var>>,
}

/// Head outputs of one prediction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput<T: Scalar = f32> {
    pub name: String,
    pub anchors_per_location: usize,
    pub cls_logits: Tensor<T>,
    pub loc_offsets: Tensor<T>,
}

impl<T: Scalar> LayerOutput<T> {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.cls_logits.shape();
        (s.h, s.w)
    }

    /// Logit of class `k` for anchor `a` at cell `(y, x)`.
    pub fn cls_logit(&self, n: usize, y: usize, x: usize, a: usize, k: usize) -> T {
        self.cls_logits.at(n, 2 * a + k, y, x)
    }

    pub fn loc_offset(&self, n: usize, y: usize, x: usize, a: usize, j: usize) -> T {
        self.loc_offsets.at(n, 5 * a + j, y, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub layers: Vec<LayerOutput<T>>,
    pub attention: Option<AttentionMaps<T>>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let anchors = generate_default_boxes(&config.anchor_specs(), config.input_size)?;
        let features = config.features()?;
        let backbone = config.backbone_features()?;

        let mut stages = Vec::new();
        let mut channels = INPUT_CHANNELS;
        for layer in &config.backbone {
            match layer {
                BackboneLayer::Conv {
                    name,
                    out_channels,
                    kernel,
                    stride,
                    dilation,
                } => {
                    let spec = ConvSpec {
                        kernel: (*kernel, *kernel),
                        stride: (*stride, *stride),
                        pad: (dilation * (kernel - 1) / 2, dilation * (kernel - 1) / 2),
                        dilation: (*dilation, *dilation),
                        in_channels: channels,
                        out_channels: *out_channels,
                    };
                    channels = *out_channels;
                    stages.push(Stage::Conv {
                        name: name.clone(),
                        spec,
                    });
                }
                BackboneLayer::Pool { kernel, stride } => stages.push(Stage::Pool(PoolSpec::new(*kernel, *stride, 0))),
            }
        }

        let inc = &config.inception;
        let inception = inc
            .taps
            .iter()
            .map(|t| {
                (
                    t.clone(),
                    InceptionParams::new(backbone[t].channels, inc.width / 4, inc.dilation),
                )
            })
            .collect();

        let ch = |name: &Option<String>| name.as_ref().map(|n| features[n].channels);
        let aif = config
            .aif
            .iter()
            .map(|a| {
                let layout = AifParams {
                    lower_channels: ch(&a.lower),
                    current_channels: features[&a.current].channels,
                    higher_channels: ch(&a.higher),
                    width: a.width,
                };
                AifLayer {
                    name: a.name.clone(),
                    lower: a.lower.clone(),
                    current: a.current.clone(),
                    higher: a.higher.clone(),
                    layout,
                }
            })
            .collect();

        let attention = if config.attention.enabled {
            let src: FeatureInfo = features[&config.attention.source];
            Some((
                config.attention.source.clone(),
                AttentionParams {
                    in_channels: src.channels,
                    conv_width: config.attention.conv_width,
                    factor: src.stride,
                },
            ))
        } else {
            None
        };

        let k = config.head_kernel;
        let heads = config
            .prediction_layers
            .iter()
            .zip(&anchors.layers)
            .map(|(p, slot)| {
                let c = features[&p.source].channels;
                let a = slot.per_location();
                Head {
                    name: p.name.clone(),
                    source: p.source.clone(),
                    gated: config.attention_gates(p),
                    anchors_per_location: a,
                    cls: ConvSpec::same(c, 2 * a, k, k),
                    loc: ConvSpec::same(c, 5 * a, k, k),
                }
            })
            .collect();

        Ok(Detector {
            config,
            anchors,
            stages,
            inception,
            aif,
            attention,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    /// Every parameter tensor the network needs, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        for stage in &self.stages {
            if let Stage::Conv { name, spec } = stage {
                v.extend(conv_param_specs(&format!("backbone.{name}"), spec));
            }
        }
        for (tap, layout) in &self.inception {
            v.extend(layout.param_specs(&format!("inception.{tap}")));
        }
        for AifLayer { name, layout, .. } in &self.aif {
            v.extend(layout.param_specs(&format!("aif.{name}")));
        }
        if let Some((_, layout)) = &self.attention {
            v.extend(layout.param_specs("attention").into_iter().map(|s| {
                if s.name.starts_with("attention.proj.") {
                    s.with_gain(HEAD_INIT_GAIN)
                } else {
                    s
                }
            }));
        }
        for h in &self.heads {
            let specs = [
                conv_param_specs(&format!("head.{}.cls", h.name), &h.cls),
                conv_param_specs(&format!("head.{}.loc", h.name), &h.loc),
            ];
            v.extend(specs.into_iter().flatten().map(|s| s.with_gain(HEAD_INIT_GAIN)));
        }
        v
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::initialize(&self.param_specs(), seed)
    }

    pub fn zero_params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        ModelParams::zeros(&self.param_specs())
    }

    /// Whether `name` is updated during training (leading backbone convs can be frozen).
    pub fn is_trainable(&self, name: &str) -> bool {
        let frozen = self.config.optimizer.freeze_layers;
        if frozen == 0 {
            return true;
        }
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { name, .. } => Some(name),
                Stage::Pool(_) => None,
            })
            .take(frozen)
            .all(|n| !name.starts_with(&format!("backbone.{n}.")))
    }

    /// `(name, rows, cols)` of every prediction layer.
    pub fn layer_grids(&self) -> Vec<(String, usize, usize)> {
        self.anchors
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.grid_h, l.grid_w))
            .collect()
    }

    /// Stacks images into a batch and standardises them.
    pub fn preprocess<T: Scalar>(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        for (i, im) in images.iter().enumerate() {
            let sh = im.shape();
            if sh.n != 1 || sh.c != INPUT_CHANNELS || sh.h != s || sh.w != s {
                return Err(Error::invalid(
                    "forward",
                    format!("image {i} has shape {sh}, expected 1x{INPUT_CHANNELS}x{s}x{s}"),
                ));
            }
        }
        let owned: Vec<Tensor<T>> = images.iter().map(|t| (*t).clone()).collect();
        let mean = T::lit(INPUT_MEAN);
        let scale = T::lit(1.0 / INPUT_STD);
        Ok(Tensor::stack(&owned)?.map(|v| (v - mean) * scale))
    }

    /// Builds the network on `image` (already preprocessed).
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, image: Var, p: &ParamVars) -> Result<ForwardVars> {
        let s = g.shape(image);
        let size = self.config.input_size;
        if s.c != INPUT_CHANNELS || s.h != size || s.w != size {
            return Err(Error::invalid(
                "forward",
                format!("input is {s}, expected Nx{INPUT_CHANNELS}x{size}x{size}"),
            ));
        }
        let mut taps: BTreeMap<&str, Var> = BTreeMap::new();
        let mut x = image;
        for stage in &self.stages {
            match stage {
                Stage::Conv { name, spec } => {
                    let (w, b) = p.conv(&format!("backbone.{name}"))?;
                    let y = g.conv2d(x, w, b, *spec)?;
                    x = g.relu(y);
                    taps.insert(name.as_str(), x);
                }
                Stage::Pool(spec) => x = g.maxpool2d(x, *spec)?,
            }
        }

        let mut features: BTreeMap<&str, Var> = BTreeMap::new();
        for (tap, layout) in &self.inception {
            let y = layout.forward(g, taps[tap.as_str()], p, &format!("inception.{tap}"))?;
            features.insert(tap.as_str(), y);
        }
        for AifLayer {
            name,
            lower,
            current,
            higher,
            layout,
        } in &self.aif
        {
            let l = lower.as_ref().map(|n| features[n.as_str()]);
            let h = higher.as_ref().map(|n| features[n.as_str()]);
            let y = layout.forward(g, l, features[current.as_str()], h, p, &format!("aif.{name}"))?;
            features.insert(name.as_str(), y);
        }

        let (alpha, alpha_pos) = match &self.attention {
            Some((source, layout)) => {
                let a = layout.forward(g, features[source.as_str()], p, "attention")?;
                let pos = g.channel_slice(a, 1, 1)?;
                (Some(a), Some(pos))
            }
            None => (None, None),
        };

        let mut out = ForwardVars {
            cls: Vec::with_capacity(self.heads.len()),
            loc: Vec::with_capacity(self.heads.len()),
            alpha,
            gates: Vec::with_capacity(self.heads.len()),
        };
        for head in &self.heads {
            let mut f = features[head.source.as_str()];
            let mut gate = None;
            if let (true, Some(pos)) = (head.gated, alpha_pos) {
                let fs = g.shape(f);
                let m = g.resize_bilinear(pos, fs.h, fs.w)?;
                f = g.scale_by_map(f, m)?;
                gate = Some(m);
            }
            let (w, b) = p.conv(&format!("head.{}.cls", head.name))?;
            out.cls.push(g.conv2d(f, w, b, head.cls)?);
            let (w, b) = p.conv(&format!("head.{}.loc", head.name))?;
            out.loc.push(g.conv2d(f, w, b, head.loc)?);
            out.gates.push(gate);
        }
        Ok(out)
    }

    /// Inference-only forward pass on raw `[0, 1]` images.
    pub fn forward<T: Scalar>(&self, images: &[&Tensor<T>], params: &ModelParams<T>) -> Result<ForwardOutput<T>> {
        params.check(&self.param_specs())?;
        let input = self.preprocess(images)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, |_| false);
        let x = g.leaf(input, false);
        let fv = self.forward_graph(&mut g, x, &pv)?;
        self.collect_outputs(&g, &fv)
    }

    /// Copies head outputs and attention maps out of a graph.
    pub fn collect_outputs<T: Scalar>(&self, g: &Graph<T>, fv: &ForwardVars) -> Result<ForwardOutput<T>> {
        let layers = self
            .heads
            .iter()
            .zip(fv.cls.iter().zip(&fv.loc))
            .map(|(h, (&c, &l))| LayerOutput {
                name: h.name.clone(),
                anchors_per_location: h.anchors_per_location,
                cls_logits: g.value(c).clone(),
                loc_offsets: g.value(l).clone(),
            })
            .collect();
        let attention = match fv.alpha {
            Some(a) => Some(AttentionMaps::from_alpha(g.value(a).clone(), &self.layer_grids())?),
            None => None,
        };
        Ok(ForwardOutput { layers, attention })
    }

    /// Expected head output shapes for a batch of `n`.
    pub fn head_shapes(&self, n: usize) -> Vec<(Shape, Shape)> {
        self.anchors
            .layers
            .iter()
            .map(|l| {
                let a = l.per_location();
                (
                    Shape::new(n, 2 * a, l.grid_h, l.grid_w),
                    Shape::new(n, 5 * a, l.grid_h, l.grid_w),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shapes_follow_anchor_arithmetic() {
        let det = Detector::new(DetectorConfig::desk()).unwrap();
        assert_eq!(det.anchors().len(), (256 + 64 + 16) * 45);
        let params = det.init_params::<f32>(0).unwrap();
        let img = Tensor::filled(Shape::new(1, 3, 128, 128), 0.25f32).unwrap();
        let out = det.forward(&[&img], &params).unwrap();
        for (layer, (cs, ls)) in out.layers.iter().zip(det.head_shapes(1)) {
            assert_eq!(layer.cls_logits.shape(), cs);
            assert_eq!(layer.loc_offsets.shape(), ls);
        }
        let att = out.attention.unwrap();
        assert_eq!(att.alpha.shape(), Shape::new(1, 2, 128, 128));
        assert_eq!(att.resized["AIF-1"].shape(), Shape::new(1, 1, 16, 16));
    }

    #[test]
    fn freezing_covers_leading_convs() {
        let mut cfg = DetectorConfig::desk();
        cfg.optimizer.freeze_layers = 2;
        let det = Detector::new(cfg).unwrap();
        assert!(!det.is_trainable("backbone.conv1.weight"));
        assert!(!det.is_trainable("backbone.conv2.bias"));
        assert!(det.is_trainable("backbone.conv3.weight"));
        assert!(det.is_trainable("head.AIF-1.cls.weight"));
    }

    #[test]
    fn missing_tensor_is_named() {
        let det = Detector::new(DetectorConfig::desk()).unwrap();
        let specs: Vec<_> = det
            .param_specs()
            .into_iter()
            .filter(|s| s.name != "head.Inc-3.loc.bias")
            .collect();
        let params = ModelParams::<f32>::zeros(&specs).unwrap();
        let img = Tensor::zeros(Shape::new(1, 3, 128, 128)).unwrap();
        let err = det.forward(&[&img], &params).unwrap_err();
        assert!(err.to_string().contains("head.Inc-3.loc.bias"), "{err}");
    }
}
