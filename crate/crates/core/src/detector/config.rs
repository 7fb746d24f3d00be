//! Declarative network description, read from TOML.
//!
//! ```toml
//! input_size = 128
//! anchor_reference_size = 704     # optional: scales are multiplied by input_size / 704
//!
//! [[backbone]]                    # ordered; every conv is followed by ReLU
//! type = "conv"                   # or "pool" (max pool, kernel/stride default 2)
//! name = "conv1"
//! out_channels = 16
//! kernel = 3
//!
//! [inception]
//! width = 64                      # four branches of width / 4
//! dilation = 2
//! taps = ["conv3", "conv4"]       # backbone convs that get an inception block
//!
//! [[aif]]                         # aggregated features; lower/higher are optional
//! name = "AIF-1"
//! lower = "conv3"
//! current = "conv4"
//! higher = "conv5"
//! width = 64
//!
//! [attention]
//! enabled = true
//! source = "AIF-1"
//! conv_width = 16
//! scope = "all"                   # or "source_only"
//!
//! [[prediction_layers]]
//! name = "AIF-1"
//! source = "AIF-1"                # an aif name or an inception tap
//! stride = 8
//! scales = [69.1, 79.4, 89.6]
//! ```
//!
//! The remaining tables (`loss`, `matching`, `inference`, `optimizer`,
//! `augment`) have defaults for every key; see the structs below.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{LayerAnchorSpec, ScaleRole, DEFAULT_ASPECT_RATIOS};
use crate::error::{Error, Result};
use crate::geometry::IouMode;

pub const DESK_CONFIG: &str = include_str!("../../configs/desk.toml");
pub const FULL_SCALE_CONFIG: &str = include_str!("../../configs/full_scale.toml");

pub const INPUT_CHANNELS: usize = 3;

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneLayer {
    Conv {
        name: String,
        out_channels: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        dilation: usize,
    },
    Pool {
        #[serde(default = "two")]
        kernel: usize,
        #[serde(default = "two")]
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionConfig {
    pub width: usize,
    #[serde(default = "two")]
    pub dilation: usize,
    pub taps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AifConfig {
    pub name: String,
    #[serde(default)]
    pub lower: Option<String>,
    pub current: String,
    #[serde(default)]
    pub higher: Option<String>,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Gate every prediction layer with its own resized attention map.
    #[default]
    All,
    /// Gate only the layer the attention is computed from.
    SourceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub source: String,
    /// Width of the two 3x3 convolutions and of the upsampled map.
    pub conv_width: usize,
    #[serde(default)]
    pub scope: AttentionScope,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLayerConfig {
    pub name: String,
    pub source: String,
    pub stride: usize,
    pub scales: Vec<f64>,
    #[serde(default = "default_ratios")]
    pub aspect_ratios: Vec<f64>,
    #[serde(default = "default_roles")]
    pub orientations: Vec<ScaleRole>,
}

fn default_ratios() -> Vec<f64> {
    DEFAULT_ASPECT_RATIOS.to_vec()
}

fn default_roles() -> Vec<ScaleRole> {
    vec![ScaleRole::Height, ScaleRole::Width]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            loc: 1.0,
            attention: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub pos_threshold: f64,
    pub neg_pos_ratio: usize,
    /// Negatives kept for an image with no positive anchors.
    pub neg_floor: usize,
    /// Match on rotated overlap instead of the enclosing rectangle.
    pub rotated: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            pos_threshold: 0.5,
            neg_pos_ratio: 3,
            neg_floor: 32,
            rotated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub nms_mode: IouMode,
    /// Highest-scoring candidates passed to suppression.
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            conf_threshold: 0.7,
            nms_threshold: 0.3,
            nms_mode: IouMode::Rotated,
            top_k: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`.
    pub decay_step: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Number of leading backbone convolutions kept fixed.
    pub freeze_layers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            decay_step: 15_000,
            decay_factor: 0.1,
            weight_decay: 0.0,
            batch_size: 32,
            freeze_layers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Candidate minimum Jaccard overlaps between a sampled patch and some ground truth.
    pub min_overlaps: Vec<f64>,
    pub max_trials: usize,
    /// Patch side range relative to the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Patch aspect (w / h) range.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub mirror_prob: f64,
    /// Additive brightness jitter bound, in [0, 1] pixel units.
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub distort_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            min_overlaps: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            max_trials: 50,
            min_scale: 0.3,
            max_scale: 1.0,
            min_aspect: 0.5,
            max_aspect: 2.0,
            mirror_prob: 0.5,
            brightness_delta: 32.0 / 255.0,
            contrast_range: (0.8, 1.25),
            distort_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_size: usize,
    #[serde(default)]
    pub anchor_reference_size: Option<usize>,
    #[serde(default = "three")]
    pub head_kernel: usize,
    pub backbone: Vec<BackboneLayer>,
    pub inception: InceptionConfig,
    #[serde(default)]
    pub aif: Vec<AifConfig>,
    pub attention: AttentionConfig,
    pub prediction_layers: Vec<PredictionLayerConfig>,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

/// Stride and width of a named feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureInfo {
    pub stride: usize,
    pub channels: usize,
}

impl DetectorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DetectorConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// 128-pixel configuration used for training on a single CPU core.
    pub fn desk() -> Self {
        Self::from_toml(DESK_CONFIG).expect("bundled desk config is valid")
    }

    /// Seven prediction layers with the published default-box scales, 512-pixel input.
    pub fn full_scale() -> Self {
        Self::from_toml(FULL_SCALE_CONFIG).expect("bundled full-scale config is valid")
    }

    /// Backbone conv outputs keyed by name.
    pub fn backbone_features(&self) -> Result<BTreeMap<String, FeatureInfo>> {
        let mut out = BTreeMap::new();
        let mut stride = 1;
        for layer in &self.backbone {
            match layer {
                BackboneLayer::Conv {
                    name,
                    out_channels,
                    kernel,
                    stride: s,
                    dilation,
                } => {
                    if *out_channels == 0 || *kernel == 0 || *s == 0 || *dilation == 0 || kernel % 2 == 0 {
                        return Err(Error::Config(format!("backbone conv {name}: illegal geometry")));
                    }
                    stride *= s;
                    if out
                        .insert(
                            name.clone(),
                            FeatureInfo {
                                stride,
                                channels: *out_channels,
                            },
                        )
                        .is_some()
                    {
                        return Err(Error::Config(format!("duplicate backbone layer name {name}")));
                    }
                }
                BackboneLayer::Pool { kernel, stride: s } => {
                    if *kernel == 0 || *s == 0 {
                        return Err(Error::Config("backbone pool: kernel and stride must be >= 1".into()));
                    }
                    stride *= s;
                }
            }
        }
        Ok(out)
    }

    /// Every feature map a prediction layer or the attention branch may consume:
    /// inception outputs (named after their tap) and aggregated features.
    pub fn features(&self) -> Result<BTreeMap<String, FeatureInfo>> {
        let backbone = self.backbone_features()?;
        let mut out = BTreeMap::new();
        for tap in &self.inception.taps {
            let info = backbone
                .get(tap)
                .ok_or_else(|| Error::Config(format!("inception tap `{tap}` is not a backbone conv")))?;
            out.insert(
                tap.clone(),
                FeatureInfo {
                    stride: info.stride,
                    channels: self.inception.width,
                },
            );
        }
        for aif in &self.aif {
            let cur = out
                .get(&aif.current)
                .ok_or_else(|| Error::Config(format!("aif {}: `{}` is not an inception tap", aif.name, aif.current)))?
                .stride;
            if let Some(l) = &aif.lower {
                let s = out
                    .get(l)
                    .ok_or_else(|| Error::Config(format!("aif {}: `{l}` is not an inception tap", aif.name)))?
                    .stride;
                if s * 2 != cur {
                    return Err(Error::Config(format!(
                        "aif {}: lower layer must have half the stride",
                        aif.name
                    )));
                }
            }
            if let Some(h) = &aif.higher {
                let s = out
                    .get(h)
                    .ok_or_else(|| Error::Config(format!("aif {}: `{h}` is not an inception tap", aif.name)))?
                    .stride;
                if s != cur * 2 {
                    return Err(Error::Config(format!(
                        "aif {}: higher layer must have twice the stride",
                        aif.name
                    )));
                }
            }
            if aif.width == 0 {
                return Err(Error::Config(format!("aif {}: width must be >= 1", aif.name)));
            }
            if out
                .insert(
                    aif.name.clone(),
                    FeatureInfo {
                        stride: cur,
                        channels: aif.width,
                    },
                )
                .is_some()
            {
                return Err(Error::Config(format!(
                    "aif name {} clashes with another feature",
                    aif.name
                )));
            }
        }
        Ok(out)
    }

    /// Multiplier applied to configured scales.
    pub fn anchor_scale_factor(&self) -> f64 {
        self.anchor_reference_size
            .map_or(1.0, |r| self.input_size as f64 / r as f64)
    }

    pub fn anchor_specs(&self) -> Vec<LayerAnchorSpec> {
        let f = self.anchor_scale_factor();
        self.prediction_layers
            .iter()
            .map(|p| LayerAnchorSpec {
                layer_name: p.name.clone(),
                stride: p.stride,
                scales: p.scales.iter().map(|s| s * f).collect(),
                aspect_ratios: p.aspect_ratios.clone(),
                orientations: p.orientations.clone(),
            })
            .collect()
    }

    /// Whether prediction layer `name` is gated by the attention map.
    pub fn attention_gates(&self, layer: &PredictionLayerConfig) -> bool {
        self.attention.enabled
            && match self.attention.scope {
                AttentionScope::All => true,
                AttentionScope::SourceOnly => layer.source == self.attention.source,
            }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be >= 1".into()));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        if self.inception.width == 0 || !self.inception.width.is_multiple_of(4) {
            return Err(Error::Config("inception width must be a positive multiple of 4".into()));
        }
        if self.inception.dilation == 0 {
            return Err(Error::Config("inception dilation must be >= 1".into()));
        }
        let features = self.features()?;
        for (name, info) in &features {
            if !self.input_size.is_multiple_of(info.stride) {
                return Err(Error::Config(format!(
                    "input size {} not divisible by stride {} of {name}",
                    self.input_size, info.stride
                )));
            }
        }
        let att = features
            .get(&self.attention.source)
            .ok_or_else(|| Error::Config(format!("attention source `{}` unknown", self.attention.source)))?;
        if self.attention.conv_width == 0 {
            return Err(Error::Config("attention conv_width must be >= 1".into()));
        }
        let _ = att;
        if self.prediction_layers.is_empty() {
            return Err(Error::Config("no prediction layers".into()));
        }
        let mut last_stride = 0;
        for p in &self.prediction_layers {
            let info = features
                .get(&p.source)
                .ok_or_else(|| Error::Config(format!("prediction layer {}: unknown source `{}`", p.name, p.source)))?;
            if info.stride != p.stride {
                return Err(Error::Config(format!(
                    "prediction layer {}: configured stride {} but source has stride {}",
                    p.name, p.stride, info.stride
                )));
            }
            if p.stride <= last_stride {
                return Err(Error::Config(
                    "prediction layer strides must be strictly increasing".into(),
                ));
            }
            last_stride = p.stride;
        }
        if self
            .prediction_layers
            .iter()
            .enumerate()
            .any(|(i, p)| self.prediction_layers[..i].iter().any(|q| q.name == p.name))
        {
            return Err(Error::Config("duplicate prediction layer name".into()));
        }
        for spec in self.anchor_specs() {
            spec.validate()?;
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.inference.conf_threshold)
            || !unit(self.inference.nms_threshold)
            || !unit(self.matching.pos_threshold)
        {
            return Err(Error::Config("thresholds must lie in (0, 1)".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.batch_size == 0 || o.decay_step == 0 {
            return Err(Error::Config(
                "optimizer: need lr > 0, momentum in [0, 1), batch_size and decay_step >= 1".into(),
            ));
        }
        let a = &self.augment;
        if a.min_overlaps.iter().any(|v| !(0.0..=1.0).contains(v))
            || !(a.min_scale > 0.0 && a.min_scale <= a.max_scale && a.max_scale <= 1.0)
            || !(a.min_aspect > 0.0 && a.min_aspect <= a.max_aspect)
        {
            return Err(Error::Config("augment: inconsistent ranges".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        let desk = DetectorConfig::desk();
        assert_eq!(desk.input_size, 128);
        let strides: Vec<usize> = desk.prediction_layers.iter().map(|p| p.stride).collect();
        assert_eq!(strides, vec![8, 16, 32]);
        let full = DetectorConfig::full_scale();
        assert_eq!(full.prediction_layers.len(), 7);
        assert_eq!(full.anchor_scale_factor(), 1.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let desk = DetectorConfig::desk();
        let again = DetectorConfig::from_toml(&desk.to_toml().unwrap()).unwrap();
        assert_eq!(desk, again);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = DetectorConfig::desk();
        c.prediction_layers[1].stride = 8;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::desk();
        c.inference.conf_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = DetectorConfig::desk();
        c.attention.source = "nope".into();
        assert!(c.validate().is_err());
        assert!(DetectorConfig::from_toml("input_size = 1\nbogus = 3").is_err());
    }
}
