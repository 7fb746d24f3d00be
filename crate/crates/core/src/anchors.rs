//! Default boxes, anchor/ground-truth matching and per-anchor training targets.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, iou_rotated, BoxOffsets, OrientedBox};
use crate::tensor::IGNORE_LABEL;

/// Aspect ratios shared by every prediction layer.
pub const DEFAULT_ASPECT_RATIOS: [f64; 8] = [0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 9.0, 11.0];

/// Which side of a default box the scale fixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRole {
    /// `h = scale`, `w = scale * ratio` (horizontal words).
    Height,
    /// `w = scale`, `h = scale * ratio` (vertical words).
    Width,
}

impl ScaleRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleRole::Height => "height",
            ScaleRole::Width => "width",
        }
    }
}

fn default_ratios() -> Vec<f64> {
    DEFAULT_ASPECT_RATIOS.to_vec()
}

fn default_roles() -> Vec<ScaleRole> {
    vec![ScaleRole::Height, ScaleRole::Width]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnchorSpec {
    pub layer_name: String,
    /// Input pixels per feature-map cell.
    pub stride: usize,
    /// Box scales in input pixels, strictly increasing.
    pub scales: Vec<f64>,
    #[serde(default = "default_ratios")]
    pub aspect_ratios: Vec<f64>,
    #[serde(default = "default_roles")]
    pub orientations: Vec<ScaleRole>,
}

impl LayerAnchorSpec {
    pub fn new(layer_name: impl Into<String>, stride: usize, scales: Vec<f64>) -> Self {
        LayerAnchorSpec {
            layer_name: layer_name.into(),
            stride,
            scales,
            aspect_ratios: default_ratios(),
            orientations: default_roles(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "layer_anchor_spec";
        if self.stride == 0 {
            return Err(Error::invalid(op, format!("{}: stride must be >= 1", self.layer_name)));
        }
        if self.scales.is_empty() || self.scales.windows(2).any(|w| !(w[0] < w[1])) || self.scales[0] <= 0.0 {
            return Err(Error::invalid(
                op,
                format!("{}: scales must be positive and strictly increasing", self.layer_name),
            ));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid(
                op,
                format!("{}: aspect ratios must be positive", self.layer_name),
            ));
        }
        if self.orientations.is_empty() {
            return Err(Error::invalid(
                op,
                format!("{}: no scale orientations", self.layer_name),
            ));
        }
        Ok(())
    }

    /// Distinct box shapes placed at every location, in head-channel order:
    /// scale-major, then ratio, then orientation. Shapes identical to an
    /// earlier one (ratio 1 in both orientations) are dropped.
    pub fn shapes(&self) -> Vec<AnchorShape> {
        let mut out: Vec<AnchorShape> = Vec::new();
        for &scale in &self.scales {
            for &ratio in &self.aspect_ratios {
                for &role in &self.orientations {
                    let (w, h) = match role {
                        ScaleRole::Height => (scale * ratio, scale),
                        ScaleRole::Width => (scale, scale * ratio),
                    };
                    if out.iter().any(|s| s.w == w && s.h == h) {
                        continue;
                    }
                    out.push(AnchorShape {
                        scale,
                        ratio,
                        role,
                        w,
                        h,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorShape {
    pub scale: f64,
    pub ratio: f64,
    pub role: ScaleRole,
    pub w: f64,
    pub h: f64,
}

/// Location of one layer's anchors inside the flat [`AnchorSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlot {
    pub name: String,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub shapes: Vec<AnchorShape>,
    /// Index of the first anchor of this layer.
    pub offset: usize,
}

impl LayerSlot {
    pub fn per_location(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w * self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All default boxes of a network, flattened as layer, row, column, shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<OrientedBox>,
    pub layers: Vec<LayerSlot>,
    pub image_size: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Text dump: one header per layer, then `layer location cx cy w h theta scale ratio role` per box.
    pub fn dump(&self, summary_only: bool) -> String {
        let mut s = String::new();
        for layer in &self.layers {
            let scales: Vec<f64> = {
                let mut v: Vec<f64> = layer.shapes.iter().map(|a| a.scale).collect();
                v.dedup();
                v
            };
            let _ = writeln!(
                s,
                "# layer {} stride {} grid {}x{} boxes_per_location {} scales {}",
                layer.name,
                layer.stride,
                layer.grid_h,
                layer.grid_w,
                layer.per_location(),
                scales.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
            );
            if summary_only {
                continue;
            }
            for (i, b) in self.boxes[layer.range()].iter().enumerate() {
                let shape = &layer.shapes[i % layer.per_location()];
                let _ = writeln!(
                    s,
                    "{} {} {} {} {} {} {} {} {} {}",
                    layer.name,
                    i / layer.per_location(),
                    b.cx,
                    b.cy,
                    b.w,
                    b.h,
                    b.theta,
                    shape.scale,
                    shape.ratio,
                    shape.role.as_str()
                );
            }
        }
        s
    }
}

/// Materialises every layer's default boxes centred at `(i + 0.5) * stride`.
pub fn generate_default_boxes(specs: &[LayerAnchorSpec], image_size: usize) -> Result<AnchorSet> {
    let mut boxes = Vec::new();
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        if !image_size.is_multiple_of(spec.stride) {
            return Err(Error::invalid(
                "generate_default_boxes",
                format!(
                    "image size {image_size} not divisible by stride {} of {}",
                    spec.stride, spec.layer_name
                ),
            ));
        }
        let grid = image_size / spec.stride;
        let shapes = spec.shapes();
        let offset = boxes.len();
        for y in 0..grid {
            for x in 0..grid {
                let cx = (x as f64 + 0.5) * spec.stride as f64;
                let cy = (y as f64 + 0.5) * spec.stride as f64;
                boxes.extend(shapes.iter().map(|s| OrientedBox::axis_aligned(cx, cy, s.w, s.h)));
            }
        }
        layers.push(LayerSlot {
            name: spec.layer_name.clone(),
            stride: spec.stride,
            grid_h: grid,
            grid_w: grid,
            shapes,
            offset,
        });
    }
    Ok(AnchorSet {
        boxes,
        layers,
        image_size,
    })
}

/// Per-anchor ground-truth assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Index of the matched ground truth, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Overlap with the matched ground truth (0 for background).
    pub overlap: Vec<f64>,
}

impl Assignment {
    pub fn positive_count(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Overlap between an (axis-aligned) anchor and a ground-truth box.
pub fn anchor_overlap(anchor: &OrientedBox, gt: &OrientedBox, rotated: bool) -> f64 {
    if rotated {
        iou_rotated(anchor, gt).unwrap_or(0.0)
    } else {
        let e = gt.enclosing();
        let ix =
            (anchor.cx + anchor.w / 2.0).min(e.cx + e.w / 2.0) - (anchor.cx - anchor.w / 2.0).max(e.cx - e.w / 2.0);
        let iy =
            (anchor.cy + anchor.h / 2.0).min(e.cy + e.h / 2.0) - (anchor.cy - anchor.h / 2.0).max(e.cy - e.h / 2.0);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (anchor.w * anchor.h + e.w * e.h - inter)
    }
}

/// Overlaps closer than this relative amount count as equal, so that
/// mirror-image anchors tie regardless of rounding.
pub const TIE_TOLERANCE: f64 = 1e-12;

fn clearly_greater(v: f64, best: f64) -> bool {
    best == f64::NEG_INFINITY || v > best + TIE_TOLERANCE * best.abs()
}

/// Assigns ground truths to anchors.
///
/// First every ground truth claims its best anchor (greedy bipartite on the
/// globally highest remaining overlap, ties to the lower anchor and then the
/// lower ground-truth index, see [`TIE_TOLERANCE`]). Every other anchor whose best overlap reaches
/// `pos_threshold` becomes positive for that ground truth.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[OrientedBox],
    pos_threshold: f64,
    rotated: bool,
) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(Error::invalid("match_anchors", "empty anchor set"));
    }
    if !(pos_threshold > 0.0 && pos_threshold < 1.0) {
        return Err(Error::invalid(
            "match_anchors",
            format!("threshold {pos_threshold} outside (0, 1)"),
        ));
    }
    let n = anchors.len();
    let g = gts.len();
    let mut matched = vec![None; n];
    let mut overlap = vec![0.0; n];
    if g == 0 {
        return Ok(Assignment { matched, overlap });
    }
    // Only anchors that touch some ground truth matter; keep them sparse.
    let mut touching: Vec<(usize, Vec<f64>)> = Vec::new();
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let row: Vec<f64> = gts.iter().map(|gt| anchor_overlap(anchor, gt, rotated)).collect();
        if row.iter().any(|&v| v > 0.0) {
            touching.push((a, row));
        }
    }

    let mut gt_done = vec![false; g];
    let mut anchor_taken = vec![false; touching.len()];
    for _ in 0..g {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ti, (_, row)) in touching.iter().enumerate() {
            if anchor_taken[ti] {
                continue;
            }
            for (j, &v) in row.iter().enumerate() {
                if gt_done[j] || v <= 0.0 {
                    continue;
                }
                if best.is_none_or(|(bv, _, _)| clearly_greater(v, bv)) {
                    best = Some((v, ti, j));
                }
            }
        }
        let Some((v, ti, j)) = best else { break };
        anchor_taken[ti] = true;
        gt_done[j] = true;
        let a = touching[ti].0;
        matched[a] = Some(j);
        overlap[a] = v;
    }

    for (ti, (a, row)) in touching.iter().enumerate() {
        if anchor_taken[ti] {
            continue;
        }
        let (j, v) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, &v)| {
            if clearly_greater(v, acc.1) {
                (j, v)
            } else {
                acc
            }
        });
        if v >= pos_threshold {
            matched[*a] = Some(j);
            overlap[*a] = v;
        }
    }
    Ok(Assignment { matched, overlap })
}

/// Classification labels and regression targets for every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    /// 1 text, 0 retained background, [`IGNORE_LABEL`] otherwise.
    pub labels: Vec<i32>,
    /// Present exactly for anchors labelled 1.
    pub offsets: Vec<Option<BoxOffsets>>,
    pub positive_count: usize,
    pub negative_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    /// Retained negatives per positive.
    pub neg_pos_ratio: usize,
    /// Negatives retained for an image without positives.
    pub neg_floor: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            neg_pos_ratio: 3,
            neg_floor: 32,
        }
    }
}

/// Builds targets with hard negative mining: background anchors are ranked
/// by `negative_loss` (their current background classification loss, higher
/// first, ties to the lower index) and only the top ones are kept.
pub fn build_targets(
    assignment: &Assignment,
    anchors: &AnchorSet,
    gts: &[OrientedBox],
    negative_loss: &[f64],
    mining: MiningConfig,
) -> Result<TargetBundle> {
    let n = anchors.len();
    if assignment.matched.len() != n {
        return Err(Error::shape(
            "build_targets",
            "assignment length",
            n,
            assignment.matched.len(),
        ));
    }
    if negative_loss.len() != n {
        return Err(Error::shape(
            "build_targets",
            "negative loss length",
            n,
            negative_loss.len(),
        ));
    }
    let mut labels = vec![IGNORE_LABEL; n];
    let mut offsets = vec![None; n];
    let mut positives = 0;
    let mut candidates = Vec::new();
    for (a, m) in assignment.matched.iter().enumerate() {
        match m {
            Some(j) => {
                let gt = gts
                    .get(*j)
                    .ok_or_else(|| Error::invalid("build_targets", format!("assignment references missing gt {j}")))?;
                labels[a] = 1;
                offsets[a] = Some(encode_offsets(gt, &anchors.boxes[a])?);
                positives += 1;
            }
            None => candidates.push(a),
        }
    }
    let keep = if positives > 0 {
        mining.neg_pos_ratio * positives
    } else {
        mining.neg_floor
    }
    .min(candidates.len());
    let key = |a: usize| {
        if negative_loss[a].is_nan() {
            f64::NEG_INFINITY
        } else {
            negative_loss[a]
        }
    };
    if keep < candidates.len() {
        candidates.select_nth_unstable_by(keep, |&x, &y| {
            key(y).partial_cmp(&key(x)).unwrap_or(Ordering::Equal).then(x.cmp(&y))
        });
    }
    for &a in &candidates[..keep] {
        labels[a] = 0;
    }
    Ok(TargetBundle {
        labels,
        offsets,
        positive_count: positives,
        negative_count: keep,
    })
}
