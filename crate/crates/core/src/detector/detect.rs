use crate::error::Result;
use crate::geometry::{decode_offsets, nms_with, BoxOffsets, Detection, OrientedBox};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

use super::config::InferenceConfig;
use super::model::{Detector, ForwardOutput};

/// Bound on decoded log size ratios, so a wild regression cannot overflow.
const MAX_LOG_RATIO: f64 = 8.0;

/// Decodes every anchor of image `n` whose text probability reaches the
/// threshold, keeps the `top_k` best, clips them to the image and suppresses
/// overlaps.
pub fn decode_detections<T: Scalar>(
    det: &Detector,
    out: &ForwardOutput<T>,
    n: usize,
    inference: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let anchors = det.anchors();
    let size = det.input_size() as f64;
    let mut cands: Vec<(f64, usize, BoxOffsets)> = Vec::new();
    for (layer, slot) in out.layers.iter().zip(&anchors.layers) {
        let a_n = slot.per_location();
        for y in 0..slot.grid_h {
            for x in 0..slot.grid_w {
                for a in 0..a_n {
                    let l0 = layer.cls_logit(n, y, x, a, 0).as_f64();
                    let l1 = layer.cls_logit(n, y, x, a, 1).as_f64();
                    let score = 1.0 / (1.0 + (l0 - l1).exp());
                    if score < inference.conf_threshold {
                        continue;
                    }
                    let o: [f64; 5] = std::array::from_fn(|j| layer.loc_offset(n, y, x, a, j).as_f64());
                    let idx = slot.offset + (y * slot.grid_w + x) * a_n + a;
                    cands.push((score, idx, BoxOffsets::from_array(o)));
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    cands.truncate(inference.top_k);
    let mut dets = Vec::with_capacity(cands.len());
    for (score, idx, mut o) in cands {
        if !o.to_array().iter().all(|v| v.is_finite()) {
            continue;
        }
        o.tw = o.tw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        o.th = o.th.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let b = decode_offsets(&o, &anchors.boxes[idx]);
        if let Some(b) = clip_box(&b, size) {
            dets.push(Detection::new(b, score.clamp(0.0, 1.0))?);
        }
    }
    Ok(nms_with(&dets, inference.nms_threshold, inference.nms_mode))
}

/// Axis-aligned boxes are intersected with the image; rotated boxes keep
/// their shape and have the centre clamped inside. Boxes that vanish are dropped.
pub fn clip_box(b: &OrientedBox, size: f64) -> Option<OrientedBox> {
    if b.theta == 0.0 {
        let (x0, y0, x1, y1) = b.extent();
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(size), y1.min(size));
        if x1 - x0 < 1e-6 || y1 - y0 < 1e-6 {
            return None;
        }
        return Some(OrientedBox::axis_aligned(
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0,
            x1 - x0,
            y1 - y0,
        ));
    }
    Some(OrientedBox {
        cx: b.cx.clamp(0.0, size),
        cy: b.cy.clamp(0.0, size),
        ..*b
    })
}

/// Runs the network on each image and returns its detections.
pub fn detect<T: Scalar>(
    det: &Detector,
    images: &[&Tensor<T>],
    params: &ModelParams<T>,
    inference: &InferenceConfig,
) -> Result<Vec<Vec<Detection>>> {
    let out = det.forward(images, params)?;
    (0..images.len())
        .map(|n| decode_detections(det, &out, n, inference))
        .collect()
}
