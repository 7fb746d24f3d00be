//! Word-level precision / recall with greedy one-to-one matching.

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, IouMode, OrientedBox};

/// Matches of one image as `(detection index, gt index, iou)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageMatches {
    pub matches: Vec<(usize, usize, f64)>,
    pub detections: usize,
    pub ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
    pub per_image: Vec<ImageMatches>,
}

impl EvalReport {
    pub fn matched(&self) -> usize {
        self.per_image.iter().map(|m| m.matches.len()).sum()
    }

    /// `P R F` with four decimals.
    pub fn summary_line(&self) -> String {
        format!("{:.4} {:.4} {:.4}", self.precision, self.recall, self.f_measure)
    }

    /// One line per image: `index matched detections ground_truths`.
    pub fn per_image_report(&self) -> String {
        self.per_image
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{i:04} {} {} {}\n", m.matches.len(), m.detections, m.ground_truths))
            .collect()
    }
}

/// Detections are visited by descending score (ties by index); each claims
/// the unmatched ground truth with the highest overlap, provided it reaches
/// `iou_threshold`.
pub fn match_image(dets: &[Detection], gts: &[OrientedBox], iou_threshold: f64, mode: IouMode) -> Result<ImageMatches> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&dets[d].bbox, gt, mode)?;
            if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            taken[j] = true;
            matches.push((d, j, o));
        }
    }
    Ok(ImageMatches {
        matches,
        detections: dets.len(),
        ground_truths: gts.len(),
    })
}

/// Recall is matches over ground truths, precision matches over detections;
/// an empty denominator gives 0, and F is 0 when P + R is 0.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<OrientedBox>],
    iou_threshold: f64,
    mode: IouMode,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate_detections",
            format!("{} detection lists for {} images", dets.len(), gts.len()),
        ));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(
            "evaluate_detections",
            "iou threshold must lie in (0, 1)",
        ));
    }
    let per_image = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| match_image(d, g, iou_threshold, mode))
        .collect::<Result<Vec<_>>>()?;
    let m: usize = per_image.iter().map(|p| p.matches.len()).sum();
    let nd: usize = per_image.iter().map(|p| p.detections).sum();
    let ng: usize = per_image.iter().map(|p| p.ground_truths).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall = ratio(m, ng);
    let precision = ratio(m, nd);
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        recall,
        precision,
        f_measure,
        per_image,
    })
}
