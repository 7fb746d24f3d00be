use crate::anchors::{build_targets, match_anchors, AnchorSet, MiningConfig, TargetBundle};
use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::config::{LossWeights, MatchingConfig};
use super::model::ForwardVars;

/// Scalar loss terms of one evaluation, already weighted into `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub cls: f64,
    pub loc: f64,
    pub attention: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub loc: Option<Var>,
    pub attention: Option<Var>,
}

/// Background cross-entropy `-ln softmax_0` of every anchor of image `n`, in
/// anchor-set order.
pub fn background_losses<T: Scalar>(anchors: &AnchorSet, cls: &[&Tensor<T>], n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; anchors.len()];
    if cls.len() != anchors.layers.len() {
        return Err(Error::shape(
            "background_losses",
            "prediction layers",
            anchors.layers.len(),
            cls.len(),
        ));
    }
    for (slot, t) in anchors.layers.iter().zip(cls) {
        let a_n = slot.per_location();
        for y in 0..slot.grid_h {
            for x in 0..slot.grid_w {
                for a in 0..a_n {
                    let l0 = t.at(n, 2 * a, y, x).as_f64();
                    let l1 = t.at(n, 2 * a + 1, y, x).as_f64();
                    let m = l0.max(l1);
                    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                    out[slot.offset + (y * slot.grid_w + x) * a_n + a] = lse - l0;
                }
            }
        }
    }
    Ok(out)
}

/// Matches and mines every image of a batch against the current classifier outputs.
pub fn batch_targets<T: Scalar>(
    anchors: &AnchorSet,
    cls: &[&Tensor<T>],
    gts: &[Vec<OrientedBox>],
    matching: &MatchingConfig,
) -> Result<Vec<TargetBundle>> {
    let mining = MiningConfig {
        neg_pos_ratio: matching.neg_pos_ratio,
        neg_floor: matching.neg_floor,
    };
    gts.iter()
        .enumerate()
        .map(|(n, boxes)| {
            let assignment = match_anchors(anchors, boxes, matching.pos_threshold, matching.rotated)?;
            let neg = background_losses(anchors, cls, n)?;
            build_targets(&assignment, anchors, boxes, &neg, mining)
        })
        .collect()
}

/// Adds the weighted detection and attention losses to `g`.
///
/// Classification (positives plus mined negatives) and localisation are both
/// divided by the number of positive anchors of the batch, falling back to the
/// negative count for batches without text. Attention is averaged per pixel.
/// `masks` holds one `(h, w)` binary map per image, concatenated.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    anchors: &AnchorSet,
    out: &ForwardVars,
    targets: &[TargetBundle],
    masks: Option<&[T]>,
    weights: &LossWeights,
) -> Result<(LossVars, LossComponents)> {
    let positives: usize = targets.iter().map(|t| t.positive_count).sum();
    let negatives: usize = targets.iter().map(|t| t.negative_count).sum();
    if positives + negatives == 0 {
        return Err(Error::invalid(
            "total_loss",
            "no positive and no retained negative anchors",
        ));
    }
    if out.cls.len() != anchors.layers.len() || out.loc.len() != anchors.layers.len() {
        return Err(Error::shape(
            "total_loss",
            "prediction layers",
            anchors.layers.len(),
            out.cls.len(),
        ));
    }
    let batch = targets.len();
    for t in targets {
        if t.labels.len() != anchors.len() {
            return Err(Error::shape(
                "total_loss",
                "target length",
                anchors.len(),
                t.labels.len(),
            ));
        }
    }

    let cls_norm = T::lit(if positives > 0 { positives } else { negatives } as f64);
    let loc_norm = T::lit(positives.max(1) as f64);
    let mut cls_terms = Vec::new();
    let mut loc_terms = Vec::new();
    for (li, slot) in anchors.layers.iter().enumerate() {
        let a_n = slot.per_location();
        let (gh, gw) = (slot.grid_h, slot.grid_w);
        let cs = g.shape(out.cls[li]);
        if cs.n != batch {
            return Err(Error::shape("total_loss", "batch size", batch, cs.n));
        }
        let plane = gh * gw;
        let mut labels = vec![0i32; batch * a_n * plane];
        let mut target = vec![T::zero(); batch * 5 * a_n * plane];
        let mut weight = vec![T::zero(); batch * 5 * a_n * plane];
        let mut layer_pos = 0;
        for (n, t) in targets.iter().enumerate() {
            for y in 0..gh {
                for x in 0..gw {
                    let cell = y * gw + x;
                    for a in 0..a_n {
                        let idx = slot.offset + cell * a_n + a;
                        labels[(n * a_n + a) * plane + cell] = t.labels[idx];
                        if let Some(o) = &t.offsets[idx] {
                            layer_pos += 1;
                            for (j, v) in o.to_array().into_iter().enumerate() {
                                let k = (n * 5 * a_n + 5 * a + j) * plane + cell;
                                target[k] = T::lit(v);
                                weight[k] = T::one();
                            }
                        }
                    }
                }
            }
        }
        cls_terms.push((g.softmax_cross_entropy(out.cls[li], labels, 2, cls_norm)?, T::one()));
        if layer_pos > 0 {
            loc_terms.push((g.smooth_l1(out.loc[li], target, weight, loc_norm)?, T::one()));
        }
    }
    let cls = g.weighted_sum(&cls_terms)?;
    let loc = if loc_terms.is_empty() {
        None
    } else {
        Some(g.weighted_sum(&loc_terms)?)
    };
    let attention = match (out.alpha, masks) {
        (Some(alpha), Some(m)) => Some(g.prob_cross_entropy(alpha, m.to_vec())?),
        (Some(_), None) => {
            return Err(Error::invalid(
                "total_loss",
                "attention is enabled but no masks were given",
            ))
        }
        _ => None,
    };

    let mut terms = vec![(cls, T::lit(weights.cls))];
    terms.extend(loc.map(|l| (l, T::lit(weights.loc))));
    terms.extend(attention.map(|a| (a, T::lit(weights.attention))));
    let total = g.weighted_sum(&terms)?;

    let comps = LossComponents {
        cls: g.scalar(cls).as_f64(),
        loc: loc.map_or(0.0, |l| g.scalar(l).as_f64()),
        attention: attention.map_or(0.0, |a| g.scalar(a).as_f64()),
        total: g.scalar(total).as_f64(),
        positives,
        negatives,
    };
    Ok((
        LossVars {
            total,
            cls,
            loc,
            attention,
        },
        comps,
    ))
}
