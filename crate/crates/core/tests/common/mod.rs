#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use textdet::anchors::{AnchorSet, Assignment};
use textdet::geometry::{iou_rotated, Detection, OrientedBox};

/// Uniform random box inside `[0, extent]^2`.
pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, rotated: bool) -> OrientedBox {
    let w = rng.gen_range(0.5..extent / 2.0);
    let h = rng.gen_range(0.5..extent / 2.0);
    let theta = if rotated { rng.gen_range(-3.2..3.2) } else { 0.0 };
    OrientedBox::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), w, h, theta).unwrap()
}

/// Point-in-rectangle by projecting onto the box axes.
fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - b.cx, y - b.cy);
    let (s, c) = (b.theta.sin(), b.theta.cos());
    (dx * c + dy * s).abs() <= b.w / 2.0 && (dy * c - dx * s).abs() <= b.h / 2.0
}

/// Monte-Carlo estimate of the overlap of two oriented boxes from `samples`
/// uniform points in the bounding square of both circumscribed circles.
pub fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ra = a.w.hypot(a.h) / 2.0;
    let rb = b.w.hypot(b.h) / 2.0;
    let (x0, x1) = ((a.cx - ra).min(b.cx - rb), (a.cx + ra).max(b.cx + rb));
    let (y0, y1) = ((a.cy - ra).min(b.cy - rb), (a.cy + ra).max(b.cy + rb));
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Suppression by repeated elimination: take the best remaining detection,
/// delete everything overlapping it above the threshold, repeat.
pub fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (k, (i, d)) in remaining.iter().enumerate() {
            let (bi, bd) = remaining[best];
            if d.score > bd.score || (d.score == bd.score && *i < bi) {
                best = k;
            }
        }
        let (_, top) = remaining.remove(best);
        remaining.retain(|(_, d)| iou_rotated(&top.bbox, &d.bbox).unwrap() <= thr);
        kept.push(top);
    }
    kept
}

/// Overlap of an axis-aligned anchor with the enclosing rectangle of a box,
/// computed from corner extents.
pub fn enclosing_overlap(anchor: &OrientedBox, gt: &OrientedBox) -> f64 {
    let xs = gt.corners().map(|c| c.0);
    let ys = gt.corners().map(|c| c.1);
    let (gx0, gx1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (gy0, gy1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (ax0, ax1) = (anchor.cx - anchor.w / 2.0, anchor.cx + anchor.w / 2.0);
    let (ay0, ay1) = (anchor.cy - anchor.h / 2.0, anchor.cy + anchor.h / 2.0);
    let iw = (ax1.min(gx1) - ax0.max(gx0)).max(0.0);
    let ih = (ay1.min(gy1) - ay0.max(gy0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / ((ax1 - ax0) * (ay1 - ay0) + (gx1 - gx0) * (gy1 - gy0) - inter)
}

/// Dense reference matcher: the full anchor x ground-truth overlap matrix,
/// then repeatedly the globally largest entry among unused rows and columns
/// (ties, up to a relative 1e-12, to the lower anchor, then the lower ground
/// truth), then thresholding
/// of every remaining row.
pub fn reference_match(anchors: &AnchorSet, gts: &[OrientedBox], thr: f64) -> Assignment {
    let n = anchors.boxes.len();
    let m: Vec<Vec<f64>> = anchors
        .boxes
        .iter()
        .map(|a| gts.iter().map(|g| enclosing_overlap(a, g)).collect())
        .collect();
    let mut matched = vec![None; n];
    let mut overlap = vec![0.0; n];
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; gts.len()];
    loop {
        let mut best: Option<(usize, usize)> = None;
        for a in 0..n {
            for j in 0..gts.len() {
                if row_used[a] || col_used[j] || m[a][j] <= 0.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((ba, bj)) => m[a][j] > m[ba][bj] * (1.0 + 1e-12),
                };
                if better {
                    best = Some((a, j));
                }
            }
        }
        let Some((a, j)) = best else { break };
        row_used[a] = true;
        col_used[j] = true;
        matched[a] = Some(j);
        overlap[a] = m[a][j];
    }
    for a in 0..n {
        if row_used[a] {
            continue;
        }
        let mut bj = None;
        for j in 0..gts.len() {
            if bj.is_none_or(|b: usize| m[a][j] > m[a][b] * (1.0 + 1e-12)) {
                bj = Some(j);
            }
        }
        if let Some(j) = bj {
            if m[a][j] >= thr {
                matched[a] = Some(j);
                overlap[a] = m[a][j];
            }
        }
    }
    Assignment { matched, overlap }
}

/// Largest number of detection/ground-truth pairs with overlap at least
/// `thr` that can be matched one-to-one, by exhaustive search.
pub fn optimal_match_count(ious: &[Vec<f64>], thr: f64) -> usize {
    fn go(i: usize, ious: &[Vec<f64>], thr: f64, used: &mut Vec<bool>) -> usize {
        if i == ious.len() {
            return 0;
        }
        let mut best = go(i + 1, ious, thr, used);
        for j in 0..used.len() {
            if !used[j] && ious[i][j] >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, ious, thr, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = ious.first().map_or(0, Vec::len);
    go(0, ious, thr, &mut vec![false; cols])
}
