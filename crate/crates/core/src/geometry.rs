//! Oriented word boxes: overlap measures, suppression and anchor-relative offsets.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Areas below this are treated as degenerate.
const MIN_AREA: f64 = 1e-12;

/// Rotated rectangle in image pixels. `theta` is the counter-image-axis
/// rotation in radians, normalised into `(-pi/2, pi/2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Maps any angle into `(-pi/2, pi/2]`. Word boxes are symmetric under a
/// half turn, so this loses nothing.
pub fn normalize_theta(theta: f64) -> f64 {
    if theta > -FRAC_PI_2 && theta <= FRAC_PI_2 {
        return theta;
    }
    let mut t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t <= -FRAC_PI_2 {
        t += PI;
    }
    t
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = OrientedBox {
            cx,
            cy,
            w,
            h,
            theta: normalize_theta(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn axis_aligned(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        OrientedBox {
            cx,
            cy,
            w,
            h,
            theta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid("oriented_box", format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in clockwise order on screen (y pointing down), starting at
    /// the box-local top-left.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| (self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    /// Smallest axis-aligned rectangle containing the box.
    pub fn enclosing(&self) -> OrientedBox {
        if self.theta == 0.0 {
            return *self;
        }
        let (s, c) = self.theta.sin_cos();
        let w = self.w * c.abs() + self.h * s.abs();
        let h = self.w * s.abs() + self.h * c.abs();
        OrientedBox::axis_aligned(self.cx, self.cy, w, h)
    }

    /// `(x_min, y_min, x_max, y_max)` of the enclosing rectangle.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let e = self.enclosing();
        (e.cx - e.w / 2.0, e.cy - e.h / 2.0, e.cx + e.w / 2.0, e.cy + e.h / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    pub fn scaled(&self, s: f64) -> OrientedBox {
        OrientedBox {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
            theta: self.theta,
        }
    }

    /// ICDAR-2015 style `x1,y1,...,x4,y4`, clockwise.
    pub fn to_icdar_line(&self) -> String {
        self.corners()
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for OrientedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            self.cx, self.cy, self.w, self.h, self.theta
        )
    }
}

/// A scored word box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: OrientedBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("detection", format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, score })
    }
}

impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6}", self.bbox, self.score)
    }
}

/// One line of a box or detection file: `cx cy w h theta [score]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLine {
    pub bbox: OrientedBox,
    pub score: Option<f64>,
}

impl FromStr for BoxLine {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 5 && vals.len() != 6 {
            return Err(format!("expected 5 or 6 fields, found {}", vals.len()));
        }
        let bbox = OrientedBox::new(vals[0], vals[1], vals[2], vals[3], vals[4]).map_err(|e| e.to_string())?;
        Ok(BoxLine {
            bbox,
            score: vals.get(5).copied(),
        })
    }
}

/// Overlap measure used by suppression, matching and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Exact polygon overlap of the rotated rectangles.
    #[default]
    Rotated,
    /// Overlap of the axis-aligned enclosing rectangles.
    Enclosing,
}

pub fn iou_axis_aligned(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    if a.theta != 0.0 || b.theta != 0.0 {
        return Err(Error::invalid(
            "iou_axis_aligned",
            "boxes must have theta = 0; use iou_rotated for oriented boxes",
        ));
    }
    Ok(aabb_iou(a, b))
}

fn aabb_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice / 2.0
}

/// Clips `subject` against the convex polygon `clip` (Sutherland-Hodgman).
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let orient = polygon_area(clip).signum();
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let inside = |p: (f64, f64)| orient * cross(e0, e1, p) >= 0.0;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let d0 = cross(e0, e1, prev);
                let d1 = cross(e0, e1, cur);
                let t = d0 / (d0 - d1);
                out.push((prev.0 + t * (cur.0 - prev.0), prev.1 + t * (cur.1 - prev.1)));
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

/// Exact IoU of two rotated rectangles via convex polygon clipping.
pub fn iou_rotated(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.area() > MIN_AREA) {
            return Err(Error::invalid("iou_rotated", format!("degenerate box {bx:?}")));
        }
    }
    if a.theta == 0.0 && b.theta == 0.0 {
        return Ok(aabb_iou(a, b));
    }
    // Disjoint circumcircles cannot overlap.
    let ra = 0.5 * a.w.hypot(a.h);
    let rb = 0.5 * b.w.hypot(b.h);
    if (a.cx - b.cx).hypot(a.cy - b.cy) >= ra + rb {
        return Ok(0.0);
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).abs();
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn iou(a: &OrientedBox, b: &OrientedBox, mode: IouMode) -> Result<f64> {
    match mode {
        IouMode::Rotated => iou_rotated(a, b),
        IouMode::Enclosing => Ok(aabb_iou(&a.enclosing(), &b.enclosing())),
    }
}

/// Greedy non-maximum suppression with rotated overlap.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_with(dets, iou_threshold, IouMode::Rotated)
}

/// Greedy suppression: visit by descending score (ties by input order) and
/// keep a detection iff its overlap with every kept one is `<= iou_threshold`.
pub fn nms_with(dets: &[Detection], iou_threshold: f64, mode: IouMode) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| iou(&k.bbox, &d.bbox, mode).unwrap_or(0.0) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Regression target of a box relative to an axis-aligned anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxOffsets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub ttheta: f64,
}

impl BoxOffsets {
    pub fn to_array(self) -> [f64; 5] {
        [self.tx, self.ty, self.tw, self.th, self.ttheta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        BoxOffsets {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
            ttheta: a[4],
        }
    }
}

pub fn encode_offsets(gt: &OrientedBox, anchor: &OrientedBox) -> Result<BoxOffsets> {
    if anchor.theta != 0.0 {
        return Err(Error::invalid("encode_offsets", "anchor must be axis-aligned"));
    }
    if gt.w <= 0.0 || gt.h <= 0.0 || anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::invalid("encode_offsets", "box sizes must be positive"));
    }
    Ok(BoxOffsets {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
        ttheta: gt.theta,
    })
}

pub fn decode_offsets(offsets: &BoxOffsets, anchor: &OrientedBox) -> OrientedBox {
    OrientedBox {
        cx: anchor.cx + offsets.tx * anchor.w,
        cy: anchor.cy + offsets.ty * anchor.h,
        w: anchor.w * offsets.tw.exp(),
        h: anchor.h * offsets.th.exp(),
        theta: normalize_theta(anchor.theta + offsets.ttheta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_cases() {
        let a = OrientedBox::axis_aligned(1.0, 1.0, 2.0, 2.0);
        let b = OrientedBox::axis_aligned(2.0, 1.0, 2.0, 2.0);
        assert!((iou_axis_aligned(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_axis_aligned(&a, &a).unwrap(), 1.0);
        let far = OrientedBox::axis_aligned(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou_axis_aligned(&a, &far).unwrap(), 0.0);
        let rot = OrientedBox::new(1.0, 1.0, 2.0, 2.0, 0.1).unwrap();
        assert!(iou_axis_aligned(&a, &rot).is_err());
    }

    #[test]
    fn rotated_square_analytic() {
        let a = OrientedBox::axis_aligned(0.0, 0.0, 1.0, 1.0);
        let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4).unwrap();
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let want = inter / (2.0 - inter);
        assert!((iou_rotated(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn rotated_identical_and_degenerate() {
        let a = OrientedBox::new(3.0, 4.0, 5.0, 1.5, 0.7).unwrap();
        assert!((iou_rotated(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let thin = OrientedBox { w: 1e-9, h: 1e-9, ..a };
        assert!(iou_rotated(&a, &thin).is_err());
    }

    #[test]
    fn theta_normalisation() {
        assert_eq!(normalize_theta(PI), 0.0);
        assert_eq!(normalize_theta(-FRAC_PI_2), FRAC_PI_2);
        assert_eq!(normalize_theta(FRAC_PI_2), FRAC_PI_2);
        assert!((normalize_theta(3.0 * PI + 0.25) - 0.25).abs() < 1e-12);
        let d = decode_offsets(
            &BoxOffsets {
                ttheta: PI,
                ..Default::default()
            },
            &OrientedBox::axis_aligned(0.0, 0.0, 1.0, 1.0),
        );
        assert_eq!(d.theta, 0.0);
    }

    #[test]
    fn offsets_known_values() {
        let anchor = OrientedBox::axis_aligned(10.0, 10.0, 4.0, 2.0);
        let gt = OrientedBox::axis_aligned(11.0, 10.0, 8.0, 2.0);
        let o = encode_offsets(&gt, &anchor).unwrap();
        assert_eq!(o.tx, 0.25);
        assert_eq!(o.ty, 0.0);
        assert!((o.tw - 2f64.ln()).abs() < 1e-15);
        assert_eq!((o.th, o.ttheta), (0.0, 0.0));
        assert_eq!(encode_offsets(&anchor, &anchor).unwrap(), BoxOffsets::default());
        assert_eq!(decode_offsets(&BoxOffsets::default(), &anchor), anchor);
    }

    #[test]
    fn nms_small_cases() {
        let a = OrientedBox::axis_aligned(1.0, 1.0, 2.0, 2.0);
        let d = Detection::new(a, 0.9).unwrap();
        assert_eq!(nms(&[d], 0.3), vec![d]);
        // IoU 0.5 between two 2x2 boxes offset by 2/3.
        let b = OrientedBox::axis_aligned(1.0 + 2.0 / 3.0, 1.0, 2.0, 2.0);
        assert!((iou_rotated(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let lo = Detection::new(b, 0.8).unwrap();
        assert_eq!(nms(&[lo, d], 0.3), vec![d]);
    }

    #[test]
    fn box_line_parsing() {
        let l: BoxLine = "10 20 30 8 0.1 0.95".parse().unwrap();
        assert_eq!(l.score, Some(0.95));
        assert!("1 2 3".parse::<BoxLine>().is_err());
        assert!("1 2 -3 4 0".parse::<BoxLine>().is_err());
        let round: BoxLine = l.bbox.to_string().parse().unwrap();
        assert!((round.bbox.w - 30.0).abs() < 1e-6);
    }

    #[test]
    fn icdar_corners_clockwise() {
        let b = OrientedBox::axis_aligned(5.0, 5.0, 4.0, 2.0);
        assert_eq!(b.to_icdar_line(), "3.00,4.00,7.00,4.00,7.00,6.00,3.00,6.00");
    }
}
