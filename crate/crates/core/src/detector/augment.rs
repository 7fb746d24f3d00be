//! Training-time sample augmentation: overlap-constrained patch sampling,
//! resizing, horizontal mirroring and colour jitter.

use rand::Rng;

use crate::error::Result;
use crate::geometry::{iou_rotated, normalize_theta, OrientedBox};
use crate::tensor::{resize_bilinear, Shape, Tensor};
use crate::toolkit::SceneSample;

use super::config::AugmentConfig;

/// Integer crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Patch {
    pub fn as_box(&self) -> OrientedBox {
        OrientedBox::axis_aligned(
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
            self.w as f64,
            self.h as f64,
        )
    }

    fn contains_centre(&self, b: &OrientedBox) -> bool {
        b.cx > self.x as f64
            && b.cx < (self.x + self.w) as f64
            && b.cy > self.y as f64
            && b.cy < (self.y + self.h) as f64
    }
}

/// What [`augment_sample_with_record`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecord {
    /// Drawn minimum overlap, `None` when patch sampling was disabled.
    pub min_overlap: Option<f64>,
    pub patch: Patch,
    /// True when no trial met the constraint and the whole image was used.
    pub fallback: bool,
    /// Best overlap between the patch and any source box.
    pub best_overlap: f64,
    pub mirrored: bool,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

pub fn augment_sample<R: Rng>(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    out_size: usize,
    rng: &mut R,
) -> Result<SceneSample> {
    Ok(augment_sample_with_record(sample, cfg, out_size, rng)?.0)
}

pub fn augment_sample_with_record<R: Rng>(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    out_size: usize,
    rng: &mut R,
) -> Result<(SceneSample, AugmentRecord)> {
    let (iw, ih) = (sample.width(), sample.height());
    let whole = Patch {
        x: 0,
        y: 0,
        w: iw,
        h: ih,
    };
    let mut record = AugmentRecord {
        min_overlap: None,
        patch: whole,
        fallback: false,
        best_overlap: best_overlap(&whole, &sample.boxes),
        mirrored: false,
        brightness: None,
        contrast: None,
    };
    if !cfg.min_overlaps.is_empty() {
        let m = cfg.min_overlaps[rng.gen_range(0..cfg.min_overlaps.len())];
        record.min_overlap = Some(m);
        match sample_patch(sample, cfg, m, rng) {
            Some((p, o)) => {
                record.patch = p;
                record.best_overlap = o;
            }
            None => record.fallback = true,
        }
    }
    let mut out = crop_and_resize(sample, record.patch, out_size)?;
    if rng.gen_bool(cfg.mirror_prob.clamp(0.0, 1.0)) {
        out = mirror(&out)?;
        record.mirrored = true;
    }
    let p = cfg.distort_prob.clamp(0.0, 1.0);
    if rng.gen_bool(p) && cfg.brightness_delta > 0.0 {
        let d = rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta);
        record.brightness = Some(d);
    }
    if rng.gen_bool(p) && cfg.contrast_range.0 < cfg.contrast_range.1 {
        let c = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1);
        record.contrast = Some(c);
    }
    if record.brightness.is_some() || record.contrast.is_some() {
        let d = record.brightness.unwrap_or(0.0) as f32;
        let c = record.contrast.unwrap_or(1.0) as f32;
        out.image = out.image.map(|v| ((v + d) * c).clamp(0.0, 1.0));
    }
    Ok((out, record))
}

fn best_overlap(p: &Patch, boxes: &[OrientedBox]) -> f64 {
    let pb = p.as_box();
    boxes
        .iter()
        .filter_map(|b| iou_rotated(&pb, b).ok())
        .fold(0.0, f64::max)
}

/// Up to `max_trials` random patches; the first whose best overlap reaches
/// `min_overlap` and which keeps at least one box centre wins.
fn sample_patch<R: Rng>(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    min_overlap: f64,
    rng: &mut R,
) -> Option<(Patch, f64)> {
    if sample.boxes.is_empty() {
        return None;
    }
    let (iw, ih) = (sample.width() as f64, sample.height() as f64);
    for _ in 0..cfg.max_trials {
        let scale = rng.gen_range(cfg.min_scale..=cfg.max_scale);
        let aspect = rng.gen_range(cfg.min_aspect..=cfg.max_aspect);
        let w = (scale * aspect.sqrt() * iw).round();
        let h = (scale / aspect.sqrt() * ih).round();
        if w < 1.0 || h < 1.0 || w > iw || h > ih {
            continue;
        }
        let (w, h) = (w as usize, h as usize);
        let x = rng.gen_range(0..=sample.width() - w);
        let y = rng.gen_range(0..=sample.height() - h);
        let p = Patch { x, y, w, h };
        let o = best_overlap(&p, &sample.boxes);
        if o >= min_overlap && sample.boxes.iter().any(|b| p.contains_centre(b)) {
            return Some((p, o));
        }
    }
    None
}

/// Maps an oriented box through `(x, y) -> ((x - ox) * sx, (y - oy) * sy)`.
/// Non-uniform scaling turns a rotated rectangle into a parallelogram; the
/// result keeps the transformed width axis and the transformed area.
fn transform_box(b: &OrientedBox, ox: f64, oy: f64, sx: f64, sy: f64) -> OrientedBox {
    let cx = (b.cx - ox) * sx;
    let cy = (b.cy - oy) * sy;
    if b.theta == 0.0 {
        return OrientedBox::axis_aligned(cx, cy, b.w * sx, b.h * sy);
    }
    let (s, c) = b.theta.sin_cos();
    let (ux, uy) = (b.w * c * sx, b.w * s * sy);
    let w = ux.hypot(uy);
    let h = b.w * b.h * sx * sy / w;
    OrientedBox {
        cx,
        cy,
        w,
        h,
        theta: normalize_theta(uy.atan2(ux)),
    }
}

/// Crops `patch`, keeps boxes whose centre lies inside it (axis-aligned ones
/// clipped to the patch) and resizes to `out_size` square. The image is
/// resampled bilinearly, the mask by nearest neighbour.
pub fn crop_and_resize(sample: &SceneSample, patch: Patch, out_size: usize) -> Result<SceneSample> {
    let (iw, ih) = (sample.width(), sample.height());
    let mut crop = vec![0.0f32; 3 * patch.w * patch.h];
    for ch in 0..3 {
        let src = sample.image.channel(0, ch);
        for y in 0..patch.h {
            let row = (patch.y + y) * iw + patch.x;
            crop[(ch * patch.h + y) * patch.w..(ch * patch.h + y + 1) * patch.w]
                .copy_from_slice(&src[row..row + patch.w]);
        }
    }
    let crop = Tensor::from_vec(Shape::new(1, 3, patch.h, patch.w), crop)?;
    let image = if (patch.w, patch.h) == (out_size, out_size) {
        crop
    } else {
        resize_bilinear(&crop, out_size, out_size)?
    };

    let sx = out_size as f64 / patch.w as f64;
    let sy = out_size as f64 / patch.h as f64;
    let src_mask = sample.mask.data();
    let mask = Tensor::from_fn(Shape::new(1, 1, out_size, out_size), |i| {
        let (y, x) = (i / out_size, i % out_size);
        let my = patch.y + (((y as f64 + 0.5) / sy) as usize).min(patch.h - 1);
        let mx = patch.x + (((x as f64 + 0.5) / sx) as usize).min(patch.w - 1);
        src_mask[my.min(ih - 1) * iw + mx.min(iw - 1)]
    })?;

    let (px0, py0) = (patch.x as f64, patch.y as f64);
    let (px1, py1) = ((patch.x + patch.w) as f64, (patch.y + patch.h) as f64);
    let boxes = sample
        .boxes
        .iter()
        .filter(|b| patch.contains_centre(b))
        .map(|b| {
            let b = if b.theta == 0.0 {
                let (x0, y0, x1, y1) = b.extent();
                let (x0, y0, x1, y1) = (x0.max(px0), y0.max(py0), x1.min(px1), y1.min(py1));
                OrientedBox::axis_aligned((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
            } else {
                *b
            };
            transform_box(&b, px0, py0, sx, sy)
        })
        .collect();
    SceneSample::new(image, boxes, mask)
}

/// Horizontal flip of image, mask and boxes. Applying it twice is the identity.
pub fn mirror(sample: &SceneSample) -> Result<SceneSample> {
    let flip = |t: &Tensor<f32>| {
        let s = t.shape();
        Tensor::from_fn(s, |i| {
            let x = i % s.w;
            t.data()[i - x + (s.w - 1 - x)]
        })
    };
    let w = sample.width() as f64;
    let boxes = sample.boxes.iter().map(|b| mirror_box(b, w)).collect();
    SceneSample::new(flip(&sample.image)?, boxes, flip(&sample.mask)?)
}

pub fn mirror_box(b: &OrientedBox, image_width: f64) -> OrientedBox {
    OrientedBox {
        cx: image_width - b.cx,
        theta: normalize_theta(-b.theta),
        ..*b
    }
}
