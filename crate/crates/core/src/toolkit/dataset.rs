//! Dataset directories: `NNNN.ppm` images, `NNNN.boxes.txt` annotations
//! (`cx cy w h theta` per line), `NNNN.mask.pgm` text masks and
//! `NNNN.det.txt` detections (`cx cy w h theta score` per line).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Detection, OrientedBox};

use super::pnm::{read_pnm, write_pgm, write_ppm};
use super::scene::SceneSample;

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}.ppm"))
}

pub fn boxes_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}.boxes.txt"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}.mask.pgm"))
}

pub fn detections_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:04}.det.txt"))
}

fn format_box(b: &OrientedBox) -> String {
    format!("{} {} {} {} {}", b.cx, b.cy, b.w, b.h, b.theta)
}

pub fn format_boxes(boxes: &[OrientedBox]) -> String {
    boxes.iter().map(|b| format_box(b) + "\n").collect()
}

pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| format!("{} {}\n", format_box(&d.bbox), d.score))
        .collect()
}

/// Parses whitespace-separated numeric rows of exactly `fields` columns;
/// blank lines and lines starting with `#` are skipped.
fn parse_rows(text: &str, path: &Path, fields: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != fields {
            return Err(err(format!("expected {fields} fields, found {}", vals.len())));
        }
        rows.push(vals);
    }
    Ok(rows)
}

fn row_error(path: &Path, e: Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    }
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<OrientedBox>> {
    parse_rows(text, path, 5)?
        .into_iter()
        .map(|r| OrientedBox::new(r[0], r[1], r[2], r[3], r[4]).map_err(|e| row_error(path, e)))
        .collect()
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    parse_rows(text, path, 6)?
        .into_iter()
        .map(|r| {
            OrientedBox::new(r[0], r[1], r[2], r[3], r[4])
                .and_then(|b| Detection::new(b, r[5]))
                .map_err(|e| row_error(path, e))
        })
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<OrientedBox>> {
    parse_boxes(&fs::read_to_string(path)?, path)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&fs::read_to_string(path)?, path)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, format_detections(dets))?;
    Ok(())
}

pub fn write_sample(dir: &Path, index: usize, sample: &SceneSample) -> Result<()> {
    write_ppm(image_path(dir, index), &sample.image)?;
    fs::write(boxes_path(dir, index), format_boxes(&sample.boxes))?;
    write_pgm(mask_path(dir, index), &sample.mask)
}

/// Writes samples as `0000`, `0001`, ... creating `dir` if needed.
pub fn write_dataset(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    samples
        .iter()
        .enumerate()
        .try_for_each(|(i, s)| write_sample(dir, i, s))
}

/// Indices of every `NNNN.ppm` in `dir`, sorted.
pub fn list_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if stem.len() == 4 && stem.bytes().all(|b| b.is_ascii_digit()) {
                out.push(stem.parse().expect("four digits"));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Reads one sample; a missing mask yields an all-zero mask.
pub fn read_sample(dir: &Path, index: usize) -> Result<SceneSample> {
    let image = read_pnm(image_path(dir, index))?;
    let boxes = read_boxes(&boxes_path(dir, index))?;
    let mp = mask_path(dir, index);
    let s = image.shape();
    let mask = if mp.exists() {
        read_pnm(&mp)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    } else {
        crate::tensor::Tensor::zeros(crate::tensor::Shape::new(1, 1, s.h, s.w))?
    };
    SceneSample::new(image, boxes, mask)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    list_indices(dir)?.into_iter().map(|i| read_sample(dir, i)).collect()
}
