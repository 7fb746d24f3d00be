//! Binary PPM (P6) colour images and PGM (P5) graymaps with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, w: usize, h: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

/// `1 x 3 x H x W` tensor in `[0, 1]` to P6 bytes.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid("encode_ppm", format!("expected 1x3xHxW, got {s}")));
    }
    let plane = s.h * s.w;
    let d = image.data();
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| to_byte(d[c * plane + i])))
        .collect();
    Ok(encode("P6", s.w, s.h, &bytes))
}

/// `1 x 1 x H x W` tensor in `[0, 1]` to P5 bytes.
pub fn encode_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid("encode_pgm", format!("expected 1x1xHxW, got {s}")));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_byte(v)).collect();
    Ok(encode("P5", s.w, s.h, &bytes))
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "expected a decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad(pos, "missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(pos, "only 8-bit samples (maxval 255) are supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad(pos, "empty image"));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes P6 into `1 x 3 x H x W` or P5 into `1 x 1 x H x W`, scaled to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let body = &bytes[h.data_start..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated pixel data: {} of {need} bytes", body.len()),
        });
    }
    let scale = h.maxval as f32;
    let mut data = vec![0.0f32; need];
    for i in 0..plane {
        for c in 0..h.channels {
            data[c * plane + i] = body[i * h.channels + c] as f32 / scale;
        }
    }
    Tensor::from_vec(Shape::new(1, h.channels, h.height, h.width), data)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pnm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantised_images_round_trip() {
        let img = Tensor::from_fn(Shape::new(1, 3, 5, 7), |i| ((i * 37) % 256) as f32 / 255.0).unwrap();
        assert_eq!(decode_pnm(&encode_ppm(&img).unwrap()).unwrap(), img);
        let m = Tensor::from_fn(Shape::new(1, 1, 4, 3), |i| (i % 2) as f32).unwrap();
        assert_eq!(decode_pnm(&encode_pgm(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn comments_and_truncation() {
        let ok = b"P5\n# note\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pnm(ok).unwrap().data(), &[0.0, 1.0]);
        assert!(matches!(decode_pnm(b"P5\n2 1\n255\n\x00"), Err(Error::Format { .. })));
        assert!(matches!(
            decode_pnm(b"P3\n1 1\n255\n0"),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
