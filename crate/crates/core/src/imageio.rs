//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Encodes `[3,H,W]` values in `[0,1]` as P6, rounding to nearest.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("PPM needs [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    let d = image.data();
    for p in 0..hw {
        for k in 0..3 {
            out.push((d[k * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let (h, w) = labels.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels.data());
    out
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} image",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut fields = Vec::with_capacity(3);
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated image header".into()));
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("bad number in image header".into()))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", fields[2])));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format("missing separator after image header".into()));
    }
    Ok((fields[1], fields[0], &bytes[i + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, body) = parse_header(bytes, b"P6")?;
    let hw = h * w;
    if body.len() < 3 * hw {
        return Err(Error::Format(format!("PPM body has {} of {} bytes", body.len(), 3 * hw)));
    }
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for k in 0..3 {
            data[k * hw + p] = body[3 * p + k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (h, w, body) = parse_header(bytes, b"P5")?;
    if body.len() < h * w {
        return Err(Error::Format(format!("PGM body has {} of {} bytes", body.len(), h * w)));
    }
    LabelMap::new(h, w, body[..h * w].to_vec())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
