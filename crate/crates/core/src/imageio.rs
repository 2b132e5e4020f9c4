//! Binary PGM/PPM writing and reading.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale `P5` image from row-major values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::dim(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Colour `P6` image from a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::dim(format!(
            "write_ppm expects [3, H, W], got {:?}",
            img.shape()
        )));
    };
    let d = img.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + i]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a binary PGM or PPM into `[channels, H, W]` with values in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Integrity(format!("{}: {m}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = bytes
        .get(pos..pos + w * h * channels)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0; channels * h * w];
    for i in 0..h * w {
        for ch in 0..channels {
            data[ch * h * w + i] = body[i * channels + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], data)
}
