//! Binary PPM (P6) and PGM (P5) writers, 8 bits per sample.

use std::path::Path;

use crate::destruction::GridSpec;
use crate::error::{DcnError, Result};
use crate::tensor::{Scalar, Tensor};

fn to_byte<T: Scalar>(v: T) -> Result<u8> {
    let f = v.as_f64();
    if !(0.0..=1.0).contains(&f) {
        return Err(DcnError::config(format!(
            "preview values must lie in [0, 1], found {f}"
        )));
    }
    Ok((f * 255.0).round() as u8)
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Encodes a `3×H×W` image as P6, pixels row-major with channels interleaved.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(DcnError::config(format!(
            "PPM needs a 3×H×W image, got {:?}",
            image.shape()
        )));
    };
    let plane = h * w;
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(image[c * plane + i])?);
        }
    }
    Ok(out)
}

/// Encodes a `1×H×W` map as P5.
pub fn encode_pgm<T: Scalar>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let &[1, h, w] = map.shape() else {
        return Err(DcnError::config(format!(
            "PGM needs a 1×H×W map, got {:?}",
            map.shape()
        )));
    };
    let mut out = header("P5", w, h);
    for &v in map.data() {
        out.push(to_byte(v)?);
    }
    Ok(out)
}

pub fn write_ppm<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    std::fs::write(path, bytes).map_err(|e| DcnError::io(path, e))
}

pub fn write_pgm<T: Scalar>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_pgm(map)?;
    std::fs::write(path, bytes).map_err(|e| DcnError::io(path, e))
}

/// Copy of `image` with one-pixel red lines on the patch-slot boundaries.
pub fn grid_overlay<T: Scalar>(image: &Tensor<T>, grid: GridSpec) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    let geo = grid.geometry(h, w)?;
    let mut out = image.clone();
    let plane = h * w;
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let on_line = (y % geo.patch_h == 0 && y > 0) || (x % geo.patch_w == 0 && x > 0);
            if on_line {
                for ch in 0..c {
                    data[ch * plane + y * w + x] = if ch == 0 { T::one() } else { T::zero() };
                }
            }
        }
    }
    Ok(out)
}
