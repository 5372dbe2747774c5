//! 8-bit grayscale rasters in binary PGM (`P5`) form.
//!
//! ```text
//! P5<ws><width><ws><height><ws>255<one whitespace byte><width*height bytes>
//! ```
//!
//! `#` comments are allowed in the header. Only `maxval = 255` is accepted.
//! Samples map to intensities as `byte / 255`; writing rounds
//! `intensity * 255` to the nearest byte.

use std::path::Path;

use crate::error::{Error, Result};

pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn bad(msg: &str) -> Error {
    Error::Format(format!("raster: {msg}"))
}

pub fn encode(width: usize, height: usize, intensities: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        intensities
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut num = |name: &str| -> Result<usize> {
        token(bytes)?
            .parse()
            .map_err(|_| bad(&format!("bad {name}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(bad("truncated pixel data"));
    }
    Ok(Raster {
        width,
        height,
        pixels: bytes[start..start + n].to_vec(),
    })
}

pub fn write(path: impl AsRef<Path>, width: usize, height: usize, intensities: &[f64]) -> Result<()> {
    std::fs::write(path, encode(width, height, intensities))?;
    Ok(())
}

/// Read a raster and rescale to `[0, 1]`: `(width, height, intensities)`.
pub fn read(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let r = decode(&std::fs::read(path)?)?;
    let px = r.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((r.width, r.height, px))
}
