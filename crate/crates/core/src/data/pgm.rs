//! Binary PGM (P5) reading and writing. 8-bit (maxval <= 255) uses one byte
//! per pixel, 16-bit uses two big-endian bytes, per the Netpbm convention.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major pixel values in [0, maxval].
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::invalid("pgm: maxval must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pgm: {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| **p > maxval) {
            return Err(Error::invalid(format!("pgm: pixel {p} exceeds maxval {maxval}")));
        }
        Ok(Pgm {
            width,
            height,
            maxval,
            pixels,
        })
    }

    /// Pixels rescaled to [0, 1].
    pub fn to_unit_interval(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.pixels.iter().map(|&p| p as f64 / m).collect()
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::invalid("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = read_header_int(bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::invalid(format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::invalid("missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = width * height;
    let pixels = if maxval < 256 {
        if raster.len() != n {
            return Err(Error::invalid(format!(
                "raster has {} bytes, expected {n}",
                raster.len()
            )));
        }
        raster.iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() != 2 * n {
            return Err(Error::invalid(format!(
                "raster has {} bytes, expected {}",
                raster.len(),
                2 * n
            )));
        }
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Pgm::new(width, height, maxval as u16, pixels)
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comment lines.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::invalid("malformed PGM header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::invalid("malformed PGM header integer"))
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut out = Vec::with_capacity(32 + pgm.pixels.len() * 2);
    out.extend_from_slice(format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).as_bytes());
    if pgm.maxval < 256 {
        out.extend(pgm.pixels.iter().map(|&p| p as u8));
    } else {
        for &p in &pgm.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Quantize a [0,1] image to 8-bit PGM.
pub fn pgm_from_unit_image(width: usize, height: usize, data: &[f64]) -> Result<Pgm> {
    let pixels = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    Pgm::new(width, height, 255, pixels)
}
