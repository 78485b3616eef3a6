//! Binary PGM/PPM export, 8-bit, values scaled by 255 and rounded.

use std::io::Write;
use std::path::Path;

use super::Observation;
use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one grayscale frame as binary PGM (P5).
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Write a color image as binary PPM (P6). Input is channel-major (CHW).
pub fn write_ppm(path: &Path, h: usize, w: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), 3 * h * w);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", w, h)?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        bytes.push(quantize(data[i]));
        bytes.push(quantize(data[plane + i]));
        bytes.push(quantize(data[2 * plane + i]));
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Export an observation: grayscale stacks write one PGM per frame
/// (`<stem>_f0.pgm`, ...), color images a single PPM.
pub fn write_observation(path_stem: &Path, obs: &Observation) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    match obs {
        Observation::Gray { frames, h, w, data } => {
            for f in 0..*frames {
                let path = path_stem.with_extension(format!("f{f}.pgm"));
                write_pgm(&path, *h, *w, &data[f * h * w..(f + 1) * h * w])?;
                written.push(path);
            }
        }
        Observation::Color { h, w, data } => {
            let path = path_stem.with_extension("ppm");
            write_ppm(&path, *h, *w, data)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Minimal PPM reader for round-trip tests.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path)?;
    let header_err = || Error::contract(format!("malformed PPM header in {}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace after maxval
    let body = raw[pos..].to_vec();
    if body.len() != 3 * w * h {
        return Err(header_err());
    }
    Ok((h, w, body))
}
