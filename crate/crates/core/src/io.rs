//! File formats: `.hsc` cubes, spectral-response CSV and 8-bit PGM maps.
//!
//! A `.hsc` file is the magic `HSCUBE01`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{bands, height, width, dtype: "f32"}` and
//! the band-major little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::{CubeMeta, HsiCube, SpectralResponse};
use crate::error::{Error, Result};

pub const HSC_MAGIC: &[u8; 8] = b"HSCUBE01";

#[derive(Debug, Serialize, Deserialize)]
struct HscHeader {
    bands: usize,
    height: usize,
    width: usize,
    dtype: String,
    #[serde(default)]
    meta: CubeMeta,
}

fn format_err(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        what,
        reason: reason.into(),
    }
}

/// Encodes a cube; values are narrowed to `f32`.
pub fn encode_hsc(cube: &HsiCube) -> Result<Vec<u8>> {
    let header = HscHeader {
        bands: cube.bands(),
        height: cube.height(),
        width: cube.width(),
        dtype: "f32".into(),
        meta: cube.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * cube.data().len());
    out.extend_from_slice(HSC_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in cube.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_hsc(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 12 || &bytes[..8] != HSC_MAGIC {
        return Err(format_err("hsc", "missing HSCUBE01 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(format_err("hsc", "truncated header"));
    }
    let header: HscHeader = serde_json::from_slice(&body[..hlen])?;
    if header.dtype != "f32" {
        return Err(format_err("hsc", format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header.bands * header.height * header.width;
    let payload = &body[hlen..];
    if payload.len() != 4 * n {
        return Err(format_err("hsc", format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(HsiCube::new(header.bands, header.height, header.width, data)?.with_meta(header.meta))
}

pub fn write_hsc(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    fs::write(path, encode_hsc(cube)?)?;
    Ok(())
}

pub fn read_hsc(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_hsc(&fs::read(path)?)
}

/// Parses a `c x C` comma-separated matrix; blank lines and `#` comments
/// are skipped. Rows are used as given and must already sum to one.
pub fn parse_response_csv(text: &str) -> Result<SpectralResponse> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| format_err("response csv", format!("line {}: {e}", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format_err("response csv", format!("line {}: ragged row", ln + 1)));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err("response csv", "no rows"));
    }
    let cols = rows[0].len();
    SpectralResponse::new(rows.len(), cols, rows.concat())
}

pub fn format_response_csv(r: &SpectralResponse) -> String {
    let mut s = String::new();
    for row in r.data().chunks(r.cols()) {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn read_response_csv(path: impl AsRef<Path>) -> Result<SpectralResponse> {
    parse_response_csv(&fs::read_to_string(path)?)
}

pub fn write_response_csv(path: impl AsRef<Path>, r: &SpectralResponse) -> Result<()> {
    fs::write(path, format_response_csv(r))?;
    Ok(())
}

/// Binary (P5) 8-bit greyscale image scaled so the maximum maps to 255.
/// An all-zero map stays black.
pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::shape("encode_pgm", height * width, values.len()));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(values.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|&v| {
        if max > 0.0 && v.is_finite() {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_pgm(values, height, width)?)?;
    Ok(())
}

/// Reads back `(width, height, pixels)` from a P5 file written by
/// [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
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
            return Err(format_err("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err("pgm", "not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format_err("pgm", e.to_string()));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(format_err("pgm", "payload size mismatch"));
    }
    Ok((w, h, pixels))
}
