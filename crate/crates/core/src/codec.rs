//! On-disk raster formats.
//!
//! `.c2dg` layout, all little-endian:
//!
//! ```text
//! "C2DG" | u32 version (=1) | u32 height | u32 width | f32 * height*width (row-major)
//! ```
//!
//! PGM is read in both plain (`P2`) and raw (`P5`) flavours with 8- or
//! 16-bit samples, and written as raw 16-bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub const GRID_MAGIC: &[u8; 4] = b"C2DG";
pub const GRID_VERSION: u32 = 1;

/// Inputs beyond this many pixels are refused before any allocation.
const MAX_PIXELS: usize = 1 << 26;

pub fn encode_grid(grid: &Grid2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * grid.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &x in grid.values() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid2D> {
    const FMT: &str = "c2dg";
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format(FMT, "magic", "expected \"C2DG\""));
    }
    let mut r = LeReader::new(&bytes[4..], FMT);
    let version = r.u32("version")?;
    if version != GRID_VERSION {
        return Err(Error::format(
            FMT,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    if width == 0 || height == 0 {
        return Err(Error::format(FMT, "shape", format!("{width}x{height} is empty")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| Error::format(FMT, "shape", format!("{width}x{height} is too large")))?;
    let payload = r.rest();
    if payload.len() != 4 * n {
        return Err(Error::format(
            FMT,
            "values",
            format!("expected {} payload bytes, found {}", 4 * n, payload.len()),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::format(FMT, format!("values[{i}]"), "non-finite value"));
        }
        values.push(x);
    }
    Grid2D::from_vec(width, height, values)
}

pub fn save_grid(grid: &Grid2D, path: &Path) -> Result<()> {
    fs::write(path, encode_grid(grid)).map_err(Error::io(path))
}

pub fn load_grid(path: &Path) -> Result<Grid2D> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_grid(&bytes)
}

/// Raw 16-bit PGM, linearly rescaled so the map maximum becomes 65535.
/// Negative values clamp to 0; an all-zero map stays all zero.
pub fn encode_pgm16(grid: &Grid2D) -> Vec<u8> {
    let max = grid.max();
    let mut out = format!("P5\n{} {}\n65535\n", grid.width(), grid.height()).into_bytes();
    for &x in grid.values() {
        let s = if max > 0.0 {
            ((x.max(0.0) / max) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn save_pgm16(grid: &Grid2D, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm16(grid)).map_err(Error::io(path))
}

/// Decodes a PGM into a grid of raw sample values (not rescaled).
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid2D> {
    const FMT: &str = "pgm";
    let mut cur = PnmCursor { bytes, pos: 0 };
    let raw = match cur.bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::format(FMT, "magic", "expected P2 or P5")),
    };
    cur.pos = 2;
    let width = cur.header_int("width")?;
    let height = cur.header_int("height")?;
    let maxval = cur.header_int("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(FMT, "shape", format!("{width}x{height} is empty")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(FMT, "maxval", format!("{maxval} not in 1..=65535")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| Error::format(FMT, "shape", format!("{width}x{height} is too large")))?;

    let mut values = Vec::with_capacity(n.min(bytes.len()));
    if raw {
        // exactly one whitespace byte separates the header from the payload
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::format(FMT, "header", "missing separator before payload")),
        }
        let bps = if maxval < 256 { 1 } else { 2 };
        let payload = &cur.bytes[cur.pos..];
        if payload.len() < n * bps {
            return Err(Error::format(
                FMT,
                "payload",
                format!("truncated: expected {} bytes, found {}", n * bps, payload.len()),
            ));
        }
        for i in 0..n {
            let s = if bps == 1 {
                payload[i] as usize
            } else {
                u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as usize
            };
            if s > maxval {
                return Err(Error::format(FMT, format!("sample[{i}]"), "exceeds maxval"));
            }
            values.push(s as f32);
        }
    } else {
        for i in 0..n {
            let s = cur
                .int()
                .map_err(|_| Error::format(FMT, "payload", format!("truncated at sample {i} of {n}")))?;
            if s > maxval {
                return Err(Error::format(FMT, format!("sample[{i}]"), "exceeds maxval"));
            }
            values.push(s as f32);
        }
    }
    Grid2D::from_vec(width, height, values)
}

pub fn load_pgm(path: &Path) -> Result<Grid2D> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_pgm(&bytes)
}

/// Loads either format, dispatching on the leading magic bytes.
pub fn load_raster(path: &Path) -> Result<Grid2D> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Grid2D> {
    if bytes.starts_with(GRID_MAGIC) {
        decode_grid(bytes)
    } else if bytes.starts_with(b"P") {
        decode_pgm(bytes)
    } else {
        Err(Error::format("raster", "magic", "neither C2DG nor PGM"))
    }
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn int(&mut self) -> std::result::Result<usize, ()> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or(())?;
            self.pos += 1;
        }
        if self.pos == start {
            Err(())
        } else {
            Ok(value)
        }
    }

    fn header_int(&mut self, field: &'static str) -> Result<usize> {
        let start = self.pos;
        let v = self
            .int()
            .map_err(|_| Error::format("pgm", field, "missing or invalid integer"))?;
        if self.pos == start {
            return Err(Error::format("pgm", field, "missing"));
        }
        Ok(v)
    }
}

pub(crate) struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> LeReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        LeReader {
            bytes,
            pos: 0,
            format,
        }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.format, field, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}
