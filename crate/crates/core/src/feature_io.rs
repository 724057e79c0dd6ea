//! GCMF pyramid files and binary PGM/PPM images.
//!
//! GCMF layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "GCMF"
//! version    u32      1
//! num_levels u32      k + 1
//! sizes      num_levels x (height u32, width u32, channels u32)
//! payload    level 0 .. level k, each height*width*channels f32, row-major
//! ```
//!
//! Files store the exporter's raw values; [`read_pyramid`] L2-normalizes
//! every level on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{FeatureMap, FeaturePyramid, Image};

pub const GCMF_MAGIC: [u8; 4] = *b"GCMF";
pub const GCMF_VERSION: u32 = 1;

/// Parsed GCMF header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidFileHeader {
    pub version: u32,
    /// `(height, width, channels)` per level, finest first.
    pub level_sizes: Vec<(u32, u32, u32)>,
}

impl PyramidFileHeader {
    pub fn byte_len(&self) -> u64 {
        12 + 12 * self.level_sizes.len() as u64
    }

    fn payload_len(&self) -> Option<u64> {
        self.level_sizes.iter().try_fold(0u64, |acc, &(h, w, c)| {
            (h as u64)
                .checked_mul(w as u64)?
                .checked_mul(c as u64)?
                .checked_mul(4)?
                .checked_add(acc)
        })
    }
}

/// Serializes a pyramid to bytes without normalizing it.
pub fn encode_pyramid(pyr: &FeaturePyramid) -> Result<Vec<u8>> {
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InconsistentSizes(format!("dimension {v} exceeds u32")))
    };
    let payload: usize = pyr.levels().iter().map(|l| l.data().len() * 4).sum();
    let mut out = Vec::with_capacity(12 + 12 * pyr.levels().len() + payload);
    out.extend_from_slice(&GCMF_MAGIC);
    out.extend_from_slice(&GCMF_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(pyr.levels().len())?.to_le_bytes());
    for level in pyr.levels() {
        for dim in [level.height(), level.width(), level.channels()] {
            out.extend_from_slice(&to_u32(dim)?.to_le_bytes());
        }
    }
    for level in pyr.levels() {
        for v in level.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pyramid(path: impl AsRef<Path>, pyr: &FeaturePyramid) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pyramid(pyr)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(expected: u64, bytes: &[u8]) -> Error {
    Error::TruncatedFile {
        expected,
        found: bytes.len() as u64,
    }
}

/// Parses and validates the header.
pub fn decode_header(bytes: &[u8]) -> Result<PyramidFileHeader> {
    if bytes.len() < 4 {
        return Err(truncated(12, bytes));
    }
    if bytes[..4] != GCMF_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(bytes, 4).ok_or_else(|| truncated(12, bytes))?;
    if version != GCMF_VERSION {
        return Err(Error::BadVersion(version));
    }
    let num_levels = read_u32(bytes, 8).ok_or_else(|| truncated(12, bytes))?;
    if num_levels == 0 {
        return Err(Error::InconsistentSizes("zero levels".into()));
    }
    let header_len = 12 + 12 * num_levels as u64;
    if (bytes.len() as u64) < header_len {
        return Err(truncated(header_len, bytes));
    }
    let level_sizes: Vec<(u32, u32, u32)> = (0..num_levels as usize)
        .map(|l| {
            let base = 12 + 12 * l;
            (
                read_u32(bytes, base).unwrap(),
                read_u32(bytes, base + 4).unwrap(),
                read_u32(bytes, base + 8).unwrap(),
            )
        })
        .collect();
    for (l, &(h, w, c)) in level_sizes.iter().enumerate() {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InconsistentSizes(format!(
                "level {l} has empty size {h}x{w}x{c}"
            )));
        }
    }
    for (l, pair) in level_sizes.windows(2).enumerate() {
        if pair[1].0 >= pair[0].0 || pair[1].1 >= pair[0].1 {
            return Err(Error::InconsistentSizes(format!(
                "level {} ({}x{}) does not shrink below level {l} ({}x{})",
                l + 1,
                pair[1].0,
                pair[1].1,
                pair[0].0,
                pair[0].1
            )));
        }
    }
    Ok(PyramidFileHeader {
        version,
        level_sizes,
    })
}

/// Decodes a GCMF byte buffer into raw (unnormalized) levels.
pub fn decode_pyramid_raw(bytes: &[u8]) -> Result<FeaturePyramid> {
    let header = decode_header(bytes)?;
    let payload = header
        .payload_len()
        .ok_or_else(|| Error::InconsistentSizes("payload size overflows".into()))?;
    let expected = header.byte_len() + payload;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected, bytes));
    }
    if bytes.len() as u64 > expected {
        return Err(Error::InconsistentSizes(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - expected
        )));
    }
    let mut offset = header.byte_len() as usize;
    let mut levels = Vec::with_capacity(header.level_sizes.len());
    for (l, &(h, w, c)) in header.level_sizes.iter().enumerate() {
        let n = h as usize * w as usize * c as usize;
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * n;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { level: l });
        }
        levels.push(FeatureMap::new(h as usize, w as usize, c as usize, data)?);
    }
    let source = (levels[0].height(), levels[0].width());
    FeaturePyramid::new(levels, source)
}

/// Reads a GCMF file without normalization.
pub fn read_pyramid_raw(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pyramid_raw(&bytes)
}

/// Reads a GCMF file and L2-normalizes every level.
pub fn read_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let raw = read_pyramid_raw(path)?;
    let source = raw.source_size();
    let levels = raw
        .into_levels()
        .iter()
        .map(FeatureMap::l2_normalize_channels)
        .collect();
    FeaturePyramid::new(levels, source)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {what}")))
    }
}

/// Decodes binary PGM (P5) or PPM (P6) bytes with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::UnsupportedFormat(
                "only binary PGM (P5) and PPM (P6) are supported".into(),
            ))
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::MalformedHeader("missing separator after magic".into()));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedHeader("missing separator before raster".into()));
    }
    let start = cur.pos + 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::MalformedHeader("image size overflows".into()))?;
    let raster = bytes.get(start..start + n).ok_or(Error::TruncatedFile {
        expected: (start + n) as u64,
        found: bytes.len() as u64,
    })?;
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, channels, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

/// Encodes as P5/P6 with values rounded to 8 bits (clamped to `[0, 1]`).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
