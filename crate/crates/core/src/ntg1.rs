//! The NTG1 grid file format.
//!
//! Layout, all little-endian, no padding or compression:
//!
//! ```text
//! 0..4      magic b"NTG1"
//! 4..8      u32 header length L
//! 8..8+L    UTF-8 JSON header
//!           {width, height, dtype, origin_x, origin_y, pixel_size, crs_label, has_mask}
//! ...       row-major payload, width*height values of dtype
//! ...       if has_mask: width*height bytes, each 0 or 1
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{DType, Grid, GridData, GridTransform, RasterError};

pub const MAGIC: &[u8; 4] = b"NTG1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not an NTG1 file (magic {0:02x?})")]
    BadMagic(Vec<u8>),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: header declares {expected} bytes, file holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("mask byte {value} at pixel {index} is not 0 or 1")]
    InvalidMaskByte { index: usize, value: u8 },
    #[error("invalid grid: {0}")]
    Grid(#[from] RasterError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: u64,
    height: u64,
    dtype: DType,
    origin_x: f64,
    origin_y: f64,
    pixel_size: f64,
    crs_label: String,
    has_mask: bool,
}

/// Serializes a grid to its exact NTG1 byte representation.
pub fn encode(grid: &Grid) -> Vec<u8> {
    let t = grid.transform();
    let header = Header {
        width: grid.width() as u64,
        height: grid.height() as u64,
        dtype: grid.dtype(),
        origin_x: t.origin_x,
        origin_y: t.origin_y,
        pixel_size: t.pixel_size,
        crs_label: t.crs_label.clone(),
        has_mask: grid.mask().is_some(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let n = grid.len();
    let mut out = Vec::with_capacity(8 + header.len() + n * grid.dtype().size_bytes() + n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match grid.data() {
        GridData::U8(v) => out.extend_from_slice(v),
        GridData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        GridData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        GridData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    if let Some(mask) = grid.mask() {
        out.extend(mask.iter().map(|&b| b as u8));
    }
    out
}

/// Parses NTG1 bytes. Trailing bytes after the declared content are an error.
pub fn decode(bytes: &[u8]) -> Result<Grid, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { needed: 8, have: bytes.len() });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated { needed: header_end, have: bytes.len() });
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let n = usize::try_from(header.width)
        .ok()
        .zip(usize::try_from(header.height).ok())
        .and_then(|(w, h)| w.checked_mul(h))
        .ok_or_else(|| FormatError::MalformedHeader("dimensions overflow".into()))?;
    let payload_len = n * header.dtype.size_bytes();
    let mask_len = if header.has_mask { n } else { 0 };
    let expected = payload_len + mask_len;
    let body = &bytes[header_end..];
    if body.len() < expected {
        return Err(FormatError::Truncated { needed: header_end + expected, have: bytes.len() });
    }
    if body.len() > expected {
        return Err(FormatError::SizeMismatch { expected, actual: body.len() });
    }
    let payload = &body[..payload_len];
    let data = match header.dtype {
        DType::U8 => GridData::U8(payload.to_vec()),
        DType::U16 => GridData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
        DType::I32 => GridData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::F32 => GridData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    let mask = if header.has_mask {
        let raw = &body[payload_len..];
        let mut mask = Vec::with_capacity(n);
        for (index, &value) in raw.iter().enumerate() {
            match value {
                0 => mask.push(false),
                1 => mask.push(true),
                _ => return Err(FormatError::InvalidMaskByte { index, value }),
            }
        }
        Some(mask)
    } else {
        None
    };
    let transform = GridTransform::new(header.origin_x, header.origin_y, header.pixel_size, header.crs_label)
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    Ok(Grid::new(header.width as usize, header.height as usize, transform, data, mask)?)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid, FormatError> {
    decode(&fs::read(path)?)
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(grid))?;
    f.sync_all()?;
    Ok(())
}
