//! `MGV1` raw volume files.
//!
//! Layout (all integers little-endian u32): magic `MGV1`, element kind
//! (1 = f32 intensities, 2 = u8 labels), class count `C` (0 for
//! intensities), then `W`, `H`, `L`; the payload starts at byte 24 with `x`
//! varying fastest.

use std::path::Path;

use magicnet_core::volume::{Dims, LabelMap, Volume};

use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"MGV1";
pub const HEADER_LEN: usize = 24;
pub const KIND_REAL32: u32 = 1;
pub const KIND_LABELS: u32 = 2;

/// Decoded contents of an `MGV1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum RawGrid {
    Volume(Volume),
    Labels(LabelMap),
}

fn header(kind: u32, classes: u32, dims: Dims) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for v in [kind, classes, dims.w as u32, dims.h as u32, dims.l as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(KIND_REAL32, 0, v.dims());
    out.reserve(4 * v.data().len());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(y: &LabelMap) -> Vec<u8> {
    let mut out = header(KIND_LABELS, y.num_classes() as u32, y.dims());
    out.extend_from_slice(y.data());
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses an `MGV1` buffer; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RawGrid> {
    let fail =
        |offset: usize, message: String| CliError::Format { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "missing MGV1 magic".into()));
    }
    let kind = u32_at(bytes, 4);
    let classes = u32_at(bytes, 8);
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = u32_at(bytes, 12 + 4 * k) as usize;
        if *d == 0 {
            return Err(fail(12 + 4 * k, "zero dimension".into()));
        }
    }
    let dims = Dims::new(dims[0], dims[1], dims[2]);
    let elem = match kind {
        KIND_REAL32 => 4,
        KIND_LABELS => 1,
        _ => return Err(fail(4, format!("unknown element kind {kind}"))),
    };
    let payload = dims
        .w
        .checked_mul(dims.h)
        .and_then(|n| n.checked_mul(dims.l))
        .and_then(|n| n.checked_mul(elem))
        .ok_or_else(|| fail(12, format!("dims {dims} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(fail(bytes.len(), format!("payload truncated: expected {payload} bytes, found {}", body.len())));
    }
    if body.len() > payload {
        return Err(fail(HEADER_LEN + payload, format!("{} trailing bytes", body.len() - payload)));
    }
    match kind {
        KIND_REAL32 => {
            if classes != 0 {
                return Err(fail(8, format!("intensity volume declares {classes} classes")));
            }
            let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Ok(RawGrid::Volume(Volume::new(dims, data)?))
        }
        _ => {
            if classes == 0 || classes > 255 {
                return Err(fail(8, format!("label map class count {classes} outside 1..=255")));
            }
            if let Some(i) = body.iter().position(|&l| l as u32 > classes) {
                return Err(fail(HEADER_LEN + i, format!("label {} exceeds class count {classes}", body[i])));
            }
            Ok(RawGrid::Labels(LabelMap::new(dims, classes as usize, body.to_vec())?))
        }
    }
}

pub fn read(path: &Path) -> Result<RawGrid> {
    decode(&std::fs::read(path).at(path)?, path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read(path)? {
        RawGrid::Volume(v) => Ok(v),
        RawGrid::Labels(_) => {
            Err(CliError::Format { path: path.into(), offset: 4, message: "expected an intensity volume".into() })
        }
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read(path)? {
        RawGrid::Labels(y) => Ok(y),
        RawGrid::Volume(_) => {
            Err(CliError::Format { path: path.into(), offset: 4, message: "expected a label map".into() })
        }
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, encode_volume(v)).at(path)
}

pub fn write_labels(path: &Path, y: &LabelMap) -> Result<()> {
    std::fs::write(path, encode_labels(y)).at(path)
}
