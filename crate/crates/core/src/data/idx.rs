//! IDX container used by the MNIST distribution.
//!
//! Header: two zero bytes, a type code (0x08 = unsigned byte), the number of
//! dimensions, then one big-endian `u32` per dimension, then the payload.

use super::DataError;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Parse {
            format: "idx",
            offset,
            reason: format!("header truncated: need {} bytes, have {}", offset + 4, bytes.len()),
        })
}

/// Parses an unsigned-byte IDX file (labels or images).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC && magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Parse {
            format: "idx",
            offset: 0,
            reason: format!(
                "bad magic {magic:#010x}; expected {IDX_LABELS_MAGIC:#010x} (labels) or {IDX_IMAGES_MAGIC:#010x} (images)"
            ),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(DataError::Parse {
        format: "idx",
        offset: 4,
        reason: "declared size overflows".into(),
    })?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(DataError::Parse {
            format: "idx",
            offset: header,
            reason: format!("payload length mismatch: expected {expected} bytes, got {actual}"),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Serializes a 1-D (labels) or 3-D (images) unsigned-byte array.
pub fn write_idx(array: &IdxArray) -> Result<Vec<u8>, DataError> {
    let magic = match array.dims.len() {
        1 => IDX_LABELS_MAGIC,
        3 => IDX_IMAGES_MAGIC,
        n => {
            return Err(DataError::Invalid {
                field: "idx dims",
                reason: format!("expected 1 or 3 dimensions, got {n}"),
            })
        }
    };
    if array.dims.iter().product::<usize>() != array.data.len() {
        return Err(DataError::Invalid {
            field: "idx data",
            reason: "length does not match dims".into(),
        });
    }
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}
