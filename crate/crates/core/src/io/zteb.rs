//! ZTEB: a minimal little-endian tensor container for embeddings.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ZTEB"
//! 4       2           version (u16 LE) = 1
//! 6       1           dtype tag (u8), 1 = f32
//! 7       1           rank (u8)
//! 8       8·rank      shape, u64 LE each
//! 8+8·r   4·∏shape    payload, row-major f32 LE
//! ```

use std::fs;
use std::path::Path;

use crate::math::{EmbeddingMatrix, Matrix};
use crate::{Error, Result, Scalar};

pub const MAGIC: [u8; 4] = *b"ZTEB";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
/// Row-norm tolerance applied when loading embeddings from disk.
pub const FILE_NORM_TOLERANCE: f64 = 1e-3;

const FIXED_HEADER: usize = 8;

pub fn encode_zteb(shape: &[u64], payload: &[f32]) -> Result<Vec<u8>> {
    let rank =
        u8::try_from(shape.len()).map_err(|_| Error::InvalidParameter(format!("rank {} too large", shape.len())))?;
    let expected: u64 = shape.iter().product();
    if expected != payload.len() as u64 {
        return Err(Error::DimensionMismatch(format!(
            "shape {shape:?} holds {expected} values, payload has {}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * shape.len() + 4 * payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses and validates a ZTEB buffer, returning `(shape, payload)`.
pub fn decode_zteb(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f32>)> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::TruncatedHeader {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            offset: 4,
            found: version,
        });
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype {
            offset: 6,
            found: bytes[6],
        });
    }
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(Error::UnsupportedRank { offset: 7, found: 0 });
    }
    let header_len = FIXED_HEADER + 8 * rank;
    if bytes.len() < header_len {
        return Err(Error::TruncatedHeader {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let shape: Vec<u64> = bytes[FIXED_HEADER..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let available = bytes.len() - header_len;
    let expected = shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok());
    let expected = match expected {
        Some(n) if n <= available => n,
        _ => {
            return Err(Error::TruncatedPayload {
                offset: header_len,
                expected: expected.unwrap_or(usize::MAX),
                actual: available,
            })
        }
    };
    if available > expected {
        return Err(Error::TrailingBytes {
            offset: header_len + expected,
            extra: available - expected,
        });
    }
    let payload: Vec<f32> = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = payload.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((shape, payload))
}

fn embedding_from_zteb<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingMatrix<T>> {
    let (shape, payload) = decode_zteb(bytes)?;
    let [rows, cols] = shape[..] else {
        return Err(Error::UnsupportedRank {
            offset: 7,
            found: shape.len() as u8,
        });
    };
    let data = payload.into_iter().map(|x| T::of(f64::from(x))).collect();
    let m = Matrix::new(rows as usize, cols as usize, data)?;
    EmbeddingMatrix::with_tolerance(m, FILE_NORM_TOLERANCE)
}

/// Loads a rank-2 ZTEB file. Values are widened exactly from `f32`.
pub fn read_embedding_file<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingMatrix<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    embedding_from_zteb(&bytes).map_err(|e| e.in_file(path))
}

/// Writes `m` as a rank-2 ZTEB file, narrowing values to `f32`.
pub fn write_embedding_file<T: Scalar>(m: &EmbeddingMatrix<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let payload: Vec<f32> = m.as_matrix().as_slice().iter().map(|x| x.as_f64() as f32).collect();
    let bytes = encode_zteb(&[m.rows() as u64, m.dim() as u64], &payload)?;
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
}
