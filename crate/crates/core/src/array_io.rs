//! PCTN dense array container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "PCTN"  u32 version = 1  u32 ndim  u64 dims[ndim]  f64 values[prod(dims)]
//! ```
//!
//! Values are row-major. At most four dimensions are allowed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCTN";
pub const VERSION: u32 = 1;
pub const MAX_DIMS: usize = 4;

/// Serializes `values` with shape `dims` into `out`.
pub fn write_to<W: Write>(mut out: W, dims: &[usize], values: &[f64]) -> Result<()> {
    check_shape(dims, values.len())?;
    let mut buf = Vec::with_capacity(12 + 8 * dims.len() + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::Array(format!("write failed: {e}")))
}

/// Parses a PCTN stream into `(dims, values)`.
pub fn read_from<R: Read>(mut input: R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Array(format!("read failed: {e}")))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Array(format!("truncated {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };

    if take(4, "magic")? != MAGIC {
        return Err(Error::Array("bad magic, expected \"PCTN\"".into()));
    }
    let version = u32::from_le_bytes(take(4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Array(format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    if ndim > MAX_DIMS {
        return Err(Error::Array(format!("ndim {ndim} exceeds the maximum of {MAX_DIMS}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(8, "dims")?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::Array(format!("dimension {d} too large")))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Array("element count overflows".into()))?;
    let payload = take(
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Array("payload size overflows".into()))?,
        "payload",
    )?;
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cursor.is_empty() {
        return Err(Error::Array(format!("{} trailing bytes after payload", cursor.len())));
    }
    Ok((dims, values))
}

fn check_shape(dims: &[usize], len: usize) -> Result<()> {
    if dims.len() > MAX_DIMS {
        return Err(Error::Array(format!(
            "ndim {} exceeds the maximum of {MAX_DIMS}",
            dims.len()
        )));
    }
    let count: usize = dims.iter().product();
    if count != len {
        return Err(Error::Array(format!(
            "dims {dims:?} describe {count} values but {len} were given"
        )));
    }
    Ok(())
}

pub fn write_array(path: impl AsRef<Path>, dims: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    check_shape(dims, values.len())?;
    let mut buf = Vec::new();
    write_to(&mut buf, dims, values)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Array(msg) => Error::Array(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads a PCTN file as an n-dimensional array.
pub fn read_ndarray(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let (dims, values) = read_array(path)?;
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Array(e.to_string()))
}

/// Writes any standard- or non-standard-layout array in row-major order.
pub fn write_ndarray<S, D>(path: impl AsRef<Path>, array: &ndarray::ArrayBase<S, D>) -> Result<()>
where
    S: ndarray::Data<Elem = f64>,
    D: ndarray::Dimension,
{
    let values: Vec<f64> = array.iter().copied().collect();
    write_array(path, array.shape(), &values)
}
