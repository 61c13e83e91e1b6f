//! Raw tensor file format for fixtures and golden data.
//!
//! Layout (all integers little-endian):
//!   magic  b"CSTEN\0"
//!   u8     version (1)
//!   u8     dtype (0 = f64)
//!   u8     ndim
//!   u32*n  dims
//!   f64*k  data, k = product of dims

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"CSTEN\0";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch {
            what: "tensor file".into(),
            expected: expected.to_string(),
            got: data.len().to_string(),
        });
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&[VERSION, DTYPE_F64, shape.len() as u8])?;
    for &d in shape {
        file.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 9];
    file.read_exact(&mut header)?;
    if &header[..6] != MAGIC {
        return Err(Error::format(path.display().to_string(), "bad magic"));
    }
    if header[6] != VERSION || header[7] != DTYPE_F64 {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported version/dtype {}/{}", header[6], header[7]),
        ));
    }
    let ndim = header[8] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        file.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 8];
        file.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} trailing bytes", trailing.len()),
        ));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csten");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        write_tensor(&path, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_tensor(&path).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csten");
        assert!(write_tensor(&path, &[2, 2], &[1.0; 3]).is_err());
    }
}
