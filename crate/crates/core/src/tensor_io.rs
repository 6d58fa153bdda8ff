//! MXT1 binary tensor format.
//!
//! Layout: magic `"MXT1"`, `u8` dtype code (0 = f32), `u8` ndim, then
//! `ndim × u64` little-endian dims, then the row-major little-endian f32
//! payload. Matrices are written with ndim = 2, vectors with ndim = 1.

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use std::fs;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MXT1";
const DTYPE_F32: u8 = 0;

fn encode(dims: &[u64], values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(dims.len() as u8);
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Serialize a matrix (ndim = 2, f32 payload).
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let buf = encode(
        &[m.rows as u64, m.cols as u64],
        m.data().iter().map(|&v| v as f32),
    );
    fs::write(path, buf)?;
    Ok(())
}

/// Serialize a vector (ndim = 1, f32 payload).
pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    let buf = encode(&[v.len() as u64], v.iter().map(|&x| x as f32));
    fs::write(path, buf)?;
    Ok(())
}

struct Decoded {
    dims: Vec<u64>,
    values: Vec<f64>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 6];
    file.read_exact(&mut header)
        .map_err(|_| MxError::data(format!("{}: truncated MXT1 header", path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(MxError::data(format!(
            "{}: bad magic, expected MXT1",
            path.display()
        )));
    }
    if header[4] != DTYPE_F32 {
        return Err(MxError::data(format!(
            "{}: unsupported dtype code {}",
            path.display(),
            header[4]
        )));
    }
    let ndim = header[5] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        file.read_exact(&mut b)
            .map_err(|_| MxError::data(format!("{}: truncated dims", path.display())))?;
        dims.push(u64::from_le_bytes(b));
    }
    let count: u64 = dims.iter().product();
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() as u64 != count * 4 {
        return Err(MxError::data(format!(
            "{}: payload length {} does not match dims {:?}",
            path.display(),
            payload.len(),
            dims
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Decoded { dims, values })
}

/// Read a 2-D tensor.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let d = decode(path)?;
    if d.dims.len() != 2 {
        return Err(MxError::data(format!(
            "{}: expected 2-D tensor, got {}-D",
            path.display(),
            d.dims.len()
        )));
    }
    Matrix::new(d.dims[0] as usize, d.dims[1] as usize, d.values)
}

/// Read a 1-D tensor.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let d = decode(path)?;
    if d.dims.len() != 1 {
        return Err(MxError::data(format!(
            "{}: expected 1-D tensor, got {}-D",
            path.display(),
            d.dims.len()
        )));
    }
    Ok(d.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn matrix_round_trip() {
        let dir = std::env::temp_dir().join(format!("mxt1_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.mxt");
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.0, 3.25]]).unwrap();
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        assert_eq!(back, m);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("mxt1_bad_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.mxt");
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(b"NOPE\x00\x01").unwrap();
        drop(f);
        assert!(matches!(read_matrix(&p), Err(MxError::Data(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
