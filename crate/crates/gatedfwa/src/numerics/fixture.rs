//! Binary tensor fixtures.
//!
//! Layout: little-endian header `{magic "GFWA", version u32, rows u32,
//! cols u32}` followed by row-major 32-bit floats. Values are stored at
//! single precision; reading widens back to `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Matrix;

pub const FIXTURE_MAGIC: [u8; 4] = *b"GFWA";
pub const FIXTURE_VERSION: u32 = 1;

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FIXTURE_MAGIC)?;
    w.write_all(&FIXTURE_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FIXTURE_MAGIC {
        return Err(Error::Fixture(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FIXTURE_VERSION {
        return Err(Error::Fixture(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    // Trailing bytes mean a corrupted or mislabeled file.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Fixture("trailing bytes after payload".into()));
    }
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gfwa");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Fixture(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.gfwa");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FIXTURE_MAGIC);
        bytes.extend_from_slice(&FIXTURE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(read_matrix(&path).is_err());
    }
}
