//! Raw binary array files with JSON sidecars.
//!
//! Arrays are stored as little-endian floats with no header; the shape lives
//! in a JSON document next to the data. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("array length mismatch: file holds {found} values, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let found = bytes.len() / 4;
    if bytes.len() % 4 != 0 || found != expected_len {
        return Err(IoError::LengthMismatch { expected: expected_len, found });
    }
    let mut out = Vec::with_capacity(found);
    for chunk in bytes.chunks_exact(4) {
        out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(out)
}

pub fn write_f64(path: &Path, data: &[f64]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_f64(path: &Path, expected_len: usize) -> Result<Vec<f64>, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let found = bytes.len() / 8;
    if bytes.len() % 8 != 0 || found != expected_len {
        return Err(IoError::LengthMismatch { expected: expected_len, found });
    }
    let mut out = Vec::with_capacity(found);
    for chunk in bytes.chunks_exact(8) {
        out.push(f64::from_le_bytes([
            chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
        ]));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("microstress_io_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.f32");
        let data: Vec<f32> = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, 3.402e38, -7.25];
        write_f32(&path, &data).unwrap();
        let back = read_f32(&path, data.len()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = std::env::temp_dir().join("microstress_io_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("b.f32");
        write_f32(&path, &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(read_f32(&path, 4), Err(IoError::LengthMismatch { .. })));
    }
}
