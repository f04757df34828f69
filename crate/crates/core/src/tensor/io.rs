//! Binary tensor files.
//!
//! Layout (all little-endian): the magic bytes `TFMF`, a `u32` version (1),
//! a `u32` rank, one `u32` per dimension, then the values as row-major
//! `f32`. Values are widened to `f64` on load and truncated on save.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFMF";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

fn take_u32(bytes: &mut &[u8], what: &str) -> std::result::Result<u32, String> {
    let (head, rest) = bytes
        .split_first_chunk::<4>()
        .ok_or_else(|| format!("truncated while reading {what}"))?;
    *bytes = rest;
    Ok(u32::from_le_bytes(*head))
}

pub fn decode(mut bytes: &[u8]) -> std::result::Result<Tensor, String> {
    match bytes.split_first_chunk::<4>() {
        Some((magic, rest)) if magic == MAGIC => bytes = rest,
        _ => return Err("bad magic bytes".into()),
    }
    let version = take_u32(&mut bytes, "version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = take_u32(&mut bytes, "rank")? as usize;
    if rank > bytes.len() / 4 {
        return Err("truncated while reading dimension".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u32(&mut bytes, "dimension")? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("shape overflows")?;
    // Checked before allocating so a corrupt header cannot request memory.
    match len.checked_mul(4) {
        Some(n) if n == bytes.len() => {}
        Some(n) if n > bytes.len() => return Err("truncated while reading data".into()),
        Some(n) => return Err(format!("{} trailing bytes", bytes.len() - n)),
        None => return Err("shape overflows".into()),
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TFMF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 28);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn truncates_to_f32() {
        let t = Tensor::vector(&[0.1]);
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::vector(&[1.0, 2.0]);
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut v = encode(&t);
        v[4] = 2;
        assert!(decode(&v).unwrap_err().contains("version"));
    }
}
