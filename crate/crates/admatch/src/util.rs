//! Seed derivation, checksums, and little-endian binary I/O helpers shared by
//! the file formats in this crate.

use std::io::{Read, Write};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::Result;

/// Derive a child seed from a master seed and a domain tag.
///
/// Different tags give statistically independent streams, so each pipeline
/// stage can consume randomness without perturbing the others.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seeded RNG for a (master seed, tag) pair.
pub fn seeded_rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents as lowercase hex.
pub fn sha256_file_hex(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Write a slice of f64 values as little-endian f32.
pub fn write_f32_slice_from_f64<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        write_f32(w, v as f32)?;
    }
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

/// Read `n` little-endian f32 values, widening to f64.
pub fn read_f32_vec_as_f64<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Read `n` little-endian f32 values.
pub fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Check a 4-byte magic tag at the current read position.
pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(crate::Error::Format(format!(
            "{what}: bad magic {buf:?}, expected {magic:?}"
        )));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
