//! Quantizer model serialization and code packing.
//!
//! Model file layout (all integers and floats little-endian):
//!
//! ```text
//! magic "APQM" | version u32 | dim u32 | m u32 | k u32 | c u32
//! rotation     dim*dim f32
//! coarse       c*dim   f32
//! codebooks    m*k*(dim/m) f32
//! ```
//!
//! Codes are packed separately: each vector's M subspace ids occupy
//! ceil(M * ceil(log2 K) / 8) bytes, LSB-first, so inverted lists can index
//! individual codes without a bit cursor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::util::{expect_magic, read_f32_vec, read_u32, write_u32};
use crate::{Error, Result};

use super::PQModel;

pub const PQ_MAGIC: &[u8; 4] = b"APQM";
pub const PQ_VERSION: u32 = 1;

/// Bits needed to store one codeword id: ceil(log2 k), with k = 1 taking
/// zero bits.
pub fn code_bits(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        (k as u64 - 1).ilog2() + 1
    }
}

/// Pack one vector's subspace ids at ceil(log2 k) bits each, LSB-first.
pub fn pack_sub_ids(sub_ids: &[u16], k: usize) -> Vec<u8> {
    let bits = code_bits(k) as usize;
    let mut out = vec![0u8; (sub_ids.len() * bits + 7) / 8];
    let mut pos = 0;
    for &id in sub_ids {
        for j in 0..bits {
            if (id >> j) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_sub_ids`] for `m` ids.
pub fn unpack_sub_ids(bytes: &[u8], m: usize, k: usize) -> Result<Vec<u16>> {
    let bits = code_bits(k) as usize;
    if bytes.len() != (m * bits + 7) / 8 {
        return Err(Error::Format(format!(
            "packed code has {} bytes, expected {}",
            bytes.len(),
            (m * bits + 7) / 8
        )));
    }
    let mut out = Vec::with_capacity(m);
    let mut pos = 0;
    for _ in 0..m {
        let mut id = 0u16;
        for j in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                id |= 1 << j;
            }
            pos += 1;
        }
        if id as usize >= k {
            return Err(Error::Format(format!(
                "unpacked codeword id {id} out of range (K = {k})"
            )));
        }
        out.push(id);
    }
    Ok(out)
}

fn write_f32_rows<W: Write>(w: &mut W, rows: &[Vec<f32>]) -> Result<()> {
    for row in rows {
        for &v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Write the model section (magic through codebooks) to any sink, so the
/// same bytes can live standalone or embedded inside an index file.
pub fn write_pq_model<W: Write>(w: &mut W, model: &PQModel) -> Result<()> {
    w.write_all(PQ_MAGIC)?;
    write_u32(w, PQ_VERSION)?;
    write_u32(w, model.dim as u32)?;
    write_u32(w, model.m as u32)?;
    write_u32(w, model.k as u32)?;
    write_u32(w, model.coarse.len() as u32)?;
    for &v in &model.rotation {
        w.write_all(&v.to_le_bytes())?;
    }
    write_f32_rows(w, &model.coarse)?;
    for cb in &model.codebooks {
        write_f32_rows(w, cb)?;
    }
    Ok(())
}

pub fn save_pq_model(path: &Path, model: &PQModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pq_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_pq_model`]; leaves the reader positioned just past
/// the model section and does not check for trailing bytes.
pub fn read_pq_model<R: Read>(r: &mut R) -> Result<PQModel> {
    expect_magic(r, PQ_MAGIC, "quantizer model")?;
    let version = read_u32(r)?;
    if version != PQ_VERSION {
        return Err(Error::Format(format!(
            "quantizer model version {version} unsupported (expected {PQ_VERSION})"
        )));
    }
    let dim = read_u32(r)? as usize;
    let m = read_u32(r)? as usize;
    let k = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    if dim == 0 || m == 0 || dim % m != 0 {
        return Err(Error::Format(format!(
            "quantizer model header invalid: dim {dim}, m {m}"
        )));
    }
    if k == 0 || k > 65536 {
        return Err(Error::Format(format!(
            "quantizer model codebook size {k} out of range"
        )));
    }
    let rotation = read_f32_vec(r, dim * dim)?;
    let coarse = (0..c)
        .map(|_| read_f32_vec(r, dim))
        .collect::<Result<Vec<_>>>()?;
    let sub = dim / m;
    let codebooks = (0..m)
        .map(|_| (0..k).map(|_| read_f32_vec(r, sub)).collect())
        .collect::<Result<Vec<_>>>()?;
    let model = PQModel {
        dim,
        m,
        k,
        rotation,
        coarse,
        codebooks,
    };
    model
        .validate()
        .map_err(|e| Error::Format(format!("quantizer model inconsistent: {e}")))?;
    Ok(model)
}

pub fn load_pq_model(path: &Path) -> Result<PQModel> {
    let mut r = BufReader::new(File::open(path)?);
    let model = read_pq_model(&mut r)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("quantizer model has trailing bytes".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{opq_train, QuantizerConfig};
    use rand::Rng;

    fn trained_model(seed: u64) -> PQModel {
        let mut rng = crate::util::seeded_rng(seed, "quantizer-io-test");
        let vectors: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let cfg = QuantizerConfig {
            subspaces: 3,
            centroids: 16,
            coarse_centroids: 4,
            kmeans_max_iters: 10,
            alternations: 3,
            max_train_points: 0,
            seed,
        };
        opq_train(&vectors, &cfg).unwrap().0
    }

    #[test]
    fn model_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pqm");
        let model = trained_model(7);
        save_pq_model(&path, &model).unwrap();
        let loaded = load_pq_model(&path).unwrap();
        assert_eq!(model, loaded);
        // Measured size matches the arithmetic the memory budget uses.
        let measured = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(measured, model.serialized_bytes());
        // Saving again is byte-identical.
        let path2 = dir.path().join("model2.pqm");
        save_pq_model(&path2, &model).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pqm");
        let model = trained_model(8);
        save_pq_model(&path, &model).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_pq_model(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        save_pq_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_pq_model(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        save_pq_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_pq_model(&path).is_err());

        save_pq_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_pq_model(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn packed_codes_roundtrip_at_many_codebook_sizes() {
        let mut rng = crate::util::seeded_rng(9, "quantizer-io-test");
        for &k in &[2usize, 5, 16, 256, 300, 1024, 65536] {
            let bits = code_bits(k) as usize;
            for m in [1usize, 3, 7] {
                let ids: Vec<u16> = (0..m).map(|_| rng.gen_range(0..k) as u16).collect();
                let packed = pack_sub_ids(&ids, k);
                assert_eq!(packed.len(), (m * bits + 7) / 8);
                assert_eq!(unpack_sub_ids(&packed, m, k).unwrap(), ids);
            }
        }
        // ceil(log2 k) spot checks.
        assert_eq!(code_bits(1), 0);
        assert_eq!(code_bits(2), 1);
        assert_eq!(code_bits(256), 8);
        assert_eq!(code_bits(257), 9);
        assert_eq!(code_bits(65536), 16);
    }

    #[test]
    fn unpack_validates_range_and_length() {
        let packed = pack_sub_ids(&[3, 3], 4);
        // 5 ids at 2 bits need 2 bytes, not 1.
        assert!(unpack_sub_ids(&packed, 5, 4).is_err());
        // id 3 is out of range for k = 3.
        assert!(unpack_sub_ids(&packed, 2, 3).is_err());
        assert_eq!(unpack_sub_ids(&packed, 2, 4).unwrap(), vec![3, 3]);
    }

    #[test]
    fn loaded_model_scores_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pqm");
        let model = trained_model(10);
        save_pq_model(&path, &model).unwrap();
        let loaded = load_pq_model(&path).unwrap();
        let mut rng = crate::util::seeded_rng(11, "quantizer-io-test");
        let probe: Vec<Vec<f32>> = (0..50)
            .map(|_| (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let a = crate::quantizer::distortion(&probe, &model).unwrap();
        let b = crate::quantizer::distortion(&probe, &loaded).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            crate::quantizer::encode(&model, &probe).unwrap(),
            crate::quantizer::encode(&loaded, &probe).unwrap()
        );
    }
}
