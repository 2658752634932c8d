//! Index serialization (all integers and floats little-endian):
//!
//! ```text
//! magic "AIDX" | version u32 | sha256(payload) 32 bytes
//! payload:
//!   flags u32            bit 0 = retained vectors present, bit 1 = OPQ
//!   n_ads u64
//!   quantizer model      the standalone "APQM" section, embedded verbatim
//!   inverted lists       per coarse cell: len u64, then len entries of
//!                        (ad table index u32, packed code bytes)
//!   ad table             n_ads rows of (ad_id u64, weight f64, norm f64)
//!   retained vectors     n_ads rows of dim f32, only when flagged
//! ```
//!
//! Weights and norms are stored as f64 so a loaded index scores ads with
//! exactly the bids the corpus carries. The header checksum covers the
//! whole payload; any flipped bit is caught before parsing begins.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::click_model::EMBED_OUT;
use crate::quantizer::{pack_sub_ids, read_pq_model, unpack_sub_ids, write_pq_model};
use crate::util::{expect_magic, read_f32_vec, read_u32, read_u64, write_u32, write_u64};
use crate::{Error, Result};

use super::{AdIndex, IndexMode, ListEntry};

pub const INDEX_MAGIC: &[u8; 4] = b"AIDX";
pub const INDEX_VERSION: u32 = 1;

const FLAG_RETAINED: u32 = 1;
const FLAG_OPQ: u32 = 2;

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn payload_bytes(index: &AdIndex) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    let mut flags = 0u32;
    if index.retained.is_some() {
        flags |= FLAG_RETAINED;
    }
    if index.mode == IndexMode::Opq {
        flags |= FLAG_OPQ;
    }
    write_u32(&mut w, flags)?;
    write_u64(&mut w, index.ad_ids.len() as u64)?;
    write_pq_model(&mut w, &index.model)?;
    for list in &index.lists {
        write_u64(&mut w, list.len() as u64)?;
        for e in list {
            write_u32(&mut w, e.ad)?;
            w.write_all(&pack_sub_ids(&e.sub_ids, index.model.k))?;
        }
    }
    for i in 0..index.ad_ids.len() {
        write_u64(&mut w, index.ad_ids[i])?;
        w.write_all(&index.weights[i].to_le_bytes())?;
        w.write_all(&index.norms[i].to_le_bytes())?;
    }
    if let Some(rows) = &index.retained {
        for row in rows {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(w)
}

/// Hex SHA-256 of the index's serialized payload: two indexes with equal
/// checksums hold identical model, lists, and tables.
pub fn index_checksum(index: &AdIndex) -> Result<String> {
    Ok(crate::util::sha256_hex(&payload_bytes(index)?))
}

pub fn save_index(path: &Path, index: &AdIndex) -> Result<()> {
    let payload = payload_bytes(index)?;
    let digest = Sha256::digest(&payload);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(INDEX_MAGIC)?;
    write_u32(&mut w, INDEX_VERSION)?;
    w.write_all(&digest)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<AdIndex> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, INDEX_MAGIC, "ad index")?;
    let version = read_u32(&mut r)?;
    if version != INDEX_VERSION {
        return Err(Error::Format(format!(
            "ad index version {version} unsupported (expected {INDEX_VERSION})"
        )));
    }
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if Sha256::digest(&payload).as_slice() != stored {
        return Err(Error::Format(
            "ad index checksum mismatch: file is corrupt or truncated".into(),
        ));
    }

    let mut c = payload.as_slice();
    let flags = read_u32(&mut c)?;
    if flags & !(FLAG_RETAINED | FLAG_OPQ) != 0 {
        return Err(Error::Format(format!(
            "ad index has unknown flags {flags:#x}"
        )));
    }
    let n = read_u64(&mut c)? as usize;
    if n == 0 {
        return Err(Error::Format("ad index holds zero ads".into()));
    }
    let model = read_pq_model(&mut c)?;
    if model.dim != EMBED_OUT {
        return Err(Error::Format(format!(
            "ad index built for {}-d vectors, expected {EMBED_OUT}",
            model.dim
        )));
    }
    let code_bytes = model.code_bytes_per_vector();
    let mut lists = Vec::with_capacity(model.coarse.len());
    let mut seen = vec![false; n];
    let mut total = 0usize;
    for _ in 0..model.coarse.len() {
        let len = read_u64(&mut c)? as usize;
        let mut list = Vec::with_capacity(len.min(n));
        for _ in 0..len {
            let ad = read_u32(&mut c)?;
            if ad as usize >= n || seen[ad as usize] {
                return Err(Error::Format(format!(
                    "ad index list entry {ad} out of range or repeated"
                )));
            }
            seen[ad as usize] = true;
            let mut buf = vec![0u8; code_bytes];
            c.read_exact(&mut buf)?;
            let sub_ids = unpack_sub_ids(&buf, model.m, model.k)?;
            list.push(ListEntry { ad, sub_ids });
            total += 1;
        }
        lists.push(list);
    }
    if total != n {
        return Err(Error::Format(format!(
            "ad index lists cover {total} of {n} ads"
        )));
    }

    let mut ad_ids = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let id = read_u64(&mut c)?;
        if i > 0 && id <= ad_ids[i - 1] {
            return Err(Error::Format("ad index table not sorted by ad id".into()));
        }
        let weight = read_f64(&mut c)?;
        let norm = read_f64(&mut c)?;
        if !(weight > 0.0) || !weight.is_finite() || !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Format(format!(
                "ad index table row for ad {id} has invalid weight {weight} or norm {norm}"
            )));
        }
        ad_ids.push(id);
        weights.push(weight);
        norms.push(norm);
    }

    let retained = if flags & FLAG_RETAINED != 0 {
        Some(
            (0..n)
                .map(|_| read_f32_vec(&mut c, model.dim))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    if !c.is_empty() {
        return Err(Error::Format(format!(
            "ad index has {} trailing payload bytes",
            c.len()
        )));
    }

    let mode = if flags & FLAG_OPQ != 0 {
        IndexMode::Opq
    } else {
        IndexMode::Pq
    };
    Ok(AdIndex {
        model,
        mode,
        lists,
        ad_ids,
        weights,
        norms,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_model::Embedding96;
    use crate::quantizer::QuantizerConfig;
    use crate::retrieval::{build_index, search_cosine_rerank, search_mips, AdSet};
    use rand::Rng;

    fn build_sample(mode: IndexMode, retain: bool, seed: u64) -> (AdIndex, Embedding96) {
        let mut rng = crate::util::seeded_rng(seed, "index-io-test");
        // Non-contiguous ids so the table index / ad id distinction is live.
        let ids: Vec<u64> = (0..150u64).map(|i| i * 3 + 7).collect();
        let vectors: Vec<Embedding96> = (0..150)
            .map(|_| {
                let row: Vec<f32> = (0..EMBED_OUT)
                    .map(|_| rng.gen_range(-1.0f32..1.0))
                    .collect();
                Embedding96::from_f32(&row)
            })
            .collect();
        let weights: Vec<f64> = (0..150).map(|_| rng.gen_range(0.5..5.0)).collect();
        let ads = AdSet::new(&ids, &vectors, &weights).unwrap();
        let cfg = QuantizerConfig {
            subspaces: 3,
            centroids: 16,
            coarse_centroids: 6,
            kmeans_max_iters: 8,
            alternations: 3,
            max_train_points: 0,
            seed,
        };
        let (index, _) = build_index(&ads, &cfg, mode, retain).unwrap();
        let row: Vec<f32> = (0..EMBED_OUT)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        (index, Embedding96::from_f32(&row))
    }

    #[test]
    fn index_roundtrips_and_scores_identically() {
        let dir = tempfile::tempdir().unwrap();
        for (mode, retain) in [(IndexMode::Pq, true), (IndexMode::Opq, false)] {
            let (index, x) = build_sample(mode, retain, 41);
            let path = dir.path().join(format!("{mode}-{retain}.aidx"));
            save_index(&path, &index).unwrap();
            let loaded = load_index(&path).unwrap();
            assert_eq!(
                index_checksum(&index).unwrap(),
                index_checksum(&loaded).unwrap()
            );
            assert_eq!(loaded.mode(), mode);
            assert_eq!(loaded.has_retained(), retain);
            assert_eq!(loaded.n_ads(), index.n_ads());
            assert_eq!(loaded.ad_ids(), index.ad_ids());
            assert_eq!(loaded.list_lengths(), index.list_lengths());
            assert_eq!(
                search_mips(&index, &x, 10, 3, 30).unwrap(),
                search_mips(&loaded, &x, 10, 3, 30).unwrap()
            );
            if retain {
                assert_eq!(
                    search_cosine_rerank(&index, &x, 10, 3, 30).unwrap(),
                    search_cosine_rerank(&loaded, &x, 10, 3, 30).unwrap()
                );
            }
        }
    }

    #[test]
    fn resave_is_byte_identical_and_header_matches_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (index, _) = build_sample(IndexMode::Opq, true, 43);
        let p1 = dir.path().join("a.aidx");
        let p2 = dir.path().join("b.aidx");
        save_index(&p1, &index).unwrap();
        save_index(&p2, &index).unwrap();
        let bytes = std::fs::read(&p1).unwrap();
        assert_eq!(bytes, std::fs::read(&p2).unwrap());
        // Header digest (bytes 8..40) is the hex the checksum helper reports.
        let hex: String = bytes[8..40].iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, index_checksum(&index).unwrap());
    }

    #[test]
    fn corrupt_index_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.aidx");
        let (index, _) = build_sample(IndexMode::Pq, false, 45);
        save_index(&path, &index).unwrap();
        let pristine = std::fs::read(&path).unwrap();

        let mut bad = pristine.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_index(&path).unwrap_err().to_string().contains("magic"));

        let mut bad = pristine.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_index(&path)
            .unwrap_err()
            .to_string()
            .contains("version"));

        // One flipped payload bit, a truncated tail, and appended garbage
        // all land on the checksum before any parsing happens.
        let mut bad = pristine.clone();
        let mid = 40 + (bad.len() - 40) / 2;
        bad[mid] ^= 0x10;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_index(&path)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        let mut bad = pristine.clone();
        bad.truncate(bad.len() - 3);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_index(&path)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        let mut bad = pristine.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(load_index(&path)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        std::fs::write(&path, &pristine).unwrap();
        assert!(load_index(&path).is_ok());
    }
}
