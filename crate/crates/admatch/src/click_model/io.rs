//! Binary persistence: model checkpoints and embedding exports.
//!
//! Both formats are little-endian throughout, with all weights stored as
//! IEEE-754 single precision.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::util::{
    expect_magic, read_f32_vec, read_f32_vec_as_f64, read_u32, read_u64, write_f32_slice_from_f64,
    write_u32, write_u64,
};
use crate::{Error, Result};

use super::{Head, Linear, ModelParams, Tower, EMBED_OUT};

const CKPT_MAGIC: &[u8; 4] = b"ACKP";
const CKPT_VERSION: u32 = 1;
const EMB_MAGIC: &[u8; 4] = b"AEMB";
const EMB_VERSION: u32 = 1;

fn write_linear<W: Write>(w: &mut W, l: &Linear) -> Result<()> {
    write_f32_slice_from_f64(w, &l.w)?;
    write_f32_slice_from_f64(w, &l.b)
}

fn read_linear<R: Read>(r: &mut R, in_dim: usize, out_dim: usize) -> Result<Linear> {
    Ok(Linear {
        w: read_f32_vec_as_f64(r, in_dim * out_dim)?,
        b: read_f32_vec_as_f64(r, out_dim)?,
        in_dim,
        out_dim,
    })
}

fn write_tower<W: Write>(w: &mut W, t: &Tower) -> Result<()> {
    write_linear(w, &t.l1)?;
    write_linear(w, &t.l2)?;
    write_linear(w, &t.l3)
}

fn read_tower<R: Read>(r: &mut R, in_dim: usize, h1: usize, h2: usize) -> Result<Tower> {
    Ok(Tower {
        l1: read_linear(r, in_dim, h1)?,
        l2: read_linear(r, h1, h2)?,
        l3: read_linear(r, h2, EMBED_OUT)?,
    })
}

/// Write a model checkpoint: magic, version, shape header, then every
/// weight as f32.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    write_u64(&mut w, params.vocab_size as u64)?;
    write_u32(&mut w, params.embed_dim as u32)?;
    write_u32(&mut w, params.hidden1 as u32)?;
    write_u32(&mut w, params.hidden2 as u32)?;
    write_u32(&mut w, EMBED_OUT as u32)?;

    write_f32_slice_from_f64(&mut w, &params.embed)?;
    write_tower(&mut w, &params.query_tower)?;
    write_tower(&mut w, &params.ad_tower)?;
    write_f32_slice_from_f64(
        &mut w,
        &[
            params.head.alpha_unclick,
            params.head.alpha_bad,
            params.head.delta,
            params.head.beta[0],
            params.head.beta[1],
            params.head.beta[2],
        ],
    )?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, CKPT_MAGIC, "model checkpoint")?;
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let vocab_size = read_u64(&mut r)? as usize;
    let embed_dim = read_u32(&mut r)? as usize;
    let hidden1 = read_u32(&mut r)? as usize;
    let hidden2 = read_u32(&mut r)? as usize;
    let out_dim = read_u32(&mut r)? as usize;
    if out_dim != EMBED_OUT {
        return Err(Error::Format(format!(
            "checkpoint output dim {out_dim}, expected {EMBED_OUT}"
        )));
    }

    let embed = read_f32_vec_as_f64(&mut r, (vocab_size + 1) * embed_dim)?;
    let query_tower = read_tower(&mut r, 2 * embed_dim, hidden1, hidden2)?;
    let ad_tower = read_tower(&mut r, embed_dim, hidden1, hidden2)?;
    let h = read_f32_vec_as_f64(&mut r, 6)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(ModelParams {
        vocab_size,
        embed_dim,
        hidden1,
        hidden2,
        embed,
        query_tower,
        ad_tower,
        head: Head {
            alpha_unclick: h[0],
            alpha_bad: h[1],
            delta: h[2],
            beta: [h[3], h[4], h[5]],
        },
    })
}

/// Write an embedding export: count, dim, the id list, then row-major f32
/// vectors.
pub fn write_embedding_file(
    path: &Path,
    dim: usize,
    ids: &[u64],
    vectors: &[Vec<f32>],
) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::Format(format!(
            "id list length {} != vector count {}",
            ids.len(),
            vectors.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    write_u32(&mut w, EMB_VERSION)?;
    write_u64(&mut w, ids.len() as u64)?;
    write_u32(&mut w, dim as u32)?;
    for &id in ids {
        write_u64(&mut w, id)?;
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::Format(format!(
                "vector of dim {} in a dim-{dim} export",
                v.len()
            )));
        }
        for &x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an embedding export; returns (dim, ids, vectors).
pub fn read_embedding_file(path: &Path) -> Result<(usize, Vec<u64>, Vec<Vec<f32>>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    expect_magic(&mut r, EMB_MAGIC, "embedding export")?;
    let version = read_u32(&mut r)?;
    if version != EMB_VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding export version {version}"
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(read_u64(&mut r)?);
    }
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        vectors.push(read_f32_vec(&mut r, dim)?);
    }
    Ok((dim, ids, vectors))
}
