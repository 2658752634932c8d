//! Vector compression for the ad index: product quantization (PQ) over
//! subvector blocks, optionally preceded by a learned orthonormal rotation
//! (OPQ), plus a coarse centroid layer for inverted-list routing.
//!
//! Precision discipline: all training and scoring arithmetic runs in f64,
//! but every stored model value (rotation, coarse centroids, codebooks) is
//! rounded to f32 — the serialized precision — before any reported number
//! is computed. A model loaded from disk therefore reproduces training-time
//! distortions bit for bit.
//!
//! The OPQ trainer keeps a running best (rotation, codebooks) pair judged by
//! the same [`distortion`] function callers use. Alternation 1 trains its
//! codebooks with the exact seeds [`pq_train`] uses, so the OPQ objective
//! starts at the plain-PQ objective and the recorded trace never rises: a
//! candidate that fails to improve (possible only through f32 rounding
//! noise, since the Procrustes step cannot worsen the f64 objective) leaves
//! the model unchanged and ends the loop.

mod io;
mod kmeans;

pub use self::io::{
    code_bits, load_pq_model, pack_sub_ids, read_pq_model, save_pq_model, unpack_sub_ids,
    write_pq_model, PQ_MAGIC, PQ_VERSION,
};
pub use self::kmeans::{kmeans, KmeansResult};

use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::util::derive_seed;
use crate::{Error, Result};

use self::kmeans::{lloyd, nearest};

/// Knobs for PQ/OPQ training, extracted from the run config.
#[derive(Debug, Clone)]
pub struct QuantizerConfig {
    /// Number of subvector blocks M; must divide the vector dimension.
    pub subspaces: usize,
    /// Codewords per subspace K (at most 65536 so codes fit in u16).
    pub centroids: usize,
    /// Coarse routing centroids C; 0 resolves to round(sqrt(n)).
    pub coarse_centroids: usize,
    pub kmeans_max_iters: usize,
    /// OPQ codebook/rotation alternations.
    pub alternations: usize,
    /// Cap on training points (0 = no cap); the full set is still encoded.
    pub max_train_points: usize,
    pub seed: u64,
}

impl QuantizerConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        QuantizerConfig {
            subspaces: cfg.pq_subspaces,
            centroids: cfg.pq_centroids,
            coarse_centroids: cfg.coarse_centroids,
            kmeans_max_iters: cfg.kmeans_max_iters,
            alternations: cfg.opq_alternations,
            max_train_points: cfg.max_train_points,
            seed: cfg.seed,
        }
    }
}

/// A trained product quantizer. `rotation` is the identity for plain PQ.
#[derive(Debug, Clone, PartialEq)]
pub struct PQModel {
    /// Full vector dimension.
    pub dim: usize,
    /// Subspace count M.
    pub m: usize,
    /// Codewords per subspace K.
    pub k: usize,
    /// dim x dim orthonormal rotation, row-major; applied before coding.
    pub rotation: Vec<f32>,
    /// Coarse routing centroids in rotated space (C rows of `dim`). Plays
    /// no part in reconstruction.
    pub coarse: Vec<Vec<f32>>,
    /// M codebooks of K codewords, each of length dim / M, in rotated space.
    pub codebooks: Vec<Vec<Vec<f32>>>,
}

impl PQModel {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.len()
    }

    /// Bits per stored subspace id: ceil(log2 K).
    pub fn code_bits_per_subspace(&self) -> u32 {
        code_bits(self.k)
    }

    /// Bytes one packed code occupies (byte-aligned per vector, so codes
    /// stay randomly accessible inside inverted lists).
    pub fn code_bytes_per_vector(&self) -> usize {
        (self.m * self.code_bits_per_subspace() as usize + 7) / 8
    }

    /// Exact on-disk size of the model file written by [`save_pq_model`].
    pub fn serialized_bytes(&self) -> usize {
        let header = 4 + 4 + 4 * 4; // magic, version, dim/m/k/c
        let floats =
            self.dim * self.dim + self.coarse.len() * self.dim + self.m * self.k * self.sub_dim();
        header + 4 * floats
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.dim == 0 || self.dim % self.m != 0 {
            return Err(Error::Quantizer(format!(
                "subspace count {} must divide dimension {}",
                self.m, self.dim
            )));
        }
        if self.k == 0 || self.k > 65536 {
            return Err(Error::Quantizer(format!(
                "codebook size {} out of range 1..=65536",
                self.k
            )));
        }
        if self.rotation.len() != self.dim * self.dim {
            return Err(Error::Quantizer("rotation matrix has wrong size".into()));
        }
        let sub = self.sub_dim();
        if self.codebooks.len() != self.m
            || self
                .codebooks
                .iter()
                .any(|cb| cb.len() != self.k || cb.iter().any(|c| c.len() != sub))
        {
            return Err(Error::Quantizer("codebook shapes are inconsistent".into()));
        }
        if self.coarse.iter().any(|c| c.len() != self.dim) {
            return Err(Error::Quantizer("coarse centroid has wrong length".into()));
        }
        Ok(())
    }
}

/// Compressed form of one vector: a coarse routing cell plus one codeword
/// id per subspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PQCode {
    pub coarse_id: u32,
    pub sub_ids: Vec<u16>,
}

/// f64 working copy of a model, built once per batch operation.
struct Lifted {
    dim: usize,
    m: usize,
    sub_dim: usize,
    rotation: Vec<f64>,
    rotation_is_identity: bool,
    coarse: Vec<Vec<f64>>,
    codebooks: Vec<Vec<Vec<f64>>>,
}

impl Lifted {
    fn new(model: &PQModel) -> Result<Lifted> {
        model.validate()?;
        let rotation: Vec<f64> = model.rotation.iter().map(|&v| v as f64).collect();
        Ok(Lifted {
            dim: model.dim,
            m: model.m,
            sub_dim: model.sub_dim(),
            rotation_is_identity: is_identity(&rotation, model.dim),
            rotation,
            coarse: model
                .coarse
                .iter()
                .map(|c| c.iter().map(|&v| v as f64).collect())
                .collect(),
            codebooks: model
                .codebooks
                .iter()
                .map(|cb| {
                    cb.iter()
                        .map(|c| c.iter().map(|&v| v as f64).collect())
                        .collect()
                })
                .collect(),
        })
    }

    /// z = R v.
    fn rotate(&self, v: &[f64]) -> Vec<f64> {
        if self.rotation_is_identity {
            return v.to_vec();
        }
        (0..self.dim)
            .map(|i| {
                let row = &self.rotation[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(v).map(|(r, x)| r * x).sum()
            })
            .collect()
    }

    /// x = R^T z (the inverse for an orthonormal rotation).
    fn unrotate(&self, z: &[f64]) -> Vec<f64> {
        if self.rotation_is_identity {
            return z.to_vec();
        }
        let mut x = vec![0.0; self.dim];
        for (i, zi) in z.iter().enumerate() {
            let row = &self.rotation[i * self.dim..(i + 1) * self.dim];
            for (xj, r) in x.iter_mut().zip(row) {
                *xj += r * zi;
            }
        }
        x
    }

    fn encode_one(&self, v: &[f32]) -> PQCode {
        let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let z = self.rotate(&v64);
        let coarse_id = if self.coarse.is_empty() {
            0
        } else {
            nearest(&z, &self.coarse).0 as u32
        };
        let sub_ids = (0..self.m)
            .map(|mi| {
                let sub = &z[mi * self.sub_dim..(mi + 1) * self.sub_dim];
                nearest(sub, &self.codebooks[mi]).0 as u16
            })
            .collect();
        PQCode { coarse_id, sub_ids }
    }

    /// Nearest-codeword reconstruction of a rotated vector.
    fn reconstruct_rotated(&self, z: &[f64]) -> Vec<f64> {
        let mut zhat = vec![0.0; self.dim];
        for mi in 0..self.m {
            let sub = &z[mi * self.sub_dim..(mi + 1) * self.sub_dim];
            let (id, _) = nearest(sub, &self.codebooks[mi]);
            zhat[mi * self.sub_dim..(mi + 1) * self.sub_dim]
                .copy_from_slice(&self.codebooks[mi][id]);
        }
        zhat
    }
}

fn is_identity(rotation: &[f64], dim: usize) -> bool {
    rotation.iter().enumerate().all(|(idx, &v)| {
        let expected = if idx / dim == idx % dim { 1.0 } else { 0.0 };
        v == expected
    })
}

fn identity_rotation(dim: usize) -> Vec<f64> {
    let mut r = vec![0.0; dim * dim];
    for i in 0..dim {
        r[i * dim + i] = 1.0;
    }
    r
}

/// Compress vectors into coarse + subspace codes.
pub fn encode(model: &PQModel, vectors: &[Vec<f32>]) -> Result<Vec<PQCode>> {
    let lifted = Lifted::new(model)?;
    vectors
        .iter()
        .map(|v| {
            if v.len() != model.dim {
                return Err(Error::Quantizer(format!(
                    "cannot encode a {}-d vector with a {}-d model",
                    v.len(),
                    model.dim
                )));
            }
            Ok(lifted.encode_one(v))
        })
        .collect()
}

/// Reconstruct vectors from codes: concatenated codewords rotated back to
/// the original space. The coarse id does not participate.
pub fn decode(model: &PQModel, codes: &[PQCode]) -> Result<Vec<Vec<f32>>> {
    let lifted = Lifted::new(model)?;
    codes
        .iter()
        .map(|code| {
            if code.sub_ids.len() != model.m {
                return Err(Error::Quantizer(format!(
                    "code has {} subspace ids, model expects {}",
                    code.sub_ids.len(),
                    model.m
                )));
            }
            if !model.coarse.is_empty() && code.coarse_id as usize >= model.coarse.len() {
                return Err(Error::Quantizer(format!(
                    "coarse id {} out of range (C = {})",
                    code.coarse_id,
                    model.coarse.len()
                )));
            }
            let mut zhat = vec![0.0; model.dim];
            for (mi, &id) in code.sub_ids.iter().enumerate() {
                if id as usize >= model.k {
                    return Err(Error::Quantizer(format!(
                        "codeword id {id} out of range (K = {})",
                        model.k
                    )));
                }
                let word = &lifted.codebooks[mi][id as usize];
                zhat[mi * lifted.sub_dim..(mi + 1) * lifted.sub_dim].copy_from_slice(word);
            }
            Ok(lifted.unrotate(&zhat).iter().map(|&v| v as f32).collect())
        })
        .collect()
}

/// Mean squared reconstruction error of `vectors` under `model`, measured
/// in the original (unrotated) space with f64 accumulation.
pub fn distortion(vectors: &[Vec<f32>], model: &PQModel) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::Quantizer("distortion over an empty set".into()));
    }
    let lifted = Lifted::new(model)?;
    let mut total = 0.0;
    for v in vectors {
        if v.len() != model.dim {
            return Err(Error::Quantizer(format!(
                "cannot score a {}-d vector with a {}-d model",
                v.len(),
                model.dim
            )));
        }
        let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let z = lifted.rotate(&v64);
        let zhat = lifted.reconstruct_rotated(&z);
        let xhat = lifted.unrotate(&zhat);
        total += v64
            .iter()
            .zip(&xhat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / vectors.len() as f64)
}

fn validate_training(vectors: &[Vec<f32>], cfg: &QuantizerConfig) -> Result<(usize, usize)> {
    if vectors.is_empty() {
        return Err(Error::Quantizer("no training vectors".into()));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Quantizer(
            "training vectors must share a nonzero dimension".into(),
        ));
    }
    if cfg.subspaces == 0 || dim % cfg.subspaces != 0 {
        return Err(Error::Quantizer(format!(
            "subspace count {} must divide dimension {dim}",
            cfg.subspaces
        )));
    }
    if cfg.centroids == 0 || cfg.centroids > 65536 {
        return Err(Error::Quantizer(format!(
            "codebook size {} out of range 1..=65536",
            cfg.centroids
        )));
    }
    Ok((dim, dim / cfg.subspaces))
}

/// Seeded training subsample: (f32 originals, f64 working copies).
fn training_sample(
    vectors: &[Vec<f32>],
    cfg: &QuantizerConfig,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f64>>)> {
    let n = vectors.len();
    let cap = cfg.max_train_points;
    let indices: Vec<usize> = if cap == 0 || n <= cap {
        (0..n).collect()
    } else {
        let mut rng = crate::util::seeded_rng(cfg.seed, "pq-subsample");
        let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
        idx.sort_unstable();
        idx
    };
    if indices.len() < cfg.centroids {
        return Err(Error::Quantizer(format!(
            "{} training points cannot support {} codewords per subspace",
            indices.len(),
            cfg.centroids
        )));
    }
    let sample32: Vec<Vec<f32>> = indices.iter().map(|&i| vectors[i].clone()).collect();
    let sample64 = sample32
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    Ok((sample32, sample64))
}

fn resolve_coarse(cfg: &QuantizerConfig, n: usize) -> Result<usize> {
    let c = if cfg.coarse_centroids == 0 {
        ((n as f64).sqrt().round() as usize).max(1)
    } else {
        cfg.coarse_centroids
    };
    if c > n {
        return Err(Error::Quantizer(format!(
            "{c} coarse centroids exceed {n} training points"
        )));
    }
    Ok(c)
}

fn rotate_all(sample: &[Vec<f64>], rotation: &[f64], dim: usize) -> Vec<Vec<f64>> {
    if is_identity(rotation, dim) {
        return sample.to_vec();
    }
    sample
        .iter()
        .map(|v| {
            (0..dim)
                .map(|i| {
                    let row = &rotation[i * dim..(i + 1) * dim];
                    row.iter().zip(v).map(|(r, x)| r * x).sum()
                })
                .collect()
        })
        .collect()
}

/// Per-subspace codebooks (f32-valued f64) plus per-subspace assignments.
/// Subspace m draws its k-means seed from the shared "pq-sub-{m}" tag, so
/// PQ training and OPQ's first alternation produce identical codebooks.
fn cold_codebooks(
    rotated: &[Vec<f64>],
    cfg: &QuantizerConfig,
    sub_dim: usize,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    let mut codebooks = Vec::with_capacity(cfg.subspaces);
    let mut assignments = Vec::with_capacity(cfg.subspaces);
    for mi in 0..cfg.subspaces {
        let sub_points: Vec<Vec<f64>> = rotated
            .iter()
            .map(|v| v[mi * sub_dim..(mi + 1) * sub_dim].to_vec())
            .collect();
        let km = kmeans(
            &sub_points,
            cfg.centroids,
            cfg.kmeans_max_iters,
            derive_seed(cfg.seed, &format!("pq-sub-{mi}")),
        )?;
        codebooks.push(km.centroids);
        assignments.push(km.assignments);
    }
    Ok((codebooks, assignments))
}

/// Re-run Lloyd from existing codebooks after a rotation update.
fn warm_codebooks(
    rotated: &[Vec<f64>],
    current: &[Vec<Vec<f64>>],
    max_iters: usize,
    sub_dim: usize,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>) {
    let mut codebooks = Vec::with_capacity(current.len());
    let mut assignments = Vec::with_capacity(current.len());
    for (mi, cb) in current.iter().enumerate() {
        let sub_points: Vec<Vec<f64>> = rotated
            .iter()
            .map(|v| v[mi * sub_dim..(mi + 1) * sub_dim].to_vec())
            .collect();
        let km = lloyd(&sub_points, cb.clone(), max_iters);
        codebooks.push(km.centroids);
        assignments.push(km.assignments);
    }
    (codebooks, assignments)
}

fn round_rotation(rotation: &[f64]) -> Vec<f64> {
    rotation.iter().map(|&v| v as f32 as f64).collect()
}

fn round_codebooks_f32(codebooks: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f32>>> {
    codebooks
        .iter()
        .map(|cb| {
            cb.iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect()
        })
        .collect()
}

/// The canonical objective: [`distortion`] of the f32-rounded candidate on
/// the training sample, so every accept decision agrees with what callers
/// will later measure.
fn sample_mse(
    sample32: &[Vec<f32>],
    rotation: &[f64],
    codebooks: &[Vec<Vec<f64>>],
    dim: usize,
) -> f64 {
    let model = PQModel {
        dim,
        m: codebooks.len(),
        k: codebooks[0].len(),
        rotation: rotation.iter().map(|&v| v as f32).collect(),
        coarse: Vec::new(),
        codebooks: round_codebooks_f32(codebooks),
    };
    distortion(sample32, &model).expect("candidate model is well-formed")
}

/// Concatenated-codeword reconstructions in rotated space.
fn reconstructions(
    codebooks: &[Vec<Vec<f64>>],
    assignments: &[Vec<usize>],
    n: usize,
    dim: usize,
    sub_dim: usize,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut zhat = vec![0.0; dim];
            for (mi, assign) in assignments.iter().enumerate() {
                zhat[mi * sub_dim..(mi + 1) * sub_dim].copy_from_slice(&codebooks[mi][assign[i]]);
            }
            zhat
        })
        .collect()
}

/// Orthogonal Procrustes: the rotation R minimizing sum ||R x_i - zhat_i||^2,
/// via the SVD of the correlation matrix A = sum x_i zhat_i^T (R = V U^T).
fn procrustes(x: &[Vec<f64>], zhat: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let n = x.len();
    let xm = DMatrix::from_fn(n, dim, |r, c| x[r][c]);
    let zm = DMatrix::from_fn(n, dim, |r, c| zhat[r][c]);
    let a = xm.transpose() * zm;
    let svd = a
        .try_svd(true, true, 1e-12, 10_000)
        .ok_or_else(|| Error::Quantizer("Procrustes SVD did not converge".into()))?;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let r = v_t.transpose() * u.transpose();
    let mut out = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            out.push(r[(i, j)]);
        }
    }
    Ok(out)
}

/// Train a plain product quantizer: identity rotation, per-subspace
/// codebooks, and a coarse routing layer over the full vectors.
pub fn pq_train(vectors: &[Vec<f32>], cfg: &QuantizerConfig) -> Result<PQModel> {
    let (dim, sub_dim) = validate_training(vectors, cfg)?;
    let (_, sample64) = training_sample(vectors, cfg)?;
    let (codebooks, _) = cold_codebooks(&sample64, cfg, sub_dim)?;
    let c = resolve_coarse(cfg, sample64.len())?;
    let coarse_km = kmeans(
        &sample64,
        c,
        cfg.kmeans_max_iters,
        derive_seed(cfg.seed, "pq-coarse"),
    )?;
    let model = PQModel {
        dim,
        m: cfg.subspaces,
        k: cfg.centroids,
        rotation: identity_rotation(dim).iter().map(|&v| v as f32).collect(),
        coarse: coarse_km
            .centroids
            .iter()
            .map(|c| c.iter().map(|&v| v as f32).collect())
            .collect(),
        codebooks: round_codebooks_f32(&codebooks),
    };
    model.validate()?;
    Ok(model)
}

/// Train a rotation-optimized product quantizer. Returns the model and the
/// objective (training-sample distortion) after each alternation; the trace
/// is nonincreasing, starts at the plain-PQ objective, and the loop ends
/// early at the first alternation that yields no improvement.
pub fn opq_train(vectors: &[Vec<f32>], cfg: &QuantizerConfig) -> Result<(PQModel, Vec<f64>)> {
    let (dim, sub_dim) = validate_training(vectors, cfg)?;
    if cfg.alternations == 0 {
        return Err(Error::Quantizer("alternations must be at least 1".into()));
    }
    let (sample32, sample64) = training_sample(vectors, cfg)?;
    let n = sample64.len();

    let mut rotation = identity_rotation(dim);
    let mut best_rotation = rotation.clone();
    let mut best_codebooks: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut best_j = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.alternations);

    for alt in 1..=cfg.alternations {
        let rotated = rotate_all(&sample64, &rotation, dim);
        let (codebooks, assignments) = if alt == 1 {
            cold_codebooks(&rotated, cfg, sub_dim)?
        } else {
            warm_codebooks(&rotated, &best_codebooks, cfg.kmeans_max_iters, sub_dim)
        };
        let j_codebooks = sample_mse(&sample32, &rotation, &codebooks, dim);

        let zhat = reconstructions(&codebooks, &assignments, n, dim, sub_dim);
        let candidate = round_rotation(&procrustes(&sample64, &zhat, dim)?);
        let j_rotated = sample_mse(&sample32, &candidate, &codebooks, dim);

        // Keep the better half-step of this alternation...
        let (j_alt, rot_alt) = if j_rotated <= j_codebooks {
            (j_rotated, candidate)
        } else {
            (j_codebooks, rotation.clone())
        };
        // ...and only adopt it if the objective did not regress. A repeat
        // alternation from an unchanged model is deterministic, so a
        // non-improving step means no further progress is possible.
        if j_alt <= best_j {
            best_j = j_alt;
            best_rotation = rot_alt;
            best_codebooks = codebooks;
            trace.push(best_j);
            rotation = best_rotation.clone();
        } else {
            trace.push(best_j);
            break;
        }
    }

    let rotated = rotate_all(&sample64, &best_rotation, dim);
    let c = resolve_coarse(cfg, n)?;
    let coarse_km = kmeans(
        &rotated,
        c,
        cfg.kmeans_max_iters,
        derive_seed(cfg.seed, "pq-coarse"),
    )?;
    let model = PQModel {
        dim,
        m: cfg.subspaces,
        k: cfg.centroids,
        rotation: best_rotation.iter().map(|&v| v as f32).collect(),
        coarse: coarse_km
            .centroids
            .iter()
            .map(|c| c.iter().map(|&v| v as f32).collect())
            .collect(),
        codebooks: round_codebooks_f32(&best_codebooks),
    };
    model.validate()?;
    Ok((model, trace))
}
