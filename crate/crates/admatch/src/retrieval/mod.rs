//! Ad retrieval: a brute-force oracle, cosine-ANN-then-reweight (strategy
//! a), and weighted-cosine maximum-inner-product search served from the
//! compressed index (strategy b).
//!
//! The business-weighted objective is cos(x, y) * w, computed everywhere by
//! the one canonical [`weighted_score`]: the brute-force oracle and the
//! exact re-rank path share it, so degenerate-parameter searches reproduce
//! the oracle bit for bit. The index quantizes unit ad vectors and keeps
//! weights in a side table, so bid changes never force re-quantization.

mod io;
mod serve;

pub use self::io::{index_checksum, load_index, save_index, INDEX_MAGIC, INDEX_VERSION};
pub use self::serve::{serve, ServeContext, ServeRequest, ServeResponse};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::click_model::{Embedding96, EMBED_OUT};
use crate::quantizer::{self, PQModel, QuantizerConfig};
use crate::{Error, Result};

/// Which quantizer the index was built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexMode {
    Pq,
    Opq,
}

impl std::str::FromStr for IndexMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pq" => Ok(IndexMode::Pq),
            "opq" => Ok(IndexMode::Opq),
            other => Err(Error::Config(format!(
                "unknown index mode '{other}' (expected pq|opq)"
            ))),
        }
    }
}

impl std::fmt::Display for IndexMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IndexMode::Pq => write!(f, "pq"),
            IndexMode::Opq => write!(f, "opq"),
        }
    }
}

/// Scoring objective for the brute-force oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Unweighted cosine similarity.
    Cosine,
    /// cos(x, y) * w, the serving objective.
    Weighted,
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAd {
    pub ad_id: u64,
    pub score: f64,
}

/// Search output: entries sorted by score descending, ties broken by
/// ascending ad_id, length at most the requested K.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub entries: Vec<ScoredAd>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.ad_id).collect()
    }
}

/// A borrowed view of the ad corpus on the scoring side: parallel ids,
/// embeddings, and business weights (bids).
pub struct AdSet<'a> {
    pub ids: &'a [u64],
    pub vectors: &'a [Embedding96],
    pub weights: &'a [f64],
}

impl<'a> AdSet<'a> {
    pub fn new(ids: &'a [u64], vectors: &'a [Embedding96], weights: &'a [f64]) -> Result<Self> {
        if ids.len() != vectors.len() || ids.len() != weights.len() {
            return Err(Error::Index(format!(
                "ad table misaligned: {} ids, {} vectors, {} weights",
                ids.len(),
                vectors.len(),
                weights.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Index("ad set is empty".into()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::Index(format!("duplicate ad id {id}")));
            }
        }
        for (&id, &w) in ids.iter().zip(weights) {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Index(format!("ad {id} has invalid weight {w}")));
            }
        }
        Ok(AdSet {
            ids,
            vectors,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn checked_norm(v: &Embedding96, what: &str) -> Result<f64> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Index(format!("{what} vector has invalid norm {n}")));
    }
    Ok(n)
}

/// The serving objective cos(x, y) * w, computed literally as
/// <x/||x||, y*w/||y||>. Every scoring path in this module funnels through
/// here so results are comparable bit for bit.
pub fn weighted_score(x: &Embedding96, y: &Embedding96, w: f64) -> Result<f64> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::Index(format!(
            "business weight {w} must be positive"
        )));
    }
    let xn = checked_norm(x, "query")?;
    let yn = checked_norm(y, "ad")?;
    Ok(x.0
        .iter()
        .zip(&y.0)
        .map(|(a, b)| (a / xn) * (b * w / yn))
        .sum())
}

/// The weight-absorbing transform y*w/||y||: plain inner product with the
/// normalized query then realizes the weighted cosine.
pub fn mips_transform(y: &Embedding96, w: f64) -> Result<Embedding96> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::Index(format!(
            "business weight {w} must be positive"
        )));
    }
    let yn = checked_norm(y, "ad")?;
    let mut out = [0.0; EMBED_OUT];
    for (o, &v) in out.iter_mut().zip(&y.0) {
        *o = v * w / yn;
    }
    Ok(Embedding96(out))
}

fn sort_scored(entries: &mut [(u64, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Exhaustively score and sort all ads: the oracle for recall and coverage.
pub fn brute_force_topk(
    x: &Embedding96,
    ads: &AdSet,
    k: usize,
    objective: Objective,
) -> Result<RetrievalResult> {
    let mut scored = Vec::with_capacity(ads.len());
    for i in 0..ads.len() {
        let score = match objective {
            Objective::Weighted => weighted_score(x, &ads.vectors[i], ads.weights[i])?,
            Objective::Cosine => weighted_score(x, &ads.vectors[i], 1.0)?,
        };
        scored.push((ads.ids[i], score));
    }
    sort_scored(&mut scored);
    scored.truncate(k);
    Ok(RetrievalResult {
        entries: scored
            .into_iter()
            .map(|(ad_id, score)| ScoredAd { ad_id, score })
            .collect(),
    })
}

#[derive(Debug)]
struct ListEntry {
    /// Index into the sorted ad table (ascending table index is ascending
    /// ad_id, which keeps tie-breaks consistent).
    ad: u32,
    sub_ids: Vec<u16>,
}

/// Immutable compressed ad index: a trained quantizer, one inverted list
/// per coarse cell, and per-ad weight/norm tables. Searches are read-only.
#[derive(Debug)]
pub struct AdIndex {
    model: PQModel,
    mode: IndexMode,
    lists: Vec<Vec<ListEntry>>,
    ad_ids: Vec<u64>,
    weights: Vec<f64>,
    /// Original (pre-normalization) embedding norms, kept for audit.
    norms: Vec<f64>,
    /// Full single-precision vectors for exact re-rank, when built with
    /// retention enabled.
    retained: Option<Vec<Vec<f32>>>,
}

impl AdIndex {
    pub fn n_ads(&self) -> usize {
        self.ad_ids.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.lists.len()
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn model(&self) -> &PQModel {
        &self.model
    }

    pub fn has_retained(&self) -> bool {
        self.retained.is_some()
    }

    pub fn list_lengths(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.len()).collect()
    }

    pub fn ad_ids(&self) -> &[u64] {
        &self.ad_ids
    }

    fn table_index(&self, ad_id: u64) -> Option<usize> {
        self.ad_ids.binary_search(&ad_id).ok()
    }

    pub fn weight(&self, ad_id: u64) -> Option<f64> {
        self.table_index(ad_id).map(|i| self.weights[i])
    }

    pub fn norm(&self, ad_id: u64) -> Option<f64> {
        self.table_index(ad_id).map(|i| self.norms[i])
    }
}

/// Index build summary for reports and logs.
#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub mode: IndexMode,
    pub n_ads: usize,
    pub n_coarse: usize,
    /// Coarse cells no ad was assigned to; harmless (searches skip them)
    /// but recorded so degenerate builds are visible.
    pub empty_lists: usize,
    pub retained_vectors: bool,
    /// OPQ objective after each alternation; empty for plain PQ.
    pub opq_trace: Vec<f64>,
}

/// Build the compressed index: train the quantizer on unit ad vectors,
/// encode every ad, and populate the inverted lists. Deterministic per
/// seed.
pub fn build_index(
    ads: &AdSet,
    cfg: &QuantizerConfig,
    mode: IndexMode,
    retain_vectors: bool,
) -> Result<(AdIndex, BuildReport)> {
    // Sort the table by ad_id so tie-breaks and serialization are canonical.
    let mut order: Vec<usize> = (0..ads.len()).collect();
    order.sort_by_key(|&i| ads.ids[i]);

    let mut ad_ids = Vec::with_capacity(ads.len());
    let mut weights = Vec::with_capacity(ads.len());
    let mut norms = Vec::with_capacity(ads.len());
    let mut unit_rows: Vec<Vec<f32>> = Vec::with_capacity(ads.len());
    let mut raw_rows: Vec<Vec<f32>> = Vec::with_capacity(ads.len());
    for &i in &order {
        let v = &ads.vectors[i];
        let n = checked_norm(v, "ad")?;
        ad_ids.push(ads.ids[i]);
        weights.push(ads.weights[i]);
        norms.push(n);
        unit_rows.push(v.0.iter().map(|&x| (x / n) as f32).collect());
        raw_rows.push(v.to_f32());
    }

    let (model, opq_trace) = match mode {
        IndexMode::Pq => (quantizer::pq_train(&unit_rows, cfg)?, Vec::new()),
        IndexMode::Opq => {
            let (m, trace) = quantizer::opq_train(&unit_rows, cfg)?;
            (m, trace)
        }
    };
    let codes = quantizer::encode(&model, &unit_rows)?;

    let mut lists: Vec<Vec<ListEntry>> = (0..model.coarse.len()).map(|_| Vec::new()).collect();
    for (i, code) in codes.into_iter().enumerate() {
        lists[code.coarse_id as usize].push(ListEntry {
            ad: i as u32,
            sub_ids: code.sub_ids,
        });
    }
    let empty_lists = lists.iter().filter(|l| l.is_empty()).count();

    let report = BuildReport {
        mode,
        n_ads: ad_ids.len(),
        n_coarse: lists.len(),
        empty_lists,
        retained_vectors: retain_vectors,
        opq_trace,
    };
    let index = AdIndex {
        model,
        mode,
        lists,
        ad_ids,
        weights,
        norms,
        retained: retain_vectors.then_some(raw_rows),
    };
    Ok((index, report))
}

/// Rotate a full-dimension vector by the model rotation (f64 arithmetic on
/// the stored f32 entries).
fn rotate_query(model: &PQModel, v: &[f64]) -> Vec<f64> {
    let dim = model.dim;
    (0..dim)
        .map(|i| {
            model.rotation[i * dim..(i + 1) * dim]
                .iter()
                .zip(v)
                .map(|(r, x)| *r as f64 * x)
                .sum()
        })
        .collect()
}

/// Coarse cells sorted by squared distance to the rotated query, ties by
/// ascending cell id.
fn probe_order(model: &PQModel, z: &[f64]) -> Vec<usize> {
    let mut cells: Vec<(usize, f64)> = model
        .coarse
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = c
                .iter()
                .zip(z)
                .map(|(a, b)| (*a as f64 - b) * (*a as f64 - b))
                .sum();
            (i, d)
        })
        .collect();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    cells.into_iter().map(|(i, _)| i).collect()
}

/// Per-subspace inner-product lookup tables: table[m][j] = <z_m, codeword>.
fn adc_tables(model: &PQModel, z: &[f64]) -> Vec<Vec<f64>> {
    let sub = model.sub_dim();
    model
        .codebooks
        .iter()
        .enumerate()
        .map(|(mi, cb)| {
            let zs = &z[mi * sub..(mi + 1) * sub];
            cb.iter()
                .map(|word| word.iter().zip(zs).map(|(w, x)| *w as f64 * x).sum())
                .collect()
        })
        .collect()
}

/// Scan the probed lists, returning (table index, unweighted ADC cosine).
fn adc_candidates(index: &AdIndex, tables: &[Vec<f64>], probes: &[usize]) -> Vec<(u32, f64)> {
    let mut out = Vec::new();
    for &cell in probes {
        for entry in &index.lists[cell] {
            let adc: f64 = entry
                .sub_ids
                .iter()
                .enumerate()
                .map(|(mi, &id)| tables[mi][id as usize])
                .sum();
            out.push((entry.ad, adc));
        }
    }
    out
}

fn prepare_query(
    index: &AdIndex,
    x: &Embedding96,
    nprobe: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let c = index.n_coarse();
    if nprobe < 1 || nprobe > c {
        return Err(Error::Index(format!(
            "nprobe {nprobe} out of range 1..={c}"
        )));
    }
    let xn = checked_norm(x, "query")?;
    let xhat: Vec<f64> = x.0.iter().map(|v| v / xn).collect();
    let z = rotate_query(&index.model, &xhat);
    let mut probes = probe_order(&index.model, &z);
    probes.truncate(nprobe);
    Ok((z, probes))
}

fn finish(mut scored: Vec<(u64, f64)>, k: usize) -> RetrievalResult {
    sort_scored(&mut scored);
    scored.truncate(k);
    RetrievalResult {
        entries: scored
            .into_iter()
            .map(|(ad_id, score)| ScoredAd { ad_id, score })
            .collect(),
    }
}

/// Strategy (b): weighted maximum-inner-product search over the compressed
/// index. Candidates from the nprobe nearest coarse cells are scored by
/// ADC lookup tables times the ad weight; the top `rerank_depth` of them
/// are re-scored exactly when the index retains full vectors.
pub fn search_mips(
    index: &AdIndex,
    x: &Embedding96,
    k: usize,
    nprobe: usize,
    rerank_depth: usize,
) -> Result<RetrievalResult> {
    let (z, probes) = prepare_query(index, x, nprobe)?;
    let tables = adc_tables(&index.model, &z);
    let mut cands = adc_candidates(index, &tables, &probes);
    for c in cands.iter_mut() {
        c.1 *= index.weights[c.0 as usize];
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(rows) = &index.retained {
        let depth = rerank_depth.min(cands.len());
        for c in cands[..depth].iter_mut() {
            let y = Embedding96::from_f32(&rows[c.0 as usize]);
            c.1 = weighted_score(x, &y, index.weights[c.0 as usize])?;
        }
    }
    let scored: Vec<(u64, f64)> = cands
        .into_iter()
        .map(|(i, s)| (index.ad_ids[i as usize], s))
        .collect();
    Ok(finish(scored, k))
}

/// Strategy (a): cosine-only ANN shortlist, then re-rank the shortlist by
/// the weighted objective using the retained original vectors. Requires an
/// index built with vector retention (this strategy is the full-memory
/// baseline).
pub fn search_cosine_rerank(
    index: &AdIndex,
    x: &Embedding96,
    k: usize,
    nprobe: usize,
    shortlist_size: usize,
) -> Result<RetrievalResult> {
    if shortlist_size < k {
        return Err(Error::Index(format!(
            "shortlist size {shortlist_size} smaller than K {k}"
        )));
    }
    let rows = index.retained.as_ref().ok_or_else(|| {
        Error::Index("cosine+re-rank requires an index built with retained vectors".into())
    })?;
    let (z, probes) = prepare_query(index, x, nprobe)?;
    let tables = adc_tables(&index.model, &z);
    // Shortlist by unweighted cosine only: the weight is invisible here,
    // which is exactly what lets high-bid ads slip out of the shortlist.
    let mut cands = adc_candidates(index, &tables, &probes);
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(shortlist_size);
    let mut scored = Vec::with_capacity(cands.len());
    for (i, _) in cands {
        let y = Embedding96::from_f32(&rows[i as usize]);
        let s = weighted_score(x, &y, index.weights[i as usize])?;
        scored.push((index.ad_ids[i as usize], s));
    }
    Ok(finish(scored, k))
}
