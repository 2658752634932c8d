//! Offline and simulated-online evaluation.
//!
//! Offline metrics follow the comparison protocol the rest of the pipeline
//! is tuned against: AUC over held-out click/unclick events with pctr as
//! the score, and mean teacher relevance of the top-P pairs ranked by pctr
//! over the held-out cross product (test queries x all ads, minus pairs
//! the model trained on). Online behavior is approximated by a seeded
//! impression replay with first-price charging.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::click_model::{Embedding96, ModelParams};
use crate::config::RunConfig;
use crate::corpus::{ClickEvent, ClickLabel, Corpus, QueryRecord};
use crate::retrieval::{search_mips, AdIndex, RetrievalResult};
use crate::teacher::Teacher;
use crate::util::seeded_rng;
use crate::{Error, Result};

/// How AUC is computed, echoed into reports so the protocol is explicit.
pub const AUC_PROTOCOL: &str = "click-vs-unclick on held-out events, pctr as score";

/// Area under the ROC curve via the Mann-Whitney rank formulation: average
/// ranks are assigned to tied scores, so each tied positive-negative pair
/// contributes 1/2.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Eval(format!(
            "auc got {} labels and {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("auc scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(
            "auc undefined: need at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Mean teacher relevance over explicit (query_id, ad_id) pairs.
pub fn mean_relevance(pairs: &[(u64, u64)], corpus: &Corpus, teacher: &Teacher) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Eval("mean relevance over an empty pair set".into()));
    }
    let mut total = 0.0;
    for &(query_id, ad_id) in pairs {
        let q = corpus
            .query(query_id)
            .ok_or_else(|| Error::Eval(format!("unknown query {query_id}")))?;
        let a = corpus
            .ad(ad_id)
            .ok_or_else(|| Error::Eval(format!("unknown ad {ad_id}")))?;
        total += teacher.relevance(q, a)?.value();
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of the oracle's top-K ads that the approximate result found.
pub fn coverage_rate(approx: &RetrievalResult, oracle: &RetrievalResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("coverage rate needs K >= 1".into()));
    }
    if oracle.entries.len() < k {
        return Err(Error::Eval(format!(
            "oracle has {} entries, coverage at K = {k} needs at least K",
            oracle.entries.len()
        )));
    }
    let found: HashSet<u64> = approx.entries.iter().map(|e| e.ad_id).collect();
    let hits = oracle.entries[..k]
        .iter()
        .filter(|e| found.contains(&e.ad_id))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Deterministically split a click log into (test, train) event sets.
/// The split is independent of the training-side validation carve-out, so
/// every strategy sees the same test set.
pub fn test_split(
    log: &[ClickEvent],
    seed: u64,
    test_fraction: f64,
) -> Result<(Vec<ClickEvent>, Vec<ClickEvent>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Eval(format!(
            "test fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut shuffled = log.to_vec();
    let mut rng = seeded_rng(seed, "test-split");
    shuffled.shuffle(&mut rng);
    let n_test = ((shuffled.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.min(shuffled.len());
    let train = shuffled.split_off(n_test);
    Ok((shuffled, train))
}

/// Embed every query with its owning user's profile, keyed by query id.
pub fn embed_all_queries(
    params: &ModelParams,
    corpus: &Corpus,
) -> Result<HashMap<u64, Embedding96>> {
    let mut out = HashMap::with_capacity(corpus.queries.len());
    for q in &corpus.queries {
        let user = corpus.user(q.user_id).ok_or_else(|| {
            Error::Eval(format!(
                "query {} has unknown user {}",
                q.query_id, q.user_id
            ))
        })?;
        out.insert(q.query_id, params.embed_query(user, q));
    }
    Ok(out)
}

/// Embed every ad, keyed by ad id.
pub fn embed_all_ads(params: &ModelParams, corpus: &Corpus) -> HashMap<u64, Embedding96> {
    corpus
        .ads
        .iter()
        .map(|a| (a.ad_id, params.embed_ad(a)))
        .collect()
}

/// The held-out ranking protocol: score the cross product of `query_ids`
/// with every ad by pctr, drop pairs in `observed` (the pairs the model
/// trained on), and keep the top `p` by (pctr desc, query_id asc, ad_id
/// asc).
pub fn top_pairs_by_pctr(
    params: &ModelParams,
    corpus: &Corpus,
    query_ids: &[u64],
    observed: &HashSet<(u64, u64)>,
    p: usize,
) -> Result<Vec<(u64, u64)>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct Key(f64, u64, u64);
    impl Eq for Key {}
    impl PartialOrd for Key {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Key {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // Min-heap eviction order: lowest pctr first; among equal
            // pctrs evict the largest (query, ad) so the kept set matches
            // the (pctr desc, ids asc) sort.
            self.0
                .total_cmp(&other.0)
                .then(other.1.cmp(&self.1))
                .then(other.2.cmp(&self.2))
        }
    }

    if p == 0 {
        return Err(Error::Eval("top-pair protocol needs P >= 1".into()));
    }
    let query_embeds = embed_all_queries(params, corpus)?;
    let ad_embeds = embed_all_ads(params, corpus);
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::with_capacity(p + 1);
    for &query_id in query_ids {
        let qe = query_embeds
            .get(&query_id)
            .ok_or_else(|| Error::Eval(format!("unknown query {query_id}")))?;
        for a in &corpus.ads {
            if observed.contains(&(query_id, a.ad_id)) {
                continue;
            }
            let s = params.similarity(qe, &ad_embeds[&a.ad_id]);
            let pctr = params.pctr_from_similarity(s);
            heap.push(Reverse(Key(pctr, query_id, a.ad_id)));
            if heap.len() > p {
                heap.pop();
            }
        }
    }
    let mut kept: Vec<Key> = heap.into_iter().map(|Reverse(k)| k).collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(kept.into_iter().map(|Key(_, q, a)| (q, a)).collect())
}

/// One model's offline numbers.
#[derive(Debug, Clone, Serialize)]
pub struct OfflineMetrics {
    pub label: String,
    pub auc: f64,
    pub mean_relevance: f64,
    pub n_test_events: usize,
    pub n_rel_pairs: usize,
}

/// Offline comparison: one row per evaluated model, with the protocol
/// echoed so the numbers are interpretable on their own.
#[derive(Debug, Clone, Serialize)]
pub struct OfflineReport {
    pub auc_protocol: String,
    pub rel_top_p: usize,
    pub strategies: Vec<OfflineMetrics>,
}

/// Evaluate one trained model: AUC on the test events, mean teacher
/// relevance of the top-`rel_top_p` held-out pairs. `train_events` defines
/// which pairs the protocol excludes from the cross product.
pub fn offline_eval(
    label: &str,
    params: &ModelParams,
    corpus: &Corpus,
    test_events: &[ClickEvent],
    train_events: &[ClickEvent],
    teacher: &Teacher,
    rel_top_p: usize,
) -> Result<OfflineMetrics> {
    let query_embeds = embed_all_queries(params, corpus)?;
    let ad_embeds = embed_all_ads(params, corpus);
    let mut labels = Vec::with_capacity(test_events.len());
    let mut scores = Vec::with_capacity(test_events.len());
    for e in test_events {
        let qe = query_embeds
            .get(&e.query_id)
            .ok_or_else(|| Error::Eval(format!("unknown query {}", e.query_id)))?;
        let ae = ad_embeds
            .get(&e.ad_id)
            .ok_or_else(|| Error::Eval(format!("unknown ad {}", e.ad_id)))?;
        let s = params.similarity(qe, ae);
        scores.push(params.pctr_from_similarity(s));
        labels.push(e.label == ClickLabel::Click);
    }
    let auc_value = auc(&labels, &scores)?;

    let mut test_queries: Vec<u64> = test_events.iter().map(|e| e.query_id).collect();
    test_queries.sort_unstable();
    test_queries.dedup();
    let observed: HashSet<(u64, u64)> =
        train_events.iter().map(|e| (e.query_id, e.ad_id)).collect();
    let pairs = top_pairs_by_pctr(params, corpus, &test_queries, &observed, rel_top_p)?;
    let rel = mean_relevance(&pairs, corpus, teacher)?;

    Ok(OfflineMetrics {
        label: label.to_string(),
        auc: auc_value,
        mean_relevance: rel,
        n_test_events: test_events.len(),
        n_rel_pairs: pairs.len(),
    })
}

/// Latency summary over individual search calls.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub label: String,
    pub machine: String,
    pub n_queries: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    /// One wall-time sample per (repetition, query) search call.
    #[serde(skip_serializing)]
    pub samples_us: Vec<f64>,
}

/// OS, architecture, and CPU model, recorded with every latency report so
/// absolute numbers are tied to the machine that produced them.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1).map(|v| v.trim().to_string()))
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {} ({cpu})",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Time an arbitrary search callable: `warmup` unrecorded calls, then
/// `repetitions` timed passes over `queries`, each call measured alone on
/// the monotonic clock.
pub fn latency_bench_fn<F>(
    label: &str,
    mut search: F,
    queries: &[Embedding96],
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyReport>
where
    F: FnMut(&Embedding96) -> Result<RetrievalResult>,
{
    if queries.is_empty() {
        return Err(Error::Eval("latency bench needs at least one query".into()));
    }
    if repetitions == 0 {
        return Err(Error::Eval("latency bench needs repetitions >= 1".into()));
    }
    for i in 0..warmup {
        std::hint::black_box(search(&queries[i % queries.len()])?);
    }
    let mut samples_us = Vec::with_capacity(repetitions * queries.len());
    for _ in 0..repetitions {
        for q in queries {
            let start = Instant::now();
            let result = search(q)?;
            let elapsed = start.elapsed();
            std::hint::black_box(&result);
            samples_us.push(elapsed.as_secs_f64() * 1e6);
        }
    }
    let mut sorted = samples_us.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        label: label.to_string(),
        machine: machine_descriptor(),
        n_queries: queries.len(),
        repetitions,
        warmup,
        mean_us: samples_us.iter().sum::<f64>() / samples_us.len() as f64,
        p50_us: nearest_rank(&sorted, 0.50),
        p99_us: nearest_rank(&sorted, 0.99),
        min_us: sorted[0],
        max_us: sorted[sorted.len() - 1],
        samples_us,
    })
}

/// Time compressed-index search at fixed retrieval parameters.
pub fn latency_bench(
    index: &AdIndex,
    queries: &[Embedding96],
    k: usize,
    nprobe: usize,
    rerank_depth: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    latency_bench_fn(
        "compressed-mips",
        |q| search_mips(index, q, k, nprobe, rerank_depth),
        queries,
        repetitions,
        warmup,
    )
}

/// Serving simulation outcome. `spend` and the counters are primary;
/// cpm/ctr/acp are derived from them at full precision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServeReport {
    pub impressions: u64,
    pub clicks: u64,
    pub spend: f64,
    /// 1000 * spend / impressions.
    pub cpm: f64,
    /// clicks / impressions.
    pub ctr: f64,
    /// spend / clicks; absent when nothing was clicked.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acp: Option<f64>,
    /// Analytic expectation of ctr given the displayed ads: mean
    /// ground-truth click probability over the replayed impressions.
    pub expected_ctr: f64,
    /// Standard error of the empirical ctr under that expectation.
    pub ctr_standard_error: f64,
    pub empty: bool,
}

impl ServeReport {
    fn zeroed() -> ServeReport {
        ServeReport {
            impressions: 0,
            clicks: 0,
            spend: 0.0,
            cpm: 0.0,
            ctr: 0.0,
            acp: None,
            expected_ctr: 0.0,
            ctr_standard_error: 0.0,
            empty: true,
        }
    }
}

/// Replay seeded impressions against the index: sample a query by its
/// frequency, retrieve top-K, display the best ad, draw the click from the
/// provided click-probability function, and charge the ad's stored
/// business weight on click (first-price).
pub(crate) fn serve_simulation_with(
    params: &ModelParams,
    index: &AdIndex,
    corpus: &Corpus,
    n_impressions: usize,
    seed: u64,
    k: usize,
    nprobe: usize,
    rerank_depth: usize,
    click_probability: impl Fn(&QueryRecord, u64) -> f64,
) -> Result<ServeReport> {
    if n_impressions == 0 {
        return Ok(ServeReport::zeroed());
    }
    if k == 0 {
        return Err(Error::Eval("serving simulation needs K >= 1".into()));
    }
    let query_embeds = embed_all_queries(params, corpus)?;
    let weights: Vec<f64> = corpus.queries.iter().map(|q| q.frequency).collect();
    let query_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Eval(format!("query frequencies unusable: {e}")))?;
    // Separate streams keep the click draws independent of query sampling,
    // so the analytic expectation conditions cleanly on the query sequence.
    let mut query_rng = seeded_rng(seed, "sim-queries");
    let mut click_rng = seeded_rng(seed, "sim-clicks");

    let mut clicks = 0u64;
    let mut spend = 0.0;
    let mut p_sum = 0.0;
    let mut p_var_sum = 0.0;
    for _ in 0..n_impressions {
        let q = &corpus.queries[query_dist.sample(&mut query_rng)];
        let found = search_mips(index, &query_embeds[&q.query_id], k, nprobe, rerank_depth)?;
        let Some(top) = found.entries.first() else {
            // No candidate in the probed cells: an unfilled impression.
            continue;
        };
        let p = click_probability(q, top.ad_id).clamp(0.0, 1.0);
        p_sum += p;
        p_var_sum += p * (1.0 - p);
        if click_rng.gen::<f64>() < p {
            clicks += 1;
            spend += index.weight(top.ad_id).ok_or_else(|| {
                Error::Eval(format!(
                    "displayed ad {} missing from index table",
                    top.ad_id
                ))
            })?;
        }
    }
    let n = n_impressions as f64;
    Ok(ServeReport {
        impressions: n_impressions as u64,
        clicks,
        spend,
        cpm: 1000.0 * spend / n,
        ctr: clicks as f64 / n,
        acp: (clicks > 0).then(|| spend / clicks as f64),
        expected_ctr: p_sum / n,
        ctr_standard_error: p_var_sum.sqrt() / n,
        empty: false,
    })
}

/// [`serve_simulation_with`] using the corpus's ground-truth click model.
pub fn serve_simulation(
    params: &ModelParams,
    index: &AdIndex,
    corpus: &Corpus,
    n_impressions: usize,
    seed: u64,
    k: usize,
    nprobe: usize,
    rerank_depth: usize,
) -> Result<ServeReport> {
    serve_simulation_with(
        params,
        index,
        corpus,
        n_impressions,
        seed,
        k,
        nprobe,
        rerank_depth,
        |q, ad_id| {
            corpus
                .ad(ad_id)
                .map(|a| corpus.ground_truth_ctr(q, a))
                .unwrap_or(0.0)
        },
    )
}

/// Build the ad-side retrieval index directly from a trained model and the
/// corpus: embeds every ad, pairs it with its bid, and quantizes. The one
/// construction path shared by the CLI, benches, and acceptance checks.
pub fn build_corpus_index(
    params: &ModelParams,
    corpus: &Corpus,
    config: &RunConfig,
    mode: crate::retrieval::IndexMode,
    retain: bool,
) -> Result<(AdIndex, crate::retrieval::BuildReport)> {
    let ids: Vec<u64> = corpus.ads.iter().map(|a| a.ad_id).collect();
    let vectors: Vec<Embedding96> = corpus.ads.iter().map(|a| params.embed_ad(a)).collect();
    let weights: Vec<f64> = corpus.ads.iter().map(|a| a.bid).collect();
    let ads = crate::retrieval::AdSet::new(&ids, &vectors, &weights)?;
    let qcfg = crate::quantizer::QuantizerConfig::from_run(config);
    crate::retrieval::build_index(&ads, &qcfg, mode, retain)
}
