//! Synthetic ad/query/user corpus and click-log generation.
//!
//! Every record carries a latent topic, and topics are probability
//! distributions over a shared token vocabulary that overlap smoothly, so
//! ground-truth relevance (topic similarity) exists exactly and downstream
//! stages can be scored against it. Query frequencies and ad popularities
//! follow a Zipf-like law so a small head carries most impressions, which is
//! what lets a click-only model drift toward head ads.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::prelude::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::util::{seeded_rng, sha256_file_hex, sigmoid};
use crate::{Error, Result};

/// A latent topic: a probability distribution over the token vocabulary.
#[derive(Debug, Clone)]
pub struct Topic {
    /// Token weights; nonnegative, sum to 1 within 1e-9.
    pub weights: Vec<f64>,
    cdf: Vec<f64>,
}

impl Topic {
    fn new(weights: Vec<f64>) -> Self {
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cdf.push(acc);
        }
        Topic { weights, cdf }
    }

    /// Draw one token id from this topic's distribution.
    pub fn sample_token(&self, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.gen();
        match self
            .cdf
            .binary_search_by(|probe| probe.partial_cmp(&u).unwrap())
        {
            Ok(i) | Err(i) => (i.min(self.cdf.len() - 1)) as u32,
        }
    }
}

/// One advertisement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdRecord {
    pub ad_id: u64,
    pub tokens: Vec<u32>,
    /// Per-click payment; doubles as the business weight at retrieval time.
    pub bid: f64,
    pub topic_id: usize,
    /// Nonnegative frequency weight; head ads have large values.
    pub popularity: f64,
}

/// One search query.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryRecord {
    pub query_id: u64,
    pub user_id: u64,
    pub tokens: Vec<u32>,
    pub topic_id: usize,
    /// Nonnegative weight governing how often the query is issued.
    pub frequency: f64,
}

/// A user's interest profile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserProfile {
    pub user_id: u64,
    pub feature_tokens: Vec<u32>,
}

/// Click/unclick outcome of one impression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClickLabel {
    Click,
    Unclick,
}

/// One (user, query, ad, label) record from the simulated search log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub user_id: u64,
    pub query_id: u64,
    pub ad_id: u64,
    pub label: ClickLabel,
}

/// The generated corpus plus the latent structure behind it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: RunConfig,
    pub seed: u64,
    pub queries: Vec<QueryRecord>,
    pub ads: Vec<AdRecord>,
    pub users: Vec<UserProfile>,
    topics: Vec<Topic>,
    /// Pairwise topic cosine similarity, clamped to [0, 1]. Exactly symmetric.
    topic_sim: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    /// Ground-truth relevance of two topics: cosine similarity of their
    /// token distributions, in [0, 1].
    pub fn topic_similarity(&self, a: usize, b: usize) -> f64 {
        self.topic_sim[a][b]
    }

    pub fn query(&self, query_id: u64) -> Option<&QueryRecord> {
        self.queries
            .get(query_id as usize)
            .filter(|q| q.query_id == query_id)
    }

    pub fn ad(&self, ad_id: u64) -> Option<&AdRecord> {
        self.ads.get(ad_id as usize).filter(|a| a.ad_id == ad_id)
    }

    pub fn user(&self, user_id: u64) -> Option<&UserProfile> {
        self.users
            .get(user_id as usize)
            .filter(|u| u.user_id == user_id)
    }

    /// Ground-truth click probability for a (query, ad) pair.
    pub fn ground_truth_ctr(&self, query: &QueryRecord, ad: &AdRecord) -> f64 {
        let sim = self.topic_similarity(query.topic_id, ad.topic_id);
        let logit = self.config.ctr_coef_sim * sim
            + self.config.ctr_coef_pop * (1.0 + ad.popularity).ln()
            + self.config.ctr_coef_bias;
        sigmoid(logit)
    }
}

/// Build the topic set for a config. Purely deterministic: tokens sit on a
/// circle and each topic is a von Mises bump over it, so adjacent topics
/// overlap and ground-truth similarity varies smoothly.
pub fn build_topics(config: &RunConfig) -> (Vec<Topic>, Vec<Vec<f64>>) {
    let v = config.vocab_size;
    let t = config.n_topics;
    let kappa = config.topic_concentration;
    let mut topics = Vec::with_capacity(t);
    for ti in 0..t {
        let center = 2.0 * std::f64::consts::PI * ti as f64 / t as f64;
        let mut weights: Vec<f64> = (0..v)
            .map(|vi| {
                let angle = 2.0 * std::f64::consts::PI * vi as f64 / v as f64;
                (kappa * (angle - center).cos()).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        topics.push(Topic::new(weights));
    }

    let mut sim = vec![vec![0.0; t]; t];
    for a in 0..t {
        for b in a..t {
            let dot: f64 = topics[a]
                .weights
                .iter()
                .zip(&topics[b].weights)
                .map(|(x, y)| x * y)
                .sum();
            let na: f64 = topics[a].weights.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = topics[b].weights.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = (dot / (na * nb)).clamp(0.0, 1.0);
            sim[a][b] = s;
            sim[b][a] = s;
        }
    }
    (topics, sim)
}

/// Zipf-like frequency weight for a 1-based rank: scale / rank^exponent.
fn zipf_weight(rank: usize, n: usize, exponent: f64) -> f64 {
    n as f64 / (rank as f64).powf(exponent)
}

/// Generate a corpus deterministically from (config, seed).
pub fn generate_corpus(config: &RunConfig, seed: u64) -> Result<Corpus> {
    config.validate_corpus()?;
    let (topics, topic_sim) = build_topics(config);
    let mut rng = seeded_rng(seed, "corpus");

    let mut users = Vec::with_capacity(config.n_users);
    let mut user_topics = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users as u64 {
        let topic_id = rng.gen_range(0..config.n_topics);
        let feature_tokens = (0..config.tokens_per_user)
            .map(|_| topics[topic_id].sample_token(&mut rng))
            .collect();
        user_topics.push(topic_id);
        users.push(UserProfile {
            user_id,
            feature_tokens,
        });
    }

    let mut ad_ranks: Vec<usize> = (1..=config.n_ads).collect();
    ad_ranks.shuffle(&mut rng);
    let mut ads = Vec::with_capacity(config.n_ads);
    for ad_id in 0..config.n_ads as u64 {
        let topic_id = rng.gen_range(0..config.n_topics);
        let tokens = (0..config.tokens_per_ad)
            .map(|_| topics[topic_id].sample_token(&mut rng))
            .collect();
        let bid = (rng.gen_range(config.bid_min.ln()..=config.bid_max.ln())).exp();
        let popularity = zipf_weight(ad_ranks[ad_id as usize], config.n_ads, config.zipf_exponent);
        ads.push(AdRecord {
            ad_id,
            tokens,
            bid,
            topic_id,
            popularity,
        });
    }

    let mut query_ranks: Vec<usize> = (1..=config.n_queries).collect();
    query_ranks.shuffle(&mut rng);
    let mut queries = Vec::with_capacity(config.n_queries);
    for query_id in 0..config.n_queries as u64 {
        let user_id = rng.gen_range(0..config.n_users) as u64;
        // Half the queries follow the issuing user's interest topic, so the
        // user profile is informative but not decisive.
        let topic_id = if rng.gen::<f64>() < 0.5 {
            user_topics[user_id as usize]
        } else {
            rng.gen_range(0..config.n_topics)
        };
        let tokens = (0..config.tokens_per_query)
            .map(|_| topics[topic_id].sample_token(&mut rng))
            .collect();
        let frequency = zipf_weight(
            query_ranks[query_id as usize],
            config.n_queries,
            config.zipf_exponent,
        );
        queries.push(QueryRecord {
            query_id,
            user_id,
            tokens,
            topic_id,
            frequency,
        });
    }

    Ok(Corpus {
        config: config.clone(),
        seed,
        queries,
        ads,
        users,
        topics,
        topic_sim,
    })
}

/// Simulate `n_impressions` impressions: queries drawn by frequency, ads by
/// popularity x relevance, labels drawn from the ground-truth click
/// probability. Deterministic per seed.
pub fn simulate_click_log(
    corpus: &Corpus,
    n_impressions: usize,
    seed: u64,
) -> Result<Vec<ClickEvent>> {
    if corpus.queries.is_empty() || corpus.ads.is_empty() {
        return Err(Error::Corpus(
            "cannot simulate impressions on an empty corpus".into(),
        ));
    }
    let mut rng = seeded_rng(seed, "clicklog");
    let query_weights: Vec<f64> = corpus.queries.iter().map(|q| q.frequency).collect();
    let query_dist = WeightedIndex::new(&query_weights)
        .map_err(|e| Error::Corpus(format!("query frequencies unusable: {e}")))?;

    // Ad sampling weight depends only on the query's topic, so one table per
    // topic covers every impression.
    let mut ad_dists = Vec::with_capacity(corpus.n_topics());
    for t in 0..corpus.n_topics() {
        let weights: Vec<f64> = corpus
            .ads
            .iter()
            .map(|a| (a.popularity * corpus.topic_similarity(t, a.topic_id)).max(1e-12))
            .collect();
        ad_dists.push(
            WeightedIndex::new(&weights)
                .map_err(|e| Error::Corpus(format!("ad weights unusable: {e}")))?,
        );
    }

    let mut events = Vec::with_capacity(n_impressions);
    for _ in 0..n_impressions {
        let q = &corpus.queries[query_dist.sample(&mut rng)];
        let a = &corpus.ads[ad_dists[q.topic_id].sample(&mut rng)];
        let p = corpus.ground_truth_ctr(q, a);
        let label = if rng.gen::<f64>() < p {
            ClickLabel::Click
        } else {
            ClickLabel::Unclick
        };
        events.push(ClickEvent {
            user_id: q.user_id,
            query_id: q.query_id,
            ad_id: a.ad_id,
            label,
        });
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Persistence: three NDJSON entity files, a TSV click log, and a manifest
// recording config, seed, and a content checksum.
// ---------------------------------------------------------------------------

pub const QUERIES_FILE: &str = "queries.ndjson";
pub const ADS_FILE: &str = "ads.ndjson";
pub const USERS_FILE: &str = "users.ndjson";
pub const CLICKS_FILE: &str = "clicks.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    seed: u64,
    checksum: String,
}

fn data_checksum(dir: &Path) -> Result<String> {
    let mut hasher_input = Vec::new();
    for name in [QUERIES_FILE, ADS_FILE, USERS_FILE, CLICKS_FILE] {
        hasher_input.extend_from_slice(&std::fs::read(dir.join(name))?);
    }
    Ok(crate::util::sha256_hex(&hasher_input))
}

/// Persist a corpus and its click log under `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus, log: &[ClickEvent]) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut qf = BufWriter::new(std::fs::File::create(dir.join(QUERIES_FILE))?);
    for q in &corpus.queries {
        serde_json::to_writer(&mut qf, q)?;
        qf.write_all(b"\n")?;
    }
    qf.flush()?;

    let mut af = BufWriter::new(std::fs::File::create(dir.join(ADS_FILE))?);
    for a in &corpus.ads {
        serde_json::to_writer(&mut af, a)?;
        af.write_all(b"\n")?;
    }
    af.flush()?;

    let mut uf = BufWriter::new(std::fs::File::create(dir.join(USERS_FILE))?);
    for u in &corpus.users {
        serde_json::to_writer(&mut uf, u)?;
        uf.write_all(b"\n")?;
    }
    uf.flush()?;

    let mut cf = BufWriter::new(std::fs::File::create(dir.join(CLICKS_FILE))?);
    for e in log {
        let label = match e.label {
            ClickLabel::Click => 1,
            ClickLabel::Unclick => 0,
        };
        writeln!(cf, "{}\t{}\t{}\t{}", e.user_id, e.query_id, e.ad_id, label)?;
    }
    cf.flush()?;

    let manifest = Manifest {
        config: corpus.config.clone(),
        seed: corpus.seed,
        checksum: data_checksum(dir)?,
    };
    let mut mf = BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    Ok(())
}

/// Load a corpus and click log from `dir`, verifying the manifest checksum.
/// Topics are rebuilt from the manifest's config; they are a pure function
/// of it and are not persisted.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, Vec<ClickEvent>)> {
    let manifest: Manifest =
        serde_json::from_reader(std::fs::File::open(dir.join(MANIFEST_FILE))?)?;
    let actual = data_checksum(dir)?;
    if actual != manifest.checksum {
        return Err(Error::Format(format!(
            "corpus checksum mismatch in {}: manifest {} vs data {}",
            dir.display(),
            manifest.checksum,
            actual
        )));
    }

    let read_lines = |name: &str| -> Result<Vec<String>> {
        let f = std::fs::File::open(dir.join(name))?;
        let mut out = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if !line.is_empty() {
                out.push(line);
            }
        }
        Ok(out)
    };

    let queries: Vec<QueryRecord> = read_lines(QUERIES_FILE)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    let ads: Vec<AdRecord> = read_lines(ADS_FILE)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    let users: Vec<UserProfile> = read_lines(USERS_FILE)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;

    let mut log = Vec::new();
    for line in read_lines(CLICKS_FILE)? {
        let mut parts = line.split('\t');
        let mut next_u64 = |what: &str| -> Result<u64> {
            parts
                .next()
                .ok_or_else(|| Error::Format(format!("click log: missing {what}")))?
                .parse()
                .map_err(|_| Error::Format(format!("click log: bad {what} in '{line}'")))
        };
        let user_id = next_u64("user_id")?;
        let query_id = next_u64("query_id")?;
        let ad_id = next_u64("ad_id")?;
        let label = match next_u64("label")? {
            0 => ClickLabel::Unclick,
            1 => ClickLabel::Click,
            other => {
                return Err(Error::Format(format!(
                    "click log: label must be 0 or 1, got {other}"
                )))
            }
        };
        log.push(ClickEvent {
            user_id,
            query_id,
            ad_id,
            label,
        });
    }

    let (topics, topic_sim) = build_topics(&manifest.config);
    let corpus = Corpus {
        config: manifest.config,
        seed: manifest.seed,
        queries,
        ads,
        users,
        topics,
        topic_sim,
    };

    for e in &log {
        if corpus.query(e.query_id).is_none()
            || corpus.ad(e.ad_id).is_none()
            || corpus.user(e.user_id).is_none()
        {
            return Err(Error::Corpus(format!(
                "click event references unknown ids: {e:?}"
            )));
        }
    }
    Ok((corpus, log))
}

/// The content checksum of a persisted corpus directory, for determinism
/// checks and provenance reporting.
pub fn corpus_checksum(dir: &Path) -> Result<String> {
    let _ = sha256_file_hex(&dir.join(MANIFEST_FILE))?; // ensure present
    data_checksum(dir)
}
