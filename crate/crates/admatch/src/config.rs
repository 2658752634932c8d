//! Run configuration: a flat key=value file with CLI overrides.
//!
//! Every tunable named by the pipeline lives here with its default. Unknown
//! keys are rejected so typos fail loudly, and the fully-resolved config can
//! be echoed into reports for provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which data-generation strategy trains the click model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Click history plus teacher-filtered, ctr-sampled bad cases.
    Active,
    /// Click history plus uniformly sampled bad cases (no teacher).
    RandomBad,
    /// Click history only; the bad class is never observed.
    TwoClass,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Strategy::Active),
            "random-bad" => Ok(Strategy::RandomBad),
            "two-class" => Ok(Strategy::TwoClass),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected active|random-bad|two-class)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Active => write!(f, "active"),
            Strategy::RandomBad => write!(f, "random-bad"),
            Strategy::TwoClass => write!(f, "two-class"),
        }
    }
}

/// How the teacher scores relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Lexical overlap blended with latent topic similarity.
    Oracle,
    /// Lexical overlap only.
    Blind,
}

impl std::str::FromStr for TeacherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(TeacherMode::Oracle),
            "blind" => Ok(TeacherMode::Blind),
            other => Err(Error::Config(format!(
                "unknown teacher mode '{other}' (expected oracle|blind)"
            ))),
        }
    }
}

/// Full pipeline configuration. Field defaults are the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // corpus
    pub n_queries: usize,
    pub n_ads: usize,
    pub n_users: usize,
    pub n_topics: usize,
    pub vocab_size: usize,
    pub tokens_per_query: usize,
    pub tokens_per_ad: usize,
    pub tokens_per_user: usize,
    pub zipf_exponent: f64,
    /// Von Mises concentration of topic bumps over the token circle; higher
    /// values give sharper, more separable topics.
    pub topic_concentration: f64,
    pub bid_min: f64,
    pub bid_max: f64,
    /// Ground-truth click logit coefficients: sigmoid(a*sim + b*ln(1+pop) + c).
    pub ctr_coef_sim: f64,
    pub ctr_coef_pop: f64,
    pub ctr_coef_bias: f64,
    pub n_impressions: usize,

    // teacher
    pub teacher_mode: TeacherMode,
    pub teacher_blend: f64,
    pub relevance_threshold: f64,

    // click model
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub learning_rate: f64,
    pub momentum: f64,

    // active loop
    pub max_epochs: usize,
    /// Early-stop threshold on per-epoch validation-loss improvement. Training
    /// stops once (prev_loss - cur_loss) < eps, so a negative value tolerates
    /// regressions up to |eps| and effectively fixes the budget at max_epochs.
    /// The validation loss plateaus for many epochs before topic structure is
    /// picked up, so a fixed budget is the reliable default.
    pub convergence_eps: f64,
    pub sampler_gamma: f64,
    pub bad_budget: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub strategy: Strategy,

    // quantizer
    pub pq_subspaces: usize,
    pub pq_centroids: usize,
    /// Coarse inverted-list centroid count; 0 means sqrt(N) at build time.
    pub coarse_centroids: usize,
    pub kmeans_max_iters: usize,
    pub opq_alternations: usize,
    /// Training-sample cap for quantizer fitting; full data is always encoded.
    pub max_train_points: usize,

    // retrieval
    pub nprobe: usize,
    pub rerank_depth: usize,
    pub shortlist_size: usize,
    pub top_k: usize,
    pub retain_vectors: bool,

    // eval
    pub rel_top_p: usize,
    pub test_fraction: f64,
    pub bench_warmup: usize,
    pub bench_repetitions: usize,

    // misc
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_queries: 1000,
            n_ads: 2000,
            n_users: 300,
            n_topics: 8,
            vocab_size: 1000,
            tokens_per_query: 8,
            tokens_per_ad: 12,
            tokens_per_user: 6,
            zipf_exponent: 1.1,
            topic_concentration: 12.0,
            bid_min: 0.5,
            bid_max: 5.0,
            ctr_coef_sim: 4.0,
            ctr_coef_pop: 0.5,
            ctr_coef_bias: -3.0,
            n_impressions: 50_000,
            teacher_mode: TeacherMode::Oracle,
            teacher_blend: 0.5,
            relevance_threshold: 0.3,
            embed_dim: 32,
            hidden1: 128,
            hidden2: 96,
            learning_rate: 0.15,
            momentum: 0.9,
            max_epochs: 40,
            convergence_eps: -1.0,
            sampler_gamma: 1.0,
            bad_budget: 128,
            batch_size: 256,
            val_fraction: 0.1,
            strategy: Strategy::Active,
            pq_subspaces: 3,
            pq_centroids: 256,
            coarse_centroids: 0,
            kmeans_max_iters: 25,
            opq_alternations: 10,
            max_train_points: 32_768,
            nprobe: 16,
            rerank_depth: 200,
            shortlist_size: 200,
            top_k: 10,
            retain_vectors: false,
            rel_top_p: 1000,
            test_fraction: 0.2,
            bench_warmup: 5,
            bench_repetitions: 3,
            seed: 42,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Parse a key=value config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set a single key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "n_queries" => self.n_queries = num(key, value)?,
            "n_ads" => self.n_ads = num(key, value)?,
            "n_users" => self.n_users = num(key, value)?,
            "n_topics" => self.n_topics = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "tokens_per_query" => self.tokens_per_query = num(key, value)?,
            "tokens_per_ad" => self.tokens_per_ad = num(key, value)?,
            "tokens_per_user" => self.tokens_per_user = num(key, value)?,
            "zipf_exponent" => self.zipf_exponent = num(key, value)?,
            "topic_concentration" => self.topic_concentration = num(key, value)?,
            "bid_min" => self.bid_min = num(key, value)?,
            "bid_max" => self.bid_max = num(key, value)?,
            "ctr_coef_sim" => self.ctr_coef_sim = num(key, value)?,
            "ctr_coef_pop" => self.ctr_coef_pop = num(key, value)?,
            "ctr_coef_bias" => self.ctr_coef_bias = num(key, value)?,
            "n_impressions" => self.n_impressions = num(key, value)?,
            "teacher_mode" => self.teacher_mode = value.parse()?,
            "teacher_blend" => self.teacher_blend = num(key, value)?,
            "relevance_threshold" => self.relevance_threshold = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden1" => self.hidden1 = num(key, value)?,
            "hidden2" => self.hidden2 = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "convergence_eps" => self.convergence_eps = num(key, value)?,
            "sampler_gamma" => self.sampler_gamma = num(key, value)?,
            "bad_budget" => self.bad_budget = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "pq_subspaces" => self.pq_subspaces = num(key, value)?,
            "pq_centroids" => self.pq_centroids = num(key, value)?,
            "coarse_centroids" => self.coarse_centroids = num(key, value)?,
            "kmeans_max_iters" => self.kmeans_max_iters = num(key, value)?,
            "opq_alternations" => self.opq_alternations = num(key, value)?,
            "max_train_points" => self.max_train_points = num(key, value)?,
            "nprobe" => self.nprobe = num(key, value)?,
            "rerank_depth" => self.rerank_depth = num(key, value)?,
            "shortlist_size" => self.shortlist_size = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "retain_vectors" => self.retain_vectors = num(key, value)?,
            "rel_top_p" => self.rel_top_p = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "bench_warmup" => self.bench_warmup = num(key, value)?,
            "bench_repetitions" => self.bench_repetitions = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// The fully-resolved config as an ordered key=value map, for echoing
    /// into manifests and reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let json = serde_json::to_value(self).expect("config serializes");
        let obj = json.as_object().expect("config is an object");
        obj.iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    /// Validate cross-field constraints shared by corpus generation.
    pub fn validate_corpus(&self) -> Result<()> {
        if self.n_queries == 0 || self.n_ads == 0 || self.n_users == 0 {
            return Err(Error::Config("corpus sizes must all be at least 1".into()));
        }
        if self.n_topics == 0 {
            return Err(Error::Config("n_topics must be at least 1".into()));
        }
        if self.vocab_size < self.n_topics {
            return Err(Error::Config(format!(
                "vocabulary size {} must be at least the topic count {}",
                self.vocab_size, self.n_topics
            )));
        }
        if self.tokens_per_query == 0 || self.tokens_per_ad == 0 || self.tokens_per_user == 0 {
            return Err(Error::Config("token counts must be at least 1".into()));
        }
        if self.bid_min <= 0.0 || self.bid_max < self.bid_min {
            return Err(Error::Config(format!(
                "bid range [{}, {}] must satisfy 0 < min <= max",
                self.bid_min, self.bid_max
            )));
        }
        Ok(())
    }
}
