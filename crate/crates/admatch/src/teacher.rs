//! The relevance judger: a deterministic stand-in for the production
//! matching model that the click model is distilled against.
//!
//! Relevance is the weighted Jaccard overlap of the query/ad token
//! multisets, optionally blended with the corpus ground-truth topic
//! similarity (oracle mode). Blind mode sees only tokens.

use crate::active_loop::AugmentedPair;
use crate::config::TeacherMode;
use crate::corpus::{AdRecord, Corpus, QueryRecord};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A semantic relevance score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Teacher(format!(
                "relevance score {value} outside [0, 1]"
            )));
        }
        Ok(RelevanceScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Relevance judger over one corpus. Token lists are pre-sorted per record
/// so scoring a pair is a single merge scan.
pub struct Teacher {
    mode: TeacherMode,
    blend: f64,
    sorted_query_tokens: Vec<Vec<u32>>,
    sorted_ad_tokens: Vec<Vec<u32>>,
    topic_sim: Vec<Vec<f64>>,
}

/// Multiset intersection size of two sorted token lists.
fn multiset_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter
}

/// Weighted Jaccard of two token multisets: sum of per-token minimum counts
/// over sum of per-token maximum counts. Inputs must be sorted.
fn weighted_jaccard(a: &[u32], b: &[u32]) -> f64 {
    let inter = multiset_intersection(a, b);
    // sum(max) = |a| + |b| - sum(min)
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl Teacher {
    /// Build a teacher for `corpus`, taking mode and blend from its config.
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let blend = corpus.config.teacher_blend;
        if !(0.0..=1.0).contains(&blend) {
            return Err(Error::Teacher(format!(
                "teacher blend {blend} outside [0, 1]"
            )));
        }
        let sort = |tokens: &[u32]| {
            let mut t = tokens.to_vec();
            t.sort_unstable();
            t
        };
        let t = corpus.n_topics();
        let mut topic_sim = vec![vec![0.0; t]; t];
        for (a, row) in topic_sim.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = corpus.topic_similarity(a, b);
            }
        }
        Ok(Teacher {
            mode: corpus.config.teacher_mode,
            blend,
            sorted_query_tokens: corpus.queries.iter().map(|q| sort(&q.tokens)).collect(),
            sorted_ad_tokens: corpus.ads.iter().map(|a| sort(&a.tokens)).collect(),
            topic_sim,
        })
    }

    pub fn mode(&self) -> TeacherMode {
        self.mode
    }

    fn score_sorted(
        &self,
        query_tokens: &[u32],
        ad_tokens: &[u32],
        query_topic: usize,
        ad_topic: usize,
    ) -> f64 {
        let lexical = weighted_jaccard(query_tokens, ad_tokens);
        match self.mode {
            TeacherMode::Blind => lexical,
            TeacherMode::Oracle => {
                let sim = self.topic_sim[query_topic][ad_topic];
                (1.0 - self.blend) * lexical + self.blend * sim
            }
        }
    }

    /// Score the semantic relevance of a (query, ad) pair.
    pub fn relevance(&self, query: &QueryRecord, ad: &AdRecord) -> Result<RelevanceScore> {
        if query.tokens.is_empty() {
            return Err(Error::Teacher(format!(
                "query {} has no tokens",
                query.query_id
            )));
        }
        if ad.tokens.is_empty() {
            return Err(Error::Teacher(format!("ad {} has no tokens", ad.ad_id)));
        }
        // Use the prebuilt sorted lists when the record is the corpus one;
        // otherwise sort a local copy so foreign records score identically.
        let cached_q = self
            .sorted_query_tokens
            .get(query.query_id as usize)
            .filter(|c| c.len() == query.tokens.len());
        let cached_a = self
            .sorted_ad_tokens
            .get(ad.ad_id as usize)
            .filter(|c| c.len() == ad.tokens.len());
        let score = match (cached_q, cached_a) {
            (Some(q), Some(a)) => self.score_sorted(q, a, query.topic_id, ad.topic_id),
            (q_opt, a_opt) => {
                let sort = |tokens: &[u32]| {
                    let mut t = tokens.to_vec();
                    t.sort_unstable();
                    t
                };
                let q_local;
                let q = match q_opt {
                    Some(c) => c.as_slice(),
                    None => {
                        q_local = sort(&query.tokens);
                        q_local.as_slice()
                    }
                };
                let a_local;
                let a = match a_opt {
                    Some(c) => c.as_slice(),
                    None => {
                        a_local = sort(&ad.tokens);
                        a_local.as_slice()
                    }
                };
                self.score_sorted(q, a, query.topic_id, ad.topic_id)
            }
        };
        RelevanceScore::new(score)
    }

    /// Keep exactly the pairs whose relevance is strictly below `threshold`,
    /// preserving input order and attaching each pair's score.
    pub fn filter_low_relevance(
        &self,
        pairs: &[(&QueryRecord, &AdRecord)],
        threshold: f64,
    ) -> Result<Vec<AugmentedPair>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Teacher(format!(
                "relevance threshold {threshold} outside [0, 1]"
            )));
        }
        let mut out = Vec::new();
        for &(query, ad) in pairs {
            let score = self.relevance(query, ad)?;
            if score.value() < threshold {
                out.push(AugmentedPair {
                    user_id: query.user_id,
                    query_id: query.query_id,
                    ad_id: ad.ad_id,
                    relevance: score,
                    pctr: 0.0,
                    labeled_bad: false,
                });
            }
        }
        Ok(out)
    }
}
