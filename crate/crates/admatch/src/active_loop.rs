//! The active-learning training loop.
//!
//! Per batch of click history: cross-join the batch's queries and ads into
//! synthetic pairs, keep the low-relevance ones per the teacher, score them
//! with the current student model, sample "bad cases" in proportion to
//! predicted CTR, then train on the click batch plus the sampled bad cases
//! and clear the buffer.

use std::collections::HashSet;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::click_model::{batch_loss, ClassLabel, ModelParams, TrainExample, Trainer};
use crate::config::{RunConfig, Strategy};
use crate::corpus::{AdRecord, ClickEvent, ClickLabel, Corpus, QueryRecord};
use crate::teacher::{RelevanceScore, Teacher};
use crate::util::{derive_seed, seeded_rng};
use crate::{Error, Result};

/// A synthetic low-relevance (query, ad) pair flowing through the loop:
/// born in the teacher filter, scored with pctr by the student, and flagged
/// once the sampler picks it as a bad case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedPair {
    pub user_id: u64,
    pub query_id: u64,
    pub ad_id: u64,
    pub relevance: RelevanceScore,
    /// Student-predicted click probability; 0 until scored.
    pub pctr: f64,
    /// True once the sampler selected this pair as a bad case.
    pub labeled_bad: bool,
}

/// Knobs governing one training run.
#[derive(Debug, Clone, Copy)]
pub struct ActiveLoopConfig {
    pub max_epochs: usize,
    pub convergence_eps: f64,
    pub relevance_threshold: f64,
    pub sampler_gamma: f64,
    pub bad_budget: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ActiveLoopConfig {
    pub fn from_run(config: &RunConfig) -> Result<Self> {
        if config.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if config.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&config.relevance_threshold) {
            return Err(Error::Config(format!(
                "relevance_threshold {} outside [0, 1]",
                config.relevance_threshold
            )));
        }
        if !(config.sampler_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "sampler_gamma {} must be nonnegative",
                config.sampler_gamma
            )));
        }
        Ok(ActiveLoopConfig {
            max_epochs: config.max_epochs,
            convergence_eps: config.convergence_eps,
            relevance_threshold: config.relevance_threshold,
            sampler_gamma: config.sampler_gamma,
            bad_budget: config.bad_budget,
            batch_size: config.batch_size,
            seed: config.seed,
        })
    }
}

/// Cross-join the batch's deduplicated query and ad sets, minus the pairs
/// actually observed in the batch. Output is query-major, ad id ascending.
pub fn augment<'c>(
    batch: &[ClickEvent],
    corpus: &'c Corpus,
) -> Result<Vec<(&'c QueryRecord, &'c AdRecord)>> {
    if batch.is_empty() {
        return Err(Error::Training("augment requires a nonempty batch".into()));
    }
    let mut query_ids: Vec<u64> = Vec::new();
    let mut ad_ids: Vec<u64> = Vec::new();
    let mut observed: HashSet<(u64, u64)> = HashSet::with_capacity(batch.len());
    for e in batch {
        observed.insert((e.query_id, e.ad_id));
        query_ids.push(e.query_id);
        ad_ids.push(e.ad_id);
    }
    query_ids.sort_unstable();
    query_ids.dedup();
    ad_ids.sort_unstable();
    ad_ids.dedup();

    let mut pairs = Vec::with_capacity(query_ids.len() * ad_ids.len());
    for &qid in &query_ids {
        let query = corpus
            .query(qid)
            .ok_or_else(|| Error::Corpus(format!("batch references unknown query {qid}")))?;
        for &aid in &ad_ids {
            if observed.contains(&(qid, aid)) {
                continue;
            }
            let ad = corpus
                .ad(aid)
                .ok_or_else(|| Error::Corpus(format!("batch references unknown ad {aid}")))?;
            pairs.push((query, ad));
        }
    }
    Ok(pairs)
}

/// Sample up to `budget` bad cases without replacement, with weight
/// pctr^gamma (gamma = 0 degenerates to uniform exploration). Pairs with
/// zero weight are never selected; the result is deterministic per seed.
pub fn sample_bad_cases(
    pairs: &[AugmentedPair],
    budget: usize,
    gamma: f64,
    seed: u64,
) -> Vec<AugmentedPair> {
    if budget == 0 || pairs.is_empty() {
        return Vec::new();
    }
    let mut weights: Vec<f64> = pairs
        .iter()
        .map(|p| {
            if gamma == 0.0 {
                1.0
            } else if p.pctr.is_finite() && p.pctr > 0.0 {
                p.pctr.powf(gamma)
            } else {
                0.0
            }
        })
        .collect();

    let mut rng = seeded_rng(seed, "bad-case-sampler");
    let mut picked = Vec::with_capacity(budget.min(pairs.len()));
    for _ in 0..budget.min(pairs.len()) {
        let Ok(dist) = WeightedIndex::new(&weights) else {
            break; // remaining total weight is zero
        };
        let idx = dist.sample(&mut rng);
        let mut p = pairs[idx];
        p.labeled_bad = true;
        picked.push(p);
        weights[idx] = 0.0;
    }
    picked
}

/// The per-batch training buffer: the click-history batch plus sampled bad
/// cases. Drained into the optimizer and left empty after every update.
#[derive(Debug, Default)]
pub struct TrainBuffer {
    examples: Vec<TrainExample>,
}

impl TrainBuffer {
    pub fn new() -> Self {
        TrainBuffer::default()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn push_click_history(&mut self, batch: &[ClickEvent]) {
        self.examples.extend(batch.iter().map(|e| TrainExample {
            user_id: e.user_id,
            query_id: e.query_id,
            ad_id: e.ad_id,
            label: match e.label {
                ClickLabel::Click => ClassLabel::Click,
                ClickLabel::Unclick => ClassLabel::Unclick,
            },
        }));
    }

    pub fn push_bad_cases(&mut self, cases: &[AugmentedPair]) {
        self.examples.extend(cases.iter().map(|p| TrainExample {
            user_id: p.user_id,
            query_id: p.query_id,
            ad_id: p.ad_id,
            label: ClassLabel::Bad,
        }));
    }

    pub fn examples(&self) -> &[TrainExample] {
        &self.examples
    }

    /// Empty the buffer ("we clean the buffer and wait for the next batch").
    pub fn clear(&mut self) {
        self.examples.clear();
    }
}

/// Per-batch counters recorded in the run stats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub n_click_history: usize,
    pub n_augmented: usize,
    pub n_low_relevance: usize,
    pub n_bad_sampled: usize,
    pub teacher_calls: u64,
}

/// Per-epoch aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_loss: Option<f64>,
    pub improvement: Option<f64>,
}

/// Full record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub strategy: String,
    pub batches: Vec<BatchStats>,
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
    pub total_teacher_calls: u64,
    pub final_val_loss: Option<f64>,
}

impl RunStats {
    /// Emit newline-delimited JSON: one record per batch, one per epoch,
    /// then a run summary record.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            record: &'a str,
            #[serde(flatten)]
            inner: &'a T,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'a str,
            strategy: &'a str,
            n_batches: usize,
            n_epochs: usize,
            stopped_early: bool,
            total_teacher_calls: u64,
            final_val_loss: Option<f64>,
        }
        for b in &self.batches {
            serde_json::to_writer(
                &mut w,
                &Tagged {
                    record: "batch",
                    inner: b,
                },
            )?;
            w.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(
                &mut w,
                &Tagged {
                    record: "epoch",
                    inner: e,
                },
            )?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &Summary {
                record: "summary",
                strategy: &self.strategy,
                n_batches: self.batches.len(),
                n_epochs: self.epochs.len(),
                stopped_early: self.stopped_early,
                total_teacher_calls: self.total_teacher_calls,
                final_val_loss: self.final_val_loss,
            },
        )?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Outcome of the per-batch augmentation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BadCaseProposal {
    pub sampled: Vec<AugmentedPair>,
    pub n_augmented: usize,
    pub n_low_relevance: usize,
    pub teacher_calls: u64,
}

/// Run the augmentation stage for one batch under the given strategy:
/// cross-join, (optionally) teacher-filter, score pctr with the current
/// student parameters, and sample bad cases. The two-class strategy
/// proposes nothing.
pub fn propose_bad_cases(
    params: &ModelParams,
    corpus: &Corpus,
    teacher: &Teacher,
    batch: &[ClickEvent],
    config: &ActiveLoopConfig,
    strategy: Strategy,
    sampler_seed: u64,
) -> Result<BadCaseProposal> {
    if strategy == Strategy::TwoClass || config.bad_budget == 0 {
        return Ok(BadCaseProposal {
            sampled: Vec::new(),
            n_augmented: 0,
            n_low_relevance: 0,
            teacher_calls: 0,
        });
    }
    let cross = augment(batch, corpus)?;
    let n_augmented = cross.len();

    match strategy {
        Strategy::Active => {
            let mut candidates =
                teacher.filter_low_relevance(&cross, config.relevance_threshold)?;
            let n_low = candidates.len();
            score_pctr(params, corpus, &mut candidates)?;
            let sampled = sample_bad_cases(
                &candidates,
                config.bad_budget,
                config.sampler_gamma,
                sampler_seed,
            );
            Ok(BadCaseProposal {
                sampled,
                n_augmented,
                n_low_relevance: n_low,
                teacher_calls: n_augmented as u64,
            })
        }
        Strategy::RandomBad => {
            // No teacher, no student scoring: uniform over the raw cross
            // join. Relevance is recorded for audit but not filtered on.
            let mut candidates = Vec::with_capacity(cross.len());
            for (q, a) in &cross {
                candidates.push(AugmentedPair {
                    user_id: q.user_id,
                    query_id: q.query_id,
                    ad_id: a.ad_id,
                    relevance: teacher.relevance(q, a)?,
                    pctr: 0.0,
                    labeled_bad: false,
                });
            }
            let sampled = sample_bad_cases(&candidates, config.bad_budget, 0.0, sampler_seed);
            Ok(BadCaseProposal {
                sampled,
                n_augmented,
                n_low_relevance: candidates.len(),
                teacher_calls: n_augmented as u64,
            })
        }
        Strategy::TwoClass => unreachable!("handled above"),
    }
}

/// Fill each pair's pctr using the current parameters, embedding every
/// distinct query and ad once.
fn score_pctr(params: &ModelParams, corpus: &Corpus, pairs: &mut [AugmentedPair]) -> Result<()> {
    let mut query_ids: Vec<u64> = pairs.iter().map(|p| p.query_id).collect();
    query_ids.sort_unstable();
    query_ids.dedup();
    let mut ad_ids: Vec<u64> = pairs.iter().map(|p| p.ad_id).collect();
    ad_ids.sort_unstable();
    ad_ids.dedup();

    let mut query_emb = std::collections::HashMap::new();
    for &qid in &query_ids {
        let q = corpus
            .query(qid)
            .ok_or_else(|| Error::Training(format!("unknown query {qid}")))?;
        let user = corpus
            .user(q.user_id)
            .ok_or_else(|| Error::Training(format!("unknown user {}", q.user_id)))?;
        query_emb.insert(qid, params.embed_query(user, q));
    }
    let mut ad_emb = std::collections::HashMap::new();
    for &aid in &ad_ids {
        let a = corpus
            .ad(aid)
            .ok_or_else(|| Error::Training(format!("unknown ad {aid}")))?;
        ad_emb.insert(aid, params.embed_ad(a));
    }
    for p in pairs {
        let s = params.similarity(&query_emb[&p.query_id], &ad_emb[&p.ad_id]);
        p.pctr = params.pctr_from_similarity(s);
    }
    Ok(())
}

/// Train the click model by the active-learning procedure. Returns the
/// trained parameters and the full run statistics; deterministic for fixed
/// (log, config, seed).
pub fn run_active_training(
    log: &[ClickEvent],
    corpus: &Corpus,
    teacher: &Teacher,
    mut params: ModelParams,
    run_config: &RunConfig,
) -> Result<(ModelParams, RunStats)> {
    if log.is_empty() {
        return Err(Error::Training("empty click log".into()));
    }
    let config = ActiveLoopConfig::from_run(run_config)?;
    let strategy = run_config.strategy;

    // Deterministic validation split for the convergence test.
    let mut shuffled: Vec<ClickEvent> = log.to_vec();
    let mut split_rng = seeded_rng(config.seed, "val-split");
    shuffled.shuffle(&mut split_rng);
    let n_val = ((shuffled.len() as f64) * run_config.val_fraction).round() as usize;
    let n_val = n_val.min(shuffled.len().saturating_sub(1));
    let (val_events, train_events) = shuffled.split_at(n_val);
    let val_examples: Vec<TrainExample> = {
        let mut buf = TrainBuffer::new();
        buf.push_click_history(val_events);
        buf.examples().to_vec()
    };

    let mut trainer = Trainer::new(run_config, &params);
    let mut buffer = TrainBuffer::new();
    let mut stats = RunStats {
        strategy: strategy.to_string(),
        batches: Vec::new(),
        epochs: Vec::new(),
        stopped_early: false,
        total_teacher_calls: 0,
        final_val_loss: None,
    };

    let mut prev_val: Option<f64> = None;
    let mut order: Vec<usize> = (0..train_events.len()).collect();
    for epoch in 1..=config.max_epochs {
        let mut epoch_rng = seeded_rng(config.seed, &format!("epoch-shuffle-{epoch}"));
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<ClickEvent> = chunk.iter().map(|&i| train_events[i]).collect();
            let sampler_seed = derive_seed(config.seed, &format!("bad-sample-{epoch}-{batch_idx}"));
            let proposal = propose_bad_cases(
                &params,
                corpus,
                teacher,
                &batch,
                &config,
                strategy,
                sampler_seed,
            )?;

            debug_assert!(buffer.is_empty(), "buffer must start each cycle empty");
            buffer.push_click_history(&batch);
            buffer.push_bad_cases(&proposal.sampled);
            let loss = trainer.step(&mut params, corpus, buffer.examples())?;
            buffer.clear();

            stats.total_teacher_calls += proposal.teacher_calls;
            stats.batches.push(BatchStats {
                epoch,
                batch: batch_idx,
                loss,
                n_click_history: batch.len(),
                n_augmented: proposal.n_augmented,
                n_low_relevance: proposal.n_low_relevance,
                n_bad_sampled: proposal.sampled.len(),
                teacher_calls: proposal.teacher_calls,
            });
            epoch_loss_sum += loss;
            epoch_batches += 1;
        }

        let val_loss = if val_examples.is_empty() {
            None
        } else {
            Some(batch_loss(&params, corpus, &val_examples)?)
        };
        let improvement = match (prev_val, val_loss) {
            (Some(prev), Some(cur)) => Some(prev - cur),
            _ => None,
        };
        stats.epochs.push(EpochStats {
            epoch,
            mean_train_loss: epoch_loss_sum / epoch_batches.max(1) as f64,
            val_loss,
            improvement,
        });
        prev_val = val_loss;

        if let Some(imp) = improvement {
            if imp < config.convergence_eps {
                stats.stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    stats.final_val_loss = prev_val;
    Ok((params, stats))
}
