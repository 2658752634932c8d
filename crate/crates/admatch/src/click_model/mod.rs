//! Two-tower neural click model.
//!
//! A user-query tower and an ad tower each emit a unit-normalized 96-d
//! embedding, segmented into three 32-d subvectors. The three subvector
//! inner products sum to a pooled similarity s (the full-vector cosine),
//! and a 3-class softmax over {click, unclick, bad} reads s through
//! per-class affine logits. The click gain is reparameterized to always be
//! the largest, which makes predicted CTR nondecreasing in s — so ranking
//! ads by cosine IS ranking them by CTR, by construction.

mod io;

pub use io::{load_checkpoint, read_embedding_file, save_checkpoint, write_embedding_file};

use rand::Rng;

use crate::config::RunConfig;
use crate::corpus::{AdRecord, Corpus, QueryRecord, UserProfile};
use crate::util::{seeded_rng, sigmoid};
use crate::{Error, Result};

/// Output embedding dimensionality (three 32-d subvectors).
pub const EMBED_OUT: usize = 96;
/// Number of subvectors the embedding is segmented into.
pub const N_SUBVECTORS: usize = 3;
/// Width of each subvector.
pub const SUBVECTOR_DIM: usize = EMBED_OUT / N_SUBVECTORS;

/// A 96-dimensional tower output, unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding96(pub [f64; EMBED_OUT]);

impl Embedding96 {
    /// The i-th 32-wide contiguous segment, i in {0, 1, 2}.
    pub fn subvector(&self, i: usize) -> &[f64] {
        &self.0[i * SUBVECTOR_DIM..(i + 1) * SUBVECTOR_DIM]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding96) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    /// Lift a single-precision row (e.g. from the embedding file) exactly.
    ///
    /// Panics if the slice is not 96 wide.
    pub fn from_f32(row: &[f32]) -> Embedding96 {
        assert_eq!(row.len(), EMBED_OUT, "embedding rows must be 96-wide");
        let mut out = [0.0; EMBED_OUT];
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v as f64;
        }
        Embedding96(out)
    }
}

/// Softmax output over the three outcome classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbs {
    pub p_click: f64,
    pub p_unclick: f64,
    pub p_bad: f64,
}

impl ClassProbs {
    pub fn sum(&self) -> f64 {
        self.p_click + self.p_unclick + self.p_bad
    }
}

/// Serving CTR: the probability of the click class.
pub fn pctr(probs: &ClassProbs) -> f64 {
    probs.p_click
}

/// Training outcome classes. Click/unclick come from the log; bad cases are
/// synthesized by the active loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLabel {
    Click,
    Unclick,
    Bad,
}

impl ClassLabel {
    fn index(self) -> usize {
        match self {
            ClassLabel::Click => 0,
            ClassLabel::Unclick => 1,
            ClassLabel::Bad => 2,
        }
    }
}

/// One supervised example, by corpus ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainExample {
    pub user_id: u64,
    pub query_id: u64,
    pub ad_id: u64,
    pub label: ClassLabel,
}

/// A dense affine layer, row-major weights (out_dim x in_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-a..a))
                .collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *out_v += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        out
    }

    /// Accumulate dL/dW and dL/db from upstream gradient g, and return dL/dx.
    fn backward(&self, x: &[f64], g: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &go) in g.iter().enumerate() {
            gb[o] += go;
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += go * x[i];
                gx[i] += row[i] * go;
            }
        }
        gx
    }
}

/// One tower: two tanh hidden layers, a linear projection to 96, then L2
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

/// Forward activations retained for backprop.
struct TowerTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    onorm: f64,
    x: [f64; EMBED_OUT],
}

const NORM_EPS: f64 = 1e-12;

impl Tower {
    fn zeros(in_dim: usize, h1: usize, h2: usize) -> Self {
        Tower {
            l1: Linear::zeros(in_dim, h1),
            l2: Linear::zeros(h1, h2),
            l3: Linear::zeros(h2, EMBED_OUT),
        }
    }

    fn glorot(in_dim: usize, h1: usize, h2: usize, rng: &mut impl Rng) -> Self {
        Tower {
            l1: Linear::glorot(in_dim, h1, rng),
            l2: Linear::glorot(h1, h2, rng),
            l3: Linear::glorot(h2, EMBED_OUT, rng),
        }
    }

    fn forward(&self, input: Vec<f64>) -> TowerTrace {
        let h1: Vec<f64> = self.l1.forward(&input).iter().map(|v| v.tanh()).collect();
        let h2: Vec<f64> = self.l2.forward(&h1).iter().map(|v| v.tanh()).collect();
        let o = self.l3.forward(&h2);
        let onorm = o.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let mut x = [0.0; EMBED_OUT];
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi = oi / onorm;
        }
        TowerTrace {
            input,
            h1,
            h2,
            onorm,
            x,
        }
    }

    /// Backprop dL/dx through normalization and the three layers; returns
    /// dL/dinput. Gradients accumulate into `grads`.
    fn backward(&self, trace: &TowerTrace, gx: &[f64], grads: &mut Tower) -> Vec<f64> {
        // x = o / ||o||  =>  dL/do = (g - x (x . g)) / ||o||
        let xg: f64 = trace.x.iter().zip(gx).map(|(x, g)| x * g).sum();
        let go: Vec<f64> = trace
            .x
            .iter()
            .zip(gx)
            .map(|(x, g)| (g - x * xg) / trace.onorm)
            .collect();
        let gh2 = self
            .l3
            .backward(&trace.h2, &go, &mut grads.l3.w, &mut grads.l3.b);
        let gz2: Vec<f64> = gh2
            .iter()
            .zip(&trace.h2)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let gh1 = self
            .l2
            .backward(&trace.h1, &gz2, &mut grads.l2.w, &mut grads.l2.b);
        let gz1: Vec<f64> = gh1
            .iter()
            .zip(&trace.h1)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        self.l1
            .backward(&trace.input, &gz1, &mut grads.l1.w, &mut grads.l1.b)
    }
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Softmax head over the pooled similarity. The click gain is derived as
/// logsumexp(alpha_unclick, alpha_bad) + softplus(delta), which strictly
/// dominates both free gains — the parameterization that makes pctr
/// nondecreasing in s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub alpha_unclick: f64,
    pub alpha_bad: f64,
    pub delta: f64,
    pub beta: [f64; 3],
}

impl Head {
    fn init() -> Self {
        Head {
            alpha_unclick: 0.0,
            alpha_bad: 0.0,
            delta: 0.0,
            beta: [0.0; 3],
        }
    }

    /// Effective per-class gains, click first.
    pub fn effective_alphas(&self) -> [f64; 3] {
        let click = logsumexp2(self.alpha_unclick, self.alpha_bad) + softplus(self.delta);
        [click, self.alpha_unclick, self.alpha_bad]
    }

    fn logits(&self, s: f64) -> [f64; 3] {
        let alphas = self.effective_alphas();
        [
            alphas[0] * s + self.beta[0],
            alphas[1] * s + self.beta[1],
            alphas[2] * s + self.beta[2],
        ]
    }
}

fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

/// All learnable parameters of the click model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// (vocab_size + 1) x embed_dim; row 0 is the reserved unknown-token row.
    pub embed: Vec<f64>,
    pub query_tower: Tower,
    pub ad_tower: Tower,
    pub head: Head,
}

impl ModelParams {
    /// Fresh random initialization, deterministic per seed.
    pub fn new_random(config: &RunConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "model-init");
        let vocab = config.vocab_size;
        let d = config.embed_dim;
        let embed = (0..(vocab + 1) * d)
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect();
        ModelParams {
            vocab_size: vocab,
            embed_dim: d,
            hidden1: config.hidden1,
            hidden2: config.hidden2,
            embed,
            query_tower: Tower::glorot(2 * d, config.hidden1, config.hidden2, &mut rng),
            ad_tower: Tower::glorot(d, config.hidden1, config.hidden2, &mut rng),
            head: Head::init(),
        }
    }

    /// Same shapes, all weights zero (used for gradient/velocity buffers).
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            embed: vec![0.0; self.embed.len()],
            query_tower: Tower::zeros(2 * self.embed_dim, self.hidden1, self.hidden2),
            ad_tower: Tower::zeros(self.embed_dim, self.hidden1, self.hidden2),
            head: Head {
                alpha_unclick: 0.0,
                alpha_bad: 0.0,
                delta: 0.0,
                beta: [0.0; 3],
            },
        }
    }

    fn embed_row(&self, token: u32) -> &[f64] {
        // Unknown tokens (outside the vocabulary) share reserved row 0.
        let row = if (token as usize) < self.vocab_size {
            token as usize + 1
        } else {
            0
        };
        &self.embed[row * self.embed_dim..(row + 1) * self.embed_dim]
    }

    /// Mean-pool token embeddings. An empty list pools to the zero vector.
    fn pool(&self, tokens: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        if tokens.is_empty() {
            return out;
        }
        for &t in tokens {
            for (o, e) in out.iter_mut().zip(self.embed_row(t)) {
                *o += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        out
    }

    fn query_tower_input(&self, user: &UserProfile, query: &QueryRecord) -> Vec<f64> {
        let mut input = self.pool(&user.feature_tokens);
        input.extend(self.pool(&query.tokens));
        input
    }

    /// Embed a (user, query) pair into the shared 96-d space.
    pub fn embed_query(&self, user: &UserProfile, query: &QueryRecord) -> Embedding96 {
        self.embed_query_tokens(&user.feature_tokens, &query.tokens)
    }

    /// Token-level variant of [`embed_query`] for serving paths that carry
    /// raw tokens instead of corpus records.
    pub fn embed_query_tokens(&self, user_tokens: &[u32], query_tokens: &[u32]) -> Embedding96 {
        let mut input = self.pool(user_tokens);
        input.extend(self.pool(query_tokens));
        Embedding96(self.query_tower.forward(input).x)
    }

    /// Embed an ad into the shared 96-d space.
    pub fn embed_ad(&self, ad: &AdRecord) -> Embedding96 {
        Embedding96(self.ad_tower.forward(self.pool(&ad.tokens)).x)
    }

    /// Pooled similarity: the sum of the three subvector inner products.
    pub fn similarity(&self, x: &Embedding96, y: &Embedding96) -> f64 {
        (0..N_SUBVECTORS)
            .map(|i| {
                x.subvector(i)
                    .iter()
                    .zip(y.subvector(i))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Class probabilities for a given pooled similarity.
    pub fn probs_from_similarity(&self, s: f64) -> ClassProbs {
        let p = softmax3(self.head.logits(s));
        ClassProbs {
            p_click: p[0],
            p_unclick: p[1],
            p_bad: p[2],
        }
    }

    /// Predicted CTR as a function of pooled similarity alone.
    pub fn pctr_from_similarity(&self, s: f64) -> f64 {
        self.probs_from_similarity(s).p_click
    }

    /// Full forward pass for one (user, query, ad) triple.
    pub fn forward(&self, user: &UserProfile, query: &QueryRecord, ad: &AdRecord) -> ClassProbs {
        let x = self.embed_query(user, query);
        let y = self.embed_ad(ad);
        self.probs_from_similarity(self.similarity(&x, &y))
    }

    // ---- flat coordinate view (gradient checking, optimizer) ----

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.embed];
        for t in [&self.query_tower, &self.ad_tower] {
            for l in [&t.l1, &t.l2, &t.l3] {
                v.push(&l.w);
                v.push(&l.b);
            }
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.embed];
        for t in [&mut self.query_tower, &mut self.ad_tower] {
            for l in [&mut t.l1, &mut t.l2, &mut t.l3] {
                v.push(&mut l.w);
                v.push(&mut l.b);
            }
        }
        v
    }

    fn head_coords(&self) -> [f64; 6] {
        [
            self.head.alpha_unclick,
            self.head.alpha_bad,
            self.head.delta,
            self.head.beta[0],
            self.head.beta[1],
            self.head.beta[2],
        ]
    }

    fn head_coords_mut(&mut self) -> [&mut f64; 6] {
        let [b0, b1, b2] = &mut self.head.beta;
        [
            &mut self.head.alpha_unclick,
            &mut self.head.alpha_bad,
            &mut self.head.delta,
            b0,
            b1,
            b2,
        ]
    }

    /// Total number of scalar parameters.
    pub fn coord_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum::<usize>() + 6
    }

    fn coord(&self, mut idx: usize) -> f64 {
        for s in self.slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        self.head_coords()[idx]
    }

    fn coord_add(&mut self, mut idx: usize, delta: f64) {
        for s in self.slices_mut() {
            if idx < s.len() {
                s[idx] += delta;
                return;
            }
            idx -= s.len();
        }
        *self.head_coords_mut()[idx] += delta;
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
            && self.head_coords().iter().all(|v| v.is_finite())
    }
}

/// Resolve a training example's records in the corpus.
fn resolve<'c>(
    corpus: &'c Corpus,
    ex: &TrainExample,
) -> Result<(&'c UserProfile, &'c QueryRecord, &'c AdRecord)> {
    let user = corpus
        .user(ex.user_id)
        .ok_or_else(|| Error::Model(format!("unknown user {}", ex.user_id)))?;
    let query = corpus
        .query(ex.query_id)
        .ok_or_else(|| Error::Model(format!("unknown query {}", ex.query_id)))?;
    let ad = corpus
        .ad(ex.ad_id)
        .ok_or_else(|| Error::Model(format!("unknown ad {}", ex.ad_id)))?;
    Ok((user, query, ad))
}

/// Mean 3-class cross-entropy of a batch under fixed parameters.
pub fn batch_loss(params: &ModelParams, corpus: &Corpus, batch: &[TrainExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training(
            "batch_loss requires a nonempty batch".into(),
        ));
    }
    let mut total = 0.0;
    for ex in batch {
        let (user, query, ad) = resolve(corpus, ex)?;
        let probs = params.forward(user, query, ad);
        let p = [probs.p_click, probs.p_unclick, probs.p_bad][ex.label.index()];
        total -= p.max(1e-300).ln();
    }
    Ok(total / batch.len() as f64)
}

/// Accumulate the mean-batch gradient into `grads`; returns the batch loss.
fn batch_gradient(
    params: &ModelParams,
    corpus: &Corpus,
    batch: &[TrainExample],
    grads: &mut ModelParams,
) -> Result<f64> {
    let inv_n = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;

    for ex in batch {
        let (user, query, ad) = resolve(corpus, ex)?;
        let q_trace = params
            .query_tower
            .forward(params.query_tower_input(user, query));
        let a_trace = params.ad_tower.forward(params.pool(&ad.tokens));
        let s: f64 = q_trace.x.iter().zip(&a_trace.x).map(|(a, b)| a * b).sum();
        let logits = params.head.logits(s);
        let probs = softmax3(logits);
        total_loss -= probs[ex.label.index()].max(1e-300).ln();

        // dL/dlogit_c = p_c - 1{c = target}
        let mut glogit = probs;
        glogit[ex.label.index()] -= 1.0;

        let alphas = params.head.effective_alphas();
        let gs: f64 = (0..3).map(|c| glogit[c] * alphas[c]).sum();
        // Gains: direct path for the free classes plus the chain through
        // the derived click gain.
        let g_alpha_eff: [f64; 3] = [glogit[0] * s, glogit[1] * s, glogit[2] * s];
        let sig_u = sigmoid(params.head.alpha_unclick - params.head.alpha_bad);
        grads.head.alpha_unclick += inv_n * (g_alpha_eff[0] * sig_u + g_alpha_eff[1]);
        grads.head.alpha_bad += inv_n * (g_alpha_eff[0] * (1.0 - sig_u) + g_alpha_eff[2]);
        grads.head.delta += inv_n * g_alpha_eff[0] * sigmoid(params.head.delta);
        for c in 0..3 {
            grads.head.beta[c] += inv_n * glogit[c];
        }

        // s = x . y
        let gx: Vec<f64> = a_trace.x.iter().map(|y| gs * y * inv_n).collect();
        let gy: Vec<f64> = q_trace.x.iter().map(|x| gs * x * inv_n).collect();

        let g_qin = params
            .query_tower
            .backward(&q_trace, &gx, &mut grads.query_tower);
        let g_ain = params.ad_tower.backward(&a_trace, &gy, &mut grads.ad_tower);

        // Mean pooling fans the input gradient out to each token's row.
        let d = params.embed_dim;
        accumulate_pool_grad(params, &mut grads.embed, &user.feature_tokens, &g_qin[..d]);
        accumulate_pool_grad(params, &mut grads.embed, &query.tokens, &g_qin[d..]);
        accumulate_pool_grad(params, &mut grads.embed, &ad.tokens, &g_ain);
    }

    Ok(total_loss * inv_n)
}

fn accumulate_pool_grad(params: &ModelParams, gembed: &mut [f64], tokens: &[u32], g: &[f64]) {
    if tokens.is_empty() {
        return;
    }
    let inv = 1.0 / tokens.len() as f64;
    let d = params.embed_dim;
    for &t in tokens {
        let row = if (t as usize) < params.vocab_size {
            t as usize + 1
        } else {
            0
        };
        let dst = &mut gembed[row * d..(row + 1) * d];
        for (dv, gv) in dst.iter_mut().zip(g) {
            *dv += gv * inv;
        }
    }
}

/// Momentum-SGD trainer. Holds the velocity buffer between steps.
pub struct Trainer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ModelParams,
}

impl Trainer {
    pub fn new(config: &RunConfig, params: &ModelParams) -> Self {
        Trainer {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            velocity: params.zeros_like(),
        }
    }

    /// One optimizer step on a batch: analytic backprop, velocity update,
    /// parameter update. Returns the pre-update batch loss. A non-finite
    /// loss or gradient aborts with a diagnostic instead of corrupting the
    /// parameters.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        corpus: &Corpus,
        batch: &[TrainExample],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Training(
                "train_step requires a nonempty batch".into(),
            ));
        }
        let mut grads = params.zeros_like();
        let loss = batch_gradient(params, corpus, batch, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss} on batch of {}",
                batch.len()
            )));
        }
        if !grads.all_finite() {
            return Err(Error::Training("non-finite gradient; aborting".into()));
        }

        // v <- momentum * v + g ; p <- p - lr * v
        {
            let gs = grads.slices();
            let mut vs = self.velocity.slices_mut();
            for (v, g) in vs.iter_mut().zip(&gs) {
                for (vi, gi) in v.iter_mut().zip(g.iter()) {
                    *vi = self.momentum * *vi + gi;
                }
            }
        }
        let gh = grads.head_coords();
        for (v, g) in self.velocity.head_coords_mut().into_iter().zip(gh) {
            *v = self.momentum * *v + g;
        }
        {
            let vs = self.velocity.slices();
            let mut ps = params.slices_mut();
            for (p, v) in ps.iter_mut().zip(&vs) {
                for (pi, vi) in p.iter_mut().zip(v.iter()) {
                    *pi -= self.learning_rate * vi;
                }
            }
        }
        let vh = self.velocity.head_coords();
        for (p, v) in params.head_coords_mut().into_iter().zip(vh) {
            *p -= self.learning_rate * v;
        }
        Ok(loss)
    }
}

/// Which parameters a gradient check samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// A seeded 1% sample of all coordinates.
    Full,
    /// Only the six head scalars (affine-softmax path; exact to ~1e-6).
    HeadOnly,
}

/// Compare the analytic batch gradient against central finite differences
/// (step 1e-4) on a seeded coordinate sample; returns the max relative
/// error. The relative error denominator is floored at 1e-4 so coordinates
/// with vanishing gradients measure absolutely rather than amplifying
/// finite-difference roundoff.
pub fn grad_check(
    params: &ModelParams,
    corpus: &Corpus,
    batch: &[TrainExample],
    scope: GradScope,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() || batch.len() > 32 {
        return Err(Error::Training(
            "grad_check expects a batch of 1..=32 examples".into(),
        ));
    }
    let mut grads = params.zeros_like();
    batch_gradient(params, corpus, batch, &mut grads)?;

    let n = params.coord_count();
    let coords: Vec<usize> = match scope {
        GradScope::HeadOnly => (n - 6..n).collect(),
        GradScope::Full => {
            let k = (n / 100).max(1).min(n);
            let mut rng = seeded_rng(seed, "grad-check");
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
    };

    let h = 1e-4;
    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for idx in coords {
        work.coord_add(idx, h);
        let lp = batch_loss(&work, corpus, batch)?;
        work.coord_add(idx, -2.0 * h);
        let lm = batch_loss(&work, corpus, batch)?;
        work.coord_add(idx, h); // restore
        let fd = (lp - lm) / (2.0 * h);
        let ga = grads.coord(idx);
        let err = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-4);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Post-training sign check: correlation between pooled similarity and
/// predicted CTR over sampled corpus pairs. Under the monotone head this is
/// never negative; if a future parameterization made it negative, exports
/// would negate the ad vectors (the classic sign-flip trick), restoring
/// score order because cos(x, -y) * w = -cos(x, y) * w.
pub fn similarity_ctr_correlation(
    params: &ModelParams,
    corpus: &Corpus,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = seeded_rng(seed, "sign-check");
    let mut pts = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let q = &corpus.queries[rng.gen_range(0..corpus.queries.len())];
        let a = &corpus.ads[rng.gen_range(0..corpus.ads.len())];
        let user = corpus.user(q.user_id).expect("query user resolves");
        let x = params.embed_query(user, q);
        let y = params.embed_ad(a);
        let s = params.similarity(&x, &y);
        pts.push((s, params.pctr_from_similarity(s)));
    }
    correlation(&pts)
}

fn correlation(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Negate a set of exported vectors in place (the sign-flip trick).
pub fn negate_vectors(vectors: &mut [Vec<f32>]) {
    for v in vectors {
        for x in v {
            *x = -*x;
        }
    }
}
