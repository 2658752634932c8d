//! Command-line entry point wiring the pipeline stages into reproducible
//! runs: corpus generation, training, embedding export, index build,
//! retrieval (one-shot or TCP serving), evaluation, benchmarking, and the
//! serving simulation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure. All
//! diagnostics go to stderr; stdout carries either human tables or, with
//! --json, newline-delimited JSON records — never both.

use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use admatch::active_loop::run_active_training;
use admatch::click_model::{
    load_checkpoint, save_checkpoint, write_embedding_file, Embedding96, ModelParams, EMBED_OUT,
};
use admatch::config::{RunConfig, Strategy};
use admatch::corpus::{
    corpus_checksum, generate_corpus, load_corpus, save_corpus, simulate_click_log, ClickEvent,
    Corpus,
};
use admatch::eval::{
    self, coverage_rate, latency_bench, latency_bench_fn, offline_eval, serve_simulation,
    test_split, LatencyReport, OfflineReport, ServeReport, AUC_PROTOCOL,
};
use admatch::retrieval::{
    brute_force_topk, load_index, save_index, search_cosine_rerank, search_mips, serve, AdSet,
    IndexMode, Objective, ScoredAd, ServeContext, ServeRequest,
};
use admatch::teacher::Teacher;
use admatch::{Error, Result};

#[derive(Parser)]
#[command(
    name = "admatch",
    version,
    about = "Query-ad matching pipeline: train a click model, compress the ad index, retrieve by weighted similarity"
)]
struct Cli {
    /// Config file of key=value lines (# comments allowed).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable, applied after --config).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for module-internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Emit newline-delimited JSON records instead of human tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and click log into a directory.
    Gen(GenArgs),
    /// Train the click model on a stored corpus's click log.
    Train(TrainArgs),
    /// Export query and ad embeddings from a trained model.
    Embed(EmbedArgs),
    /// Build the compressed ad index from a trained model.
    Index(IndexArgs),
    /// One-shot retrieval, or --serve the line-JSON TCP protocol.
    Search(SearchArgs),
    /// Held-out AUC and mean-relevance comparison of trained models.
    EvalOffline(EvalOfflineArgs),
    /// Coverage of approximate retrieval against the exact weighted oracle.
    EvalCoverage(EvalCoverageArgs),
    /// Search latency benchmark on the compressed index (and optionally brute force).
    Bench(BenchArgs),
    /// Seeded impression replay producing CPM / CTR / ACP.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for the corpus and click log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Stored corpus directory (from `gen`).
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Where to write the trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    model_out: PathBuf,
    /// Training strategy: active, random-bad, or two-class.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Optional NDJSON file for per-batch/per-epoch training statistics.
    #[arg(long, value_name = "FILE")]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output directory; writes queries.emb and ads.emb.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Where to write the serialized index.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Quantizer: pq or opq.
    #[arg(long, default_value = "pq", value_parser = parse_mode)]
    mode: IndexMode,
    /// Also store raw single-precision vectors for exact re-ranking.
    #[arg(long)]
    retain: bool,
}

#[derive(Args)]
struct SearchArgs {
    /// Stored corpus directory (supplies user profiles).
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    /// Search an existing corpus query by id.
    #[arg(long, conflicts_with_all = ["user_id", "tokens", "serve"])]
    query_id: Option<u64>,
    /// User issuing an ad-hoc query (with --tokens).
    #[arg(long, requires = "tokens", conflicts_with = "serve")]
    user_id: Option<u64>,
    /// Comma- or space-separated token ids of the ad-hoc query.
    #[arg(long, requires = "user_id", conflicts_with = "serve")]
    tokens: Option<String>,
    /// Results to return (default: top_k from config).
    #[arg(long)]
    k: Option<usize>,
    /// Coarse cells to probe (default: nprobe from config).
    #[arg(long)]
    nprobe: Option<usize>,
    /// Serve the newline-delimited JSON TCP protocol on this address.
    #[arg(long, value_name = "ADDR")]
    serve: Option<String>,
    /// Exit after this many connections (serve mode; default: unlimited).
    #[arg(long, requires = "serve")]
    max_connections: Option<usize>,
}

#[derive(Args)]
struct EvalOfflineArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Model checkpoint to evaluate (repeatable).
    #[arg(long = "model", value_name = "FILE", required = true)]
    models: Vec<PathBuf>,
    /// Row label for each --model, in order (defaults to the file stem).
    #[arg(long = "label", value_name = "NAME")]
    labels: Vec<String>,
}

#[derive(Args)]
struct EvalCoverageArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    /// Evaluate on a seeded sample of this many queries (default: all).
    #[arg(long)]
    n_queries: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    /// Also time the exact weighted brute-force scan for comparison.
    #[arg(long)]
    brute: bool,
    /// Seeded sample size of benchmark queries.
    #[arg(long, default_value_t = 100)]
    n_queries: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    index: PathBuf,
    /// Impressions to replay (default: n_impressions from config).
    #[arg(long)]
    impressions: Option<usize>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<IndexMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Errors split by exit code: usage problems (1) vs runtime failures (2).
enum CmdError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Run(e)
    }
}

fn main() {
    std::process::exit(run());
}

/// Collect every `--set KEY=VALUE` (or `--set=KEY=VALUE`) occurrence from
/// the raw command line, in order. Clap treats repeated global args on the
/// two sides of the subcommand as one overriding the other rather than
/// merging, so the raw args are the only faithful record. This runs after
/// clap has accepted the command line, so each `--set` has its value.
fn gather_sets(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.peekable();
    while let Some(a) = it.next() {
        if a == "--set" {
            if let Some(v) = it.next() {
                out.push(v);
            }
        } else if let Some(rest) = a.strip_prefix("--set=") {
            out.push(rest.to_string());
        }
    }
    out
}

fn run() -> i32 {
    let mut cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    cli.set = gather_sets(std::env::args().skip(1));
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let reporter = Reporter { json: cli.json };
    match execute(cli.cmd, cfg, &reporter) {
        Ok(()) => 0,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CmdError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Defaults, then the config file, then --set pairs in order, then the
/// dedicated override flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    Ok(cfg)
}

/// Config keys that describe the generated world. When a stored corpus is
/// loaded these are taken from its manifest so reports echo the world the
/// data actually came from, whatever the invocation said.
const WORLD_KEYS: &[&str] = &[
    "n_queries",
    "n_ads",
    "n_users",
    "n_topics",
    "vocab_size",
    "tokens_per_query",
    "tokens_per_ad",
    "tokens_per_user",
    "zipf_exponent",
    "topic_concentration",
    "bid_min",
    "bid_max",
    "ctr_coef_sim",
    "ctr_coef_pop",
    "ctr_coef_bias",
    "teacher_mode",
    "teacher_blend",
];

fn json_field_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn adopt_corpus_world(cfg: &mut RunConfig, corpus: &Corpus) -> Result<()> {
    let ours = serde_json::to_value(&*cfg)?;
    let theirs = serde_json::to_value(&corpus.config)?;
    let mut changed = Vec::new();
    for &key in WORLD_KEYS {
        let (a, b) = (&ours[key], &theirs[key]);
        if a != b {
            cfg.set(key, &json_field_text(b))?;
            changed.push(key);
        }
    }
    if !changed.is_empty() {
        eprintln!("note: taking {} from the stored corpus", changed.join(", "));
    }
    Ok(())
}

fn load_world(dir: &Path, cfg: &mut RunConfig) -> Result<(Corpus, Vec<ClickEvent>)> {
    let (corpus, log) = load_corpus(dir)?;
    adopt_corpus_world(cfg, &corpus)?;
    Ok((corpus, log))
}

/// Stdout writer: one NDJSON record per report in --json mode, a labelled
/// human block otherwise.
struct Reporter {
    json: bool,
}

impl Reporter {
    fn emit<T: Serialize>(&self, record: &str, body: &T, human: String) {
        if self.json {
            #[derive(Serialize)]
            struct Rec<'a, T: Serialize> {
                record: &'a str,
                #[serde(flatten)]
                body: &'a T,
            }
            match serde_json::to_string(&Rec { record, body }) {
                Ok(line) => println!("{line}"),
                Err(e) => eprintln!("error: serializing {record} record: {e}"),
            }
        } else {
            println!("{human}");
        }
    }

    fn config(&self, cfg: &RunConfig) {
        let value = serde_json::to_value(cfg).unwrap_or_default();
        let mut human = String::from("config:");
        if let serde_json::Value::Object(map) = &value {
            for (key, v) in map {
                human.push_str(&format!("\n  {key} = {}", json_field_text(v)));
            }
        }
        self.emit("config", &serde_json::json!({ "config": value }), human);
    }
}

fn execute(cmd: Cmd, mut cfg: RunConfig, out: &Reporter) -> std::result::Result<(), CmdError> {
    match cmd {
        Cmd::Gen(args) => cmd_gen(&args, &cfg, out)?,
        Cmd::Train(args) => cmd_train(&args, &mut cfg, out)?,
        Cmd::Embed(args) => cmd_embed(&args, &mut cfg, out)?,
        Cmd::Index(args) => cmd_index(&args, &mut cfg, out)?,
        Cmd::Search(args) => cmd_search(&args, &mut cfg, out)?,
        Cmd::EvalOffline(args) => cmd_eval_offline(&args, &mut cfg, out)?,
        Cmd::EvalCoverage(args) => cmd_eval_coverage(&args, &mut cfg, out)?,
        Cmd::Bench(args) => cmd_bench(&args, &mut cfg, out)?,
        Cmd::Simulate(args) => cmd_simulate(&args, &mut cfg, out)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct GenReport {
    out: String,
    n_queries: usize,
    n_ads: usize,
    n_users: usize,
    n_events: usize,
    checksum: String,
}

fn cmd_gen(args: &GenArgs, cfg: &RunConfig, out: &Reporter) -> Result<()> {
    out.config(cfg);
    let corpus = generate_corpus(cfg, cfg.seed)?;
    let log = simulate_click_log(&corpus, cfg.n_impressions, cfg.seed)?;
    std::fs::create_dir_all(&args.out)?;
    save_corpus(&args.out, &corpus, &log)?;
    let checksum = corpus_checksum(&args.out)?;
    let report = GenReport {
        out: args.out.display().to_string(),
        n_queries: corpus.queries.len(),
        n_ads: corpus.ads.len(),
        n_users: corpus.users.len(),
        n_events: log.len(),
        checksum,
    };
    let human = format!(
        "generated corpus at {}:\n  queries = {}\n  ads = {}\n  users = {}\n  click events = {}\n  checksum = {}",
        report.out, report.n_queries, report.n_ads, report.n_users, report.n_events, report.checksum
    );
    out.emit("gen", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    strategy: String,
    model_out: String,
    n_train_events: usize,
    n_test_events: usize,
    epochs: usize,
    batches: usize,
    stopped_early: bool,
    total_teacher_calls: u64,
    final_val_loss: Option<f64>,
}

fn cmd_train(args: &TrainArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, log) = load_world(&args.corpus, cfg)?;
    if let Some(strategy) = args.strategy {
        cfg.strategy = strategy;
    }
    out.config(cfg);
    // The test split is held out here so `eval-offline` (which recomputes
    // the same seeded split) scores events this model never saw.
    let (test_events, train_events) = test_split(&log, cfg.seed, cfg.test_fraction)?;
    let teacher = Teacher::new(&corpus)?;
    let params = ModelParams::new_random(cfg, cfg.seed);
    let (trained, stats) = run_active_training(&train_events, &corpus, &teacher, params, cfg)?;
    save_checkpoint(&args.model_out, &trained)?;
    if let Some(path) = &args.stats_out {
        stats.write_ndjson(BufWriter::new(std::fs::File::create(path)?))?;
    }
    let report = TrainReport {
        strategy: cfg.strategy.to_string(),
        model_out: args.model_out.display().to_string(),
        n_train_events: train_events.len(),
        n_test_events: test_events.len(),
        epochs: stats.epochs.len(),
        batches: stats.batches.len(),
        stopped_early: stats.stopped_early,
        total_teacher_calls: stats.total_teacher_calls,
        final_val_loss: stats.final_val_loss,
    };
    let human = format!(
        "trained {} model -> {}:\n  train events = {}\n  held-out events = {}\n  epochs = {} ({} batches, stopped early: {})\n  teacher calls = {}\n  final validation loss = {}",
        report.strategy,
        report.model_out,
        report.n_train_events,
        report.n_test_events,
        report.epochs,
        report.batches,
        report.stopped_early,
        report.total_teacher_calls,
        report
            .final_val_loss
            .map_or_else(|| "n/a".into(), |v| format!("{v:.6}")),
    );
    out.emit("train", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct EmbedReport {
    queries_out: String,
    ads_out: String,
    n_queries: usize,
    n_ads: usize,
    dim: usize,
}

fn cmd_embed(args: &EmbedArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    std::fs::create_dir_all(&args.out)?;

    let query_embeds = eval::embed_all_queries(&params, &corpus)?;
    let qids: Vec<u64> = corpus.queries.iter().map(|q| q.query_id).collect();
    let qvecs: Vec<Vec<f32>> = qids.iter().map(|id| query_embeds[id].to_f32()).collect();
    let qpath = args.out.join("queries.emb");
    write_embedding_file(&qpath, EMBED_OUT, &qids, &qvecs)?;

    let aids: Vec<u64> = corpus.ads.iter().map(|a| a.ad_id).collect();
    let avecs: Vec<Vec<f32>> = corpus
        .ads
        .iter()
        .map(|a| params.embed_ad(a).to_f32())
        .collect();
    let apath = args.out.join("ads.emb");
    write_embedding_file(&apath, EMBED_OUT, &aids, &avecs)?;

    let report = EmbedReport {
        queries_out: qpath.display().to_string(),
        ads_out: apath.display().to_string(),
        n_queries: qids.len(),
        n_ads: aids.len(),
        dim: EMBED_OUT,
    };
    let human = format!(
        "exported embeddings:\n  {} queries -> {}\n  {} ads -> {}\n  dim = {}",
        report.n_queries, report.queries_out, report.n_ads, report.ads_out, report.dim
    );
    out.emit("embed", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct IndexReport {
    out: String,
    #[serde(flatten)]
    build: admatch::retrieval::BuildReport,
    file_bytes: u64,
    raw_f32_bytes: u64,
    compression_ratio: f64,
    checksum: String,
}

fn cmd_index(args: &IndexArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    let retain = args.retain || cfg.retain_vectors;
    let (index, build) = eval::build_corpus_index(&params, &corpus, cfg, args.mode, retain)?;
    save_index(&args.out, &index)?;
    let file_bytes = std::fs::metadata(&args.out)?.len();
    let raw_f32_bytes = (index.n_ads() * EMBED_OUT * 4) as u64;
    let report = IndexReport {
        out: args.out.display().to_string(),
        build,
        file_bytes,
        raw_f32_bytes,
        compression_ratio: file_bytes as f64 / raw_f32_bytes as f64,
        checksum: admatch::retrieval::index_checksum(&index)?,
    };
    let human = format!(
        "built {} index -> {}:\n  ads = {}\n  coarse cells = {} ({} empty)\n  retained vectors = {}\n  file size = {} bytes\n  raw f32 size = {} bytes\n  compression ratio = {:.4}\n  checksum = {}",
        report.build.mode,
        report.out,
        report.build.n_ads,
        report.build.n_coarse,
        report.build.empty_lists,
        report.build.retained_vectors,
        report.file_bytes,
        report.raw_f32_bytes,
        report.compression_ratio,
        report.checksum,
    );
    out.emit("index", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct SearchReport {
    user_id: u64,
    query_tokens: Vec<u32>,
    k: usize,
    nprobe: usize,
    results: Vec<ScoredAd>,
    latency_us: u64,
}

fn results_table(results: &[ScoredAd]) -> String {
    let mut s = format!("  {:<6}{:<12}{}", "rank", "ad_id", "score");
    for (i, r) in results.iter().enumerate() {
        s.push_str(&format!("\n  {:<6}{:<12}{:.6}", i + 1, r.ad_id, r.score));
    }
    s
}

fn cmd_search(
    args: &SearchArgs,
    cfg: &mut RunConfig,
    out: &Reporter,
) -> std::result::Result<(), CmdError> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    let index = load_index(&args.index)?;
    let ctx = ServeContext {
        params: &params,
        index: &index,
        users: &corpus.users,
        rerank_depth: cfg.rerank_depth,
    };

    if let Some(addr) = &args.serve {
        let listener = TcpListener::bind(addr).map_err(Error::from)?;
        eprintln!(
            "listening on {}",
            listener.local_addr().map_err(Error::from)?
        );
        serve(&listener, &ctx, args.max_connections)?;
        return Ok(());
    }

    let (user_id, query_tokens) = if let Some(query_id) = args.query_id {
        let q = corpus
            .query(query_id)
            .ok_or_else(|| CmdError::Usage(format!("query id {query_id} is not in the corpus")))?;
        (q.user_id, q.tokens.clone())
    } else if let (Some(user_id), Some(tokens)) = (args.user_id, &args.tokens) {
        let parsed: std::result::Result<Vec<u32>, _> = tokens
            .split([',', ' '])
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect();
        let parsed = parsed.map_err(|e| CmdError::Usage(format!("bad --tokens value: {e}")))?;
        (user_id, parsed)
    } else {
        return Err(CmdError::Usage(
            "search needs --query-id, or --user-id with --tokens, or --serve".into(),
        ));
    };

    let request = ServeRequest {
        user_id,
        query_tokens,
        k: args.k.unwrap_or(cfg.top_k),
        nprobe: args.nprobe.unwrap_or(cfg.nprobe),
    };
    let response = ctx.answer(&request)?;
    let report = SearchReport {
        user_id: request.user_id,
        query_tokens: request.query_tokens.clone(),
        k: request.k,
        nprobe: request.nprobe,
        results: response.results,
        latency_us: response.latency_us,
    };
    let human = format!(
        "top {} ads for user {} (nprobe {}, {} us):\n{}",
        report.k,
        report.user_id,
        report.nprobe,
        report.latency_us,
        results_table(&report.results)
    );
    out.emit("search", &report, human);
    Ok(())
}

fn cmd_eval_offline(
    args: &EvalOfflineArgs,
    cfg: &mut RunConfig,
    out: &Reporter,
) -> std::result::Result<(), CmdError> {
    if !args.labels.is_empty() && args.labels.len() != args.models.len() {
        return Err(CmdError::Usage(format!(
            "{} --label values for {} --model values",
            args.labels.len(),
            args.models.len()
        )));
    }
    let (corpus, log) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let teacher = Teacher::new(&corpus)?;
    let (test_events, train_events) = test_split(&log, cfg.seed, cfg.test_fraction)?;
    let mut rows = Vec::with_capacity(args.models.len());
    for (i, path) in args.models.iter().enumerate() {
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string())
        });
        let params = load_checkpoint(path)?;
        rows.push(offline_eval(
            &label,
            &params,
            &corpus,
            &test_events,
            &train_events,
            &teacher,
            cfg.rel_top_p,
        )?);
    }
    let report = OfflineReport {
        auc_protocol: AUC_PROTOCOL.to_string(),
        rel_top_p: cfg.rel_top_p,
        strategies: rows,
    };
    let mut human = format!(
        "offline evaluation (auc: {}; relevance: top-{} held-out pairs):\n  {:<16}{:<10}{:<10}{:<13}{}",
        report.auc_protocol, report.rel_top_p, "label", "auc", "rel", "test_events", "rel_pairs"
    );
    for row in &report.strategies {
        human.push_str(&format!(
            "\n  {:<16}{:<10.4}{:<10.4}{:<13}{}",
            row.label, row.auc, row.mean_relevance, row.n_test_events, row.n_rel_pairs
        ));
    }
    out.emit("eval-offline", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct CoverageReport {
    n_queries: usize,
    k: usize,
    nprobe: usize,
    rerank_depth: usize,
    shortlist_size: usize,
    mean_coverage_mips: f64,
    mean_coverage_cosine_rerank: f64,
}

fn embedded_ads(params: &ModelParams, corpus: &Corpus) -> (Vec<u64>, Vec<Embedding96>, Vec<f64>) {
    let ids = corpus.ads.iter().map(|a| a.ad_id).collect();
    let vectors = corpus.ads.iter().map(|a| params.embed_ad(a)).collect();
    let weights = corpus.ads.iter().map(|a| a.bid).collect();
    (ids, vectors, weights)
}

/// Seeded sample of query embeddings, in corpus order (all of them when
/// `n` is None or exceeds the corpus).
fn sample_query_embeddings(
    params: &ModelParams,
    corpus: &Corpus,
    n: Option<usize>,
    seed: u64,
    tag: &str,
) -> Result<Vec<Embedding96>> {
    let all = eval::embed_all_queries(params, corpus)?;
    let total = corpus.queries.len();
    let picked: Vec<usize> = match n {
        Some(n) if n < total => {
            let mut rng = admatch::util::seeded_rng(seed, tag);
            let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };
    Ok(picked
        .into_iter()
        .map(|i| all[&corpus.queries[i].query_id].clone())
        .collect())
}

fn cmd_eval_coverage(args: &EvalCoverageArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    let index = load_index(&args.index)?;
    let (ids, vectors, weights) = embedded_ads(&params, &corpus);
    let ads = AdSet::new(&ids, &vectors, &weights)?;
    let queries = sample_query_embeddings(
        &params,
        &corpus,
        args.n_queries,
        cfg.seed,
        "coverage-queries",
    )?;

    let k = cfg.top_k;
    let (mut cov_mips, mut cov_cos) = (0.0, 0.0);
    for q in &queries {
        let oracle = brute_force_topk(q, &ads, k, Objective::Weighted)?;
        let mips = search_mips(&index, q, k, cfg.nprobe, cfg.rerank_depth)?;
        let cosine = search_cosine_rerank(&index, q, k, cfg.nprobe, cfg.shortlist_size)?;
        cov_mips += coverage_rate(&mips, &oracle, k)?;
        cov_cos += coverage_rate(&cosine, &oracle, k)?;
    }
    let n = queries.len() as f64;
    let report = CoverageReport {
        n_queries: queries.len(),
        k,
        nprobe: cfg.nprobe,
        rerank_depth: cfg.rerank_depth,
        shortlist_size: cfg.shortlist_size,
        mean_coverage_mips: cov_mips / n,
        mean_coverage_cosine_rerank: cov_cos / n,
    };
    let human = format!(
        "coverage of the exact weighted top-{} over {} queries (nprobe {}):\n  weighted mips (rerank depth {}) = {:.4}\n  cosine shortlist re-rank (shortlist {}) = {:.4}",
        report.k,
        report.n_queries,
        report.nprobe,
        report.rerank_depth,
        report.mean_coverage_mips,
        report.shortlist_size,
        report.mean_coverage_cosine_rerank,
    );
    out.emit("eval-coverage", &report, human);
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    compressed: LatencyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    brute: Option<LatencyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<f64>,
}

fn latency_lines(r: &LatencyReport) -> String {
    format!(
        "  {}: mean {:.1} us, p50 {:.1} us, p99 {:.1} us, min {:.1} us, max {:.1} us",
        r.label, r.mean_us, r.p50_us, r.p99_us, r.min_us, r.max_us
    )
}

fn cmd_bench(args: &BenchArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    let index = load_index(&args.index)?;
    let queries = sample_query_embeddings(
        &params,
        &corpus,
        Some(args.n_queries),
        cfg.seed,
        "bench-queries",
    )?;
    let compressed = latency_bench(
        &index,
        &queries,
        cfg.top_k,
        cfg.nprobe,
        cfg.rerank_depth,
        cfg.bench_repetitions,
        cfg.bench_warmup,
    )?;
    let brute = if args.brute {
        let (ids, vectors, weights) = embedded_ads(&params, &corpus);
        let ads = AdSet::new(&ids, &vectors, &weights)?;
        Some(latency_bench_fn(
            "brute-force",
            |q| brute_force_topk(q, &ads, cfg.top_k, Objective::Weighted),
            &queries,
            cfg.bench_repetitions,
            cfg.bench_warmup,
        )?)
    } else {
        None
    };
    let speedup = brute.as_ref().map(|b| b.mean_us / compressed.mean_us);
    let report = BenchReport {
        compressed,
        brute,
        speedup,
    };
    let mut human = format!(
        "latency over {} queries x {} repetitions ({} warmup) on {}:\n{}",
        report.compressed.n_queries,
        report.compressed.repetitions,
        report.compressed.warmup,
        report.compressed.machine,
        latency_lines(&report.compressed)
    );
    if let Some(b) = &report.brute {
        human.push_str(&format!("\n{}", latency_lines(b)));
    }
    if let Some(s) = report.speedup {
        human.push_str(&format!("\n  mean speedup = {s:.2}x"));
    }
    out.emit("bench", &report, human);
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, cfg: &mut RunConfig, out: &Reporter) -> Result<()> {
    let (corpus, _) = load_world(&args.corpus, cfg)?;
    out.config(cfg);
    let params = load_checkpoint(&args.model)?;
    let index = load_index(&args.index)?;
    let n = args.impressions.unwrap_or(cfg.n_impressions);
    let report: ServeReport = serve_simulation(
        &params,
        &index,
        &corpus,
        n,
        cfg.seed,
        cfg.top_k,
        cfg.nprobe,
        cfg.rerank_depth,
    )?;
    let human = format!(
        "serving simulation over {} impressions:\n  clicks = {}\n  spend = {:.4}\n  cpm = {:.4}\n  ctr = {:.4} (expected {:.4} +- {:.4})\n  acp = {}",
        report.impressions,
        report.clicks,
        report.spend,
        report.cpm,
        report.ctr,
        report.expected_ctr,
        report.ctr_standard_error,
        report
            .acp
            .map_or_else(|| "n/a (no clicks)".into(), |v| format!("{v:.4}")),
    );
    out.emit("simulate", &report, human);
    Ok(())
}
