//! Command-line front end: argument definitions, subcommand runners and
//! the exit-code contract.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure |
//! | 2 | configuration or input error |
//! | 3 | I/O or file-format error |
//! | 4 | upstream service error |

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Settings, API_KEY_ENV, KEYS};
use crate::curation::{self, Agent, DirResolver, HttpAgent, IdResolver, MockAgent, PayloadResolver};
use crate::error::{Error, Result};
use crate::loss::{self, collapse_lab, noisy_permutation_batch, random_stacks, verify_bounds, BoundReport};
use crate::maxsim::{
    effective_threads, maxsim, maxsim_brute, maxsim_matrix, maxsim_matrix_threads, top_k, with_workers,
};
use crate::metrics::{evaluate, load_annotations};
use crate::temb::{load_embedding_store, save_embedding_store};
use crate::tokens::{synth_embeddings, EmbeddingStore, SynthSpec, TokenMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_UPSTREAM: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "cirlab",
    version,
    about = "MaxSim retrieval, triplet curation and InfoNCE bound checks"
)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Report directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any setting as KEY=VALUE; repeatable. See `cirlab config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine targets and generate modification texts into a triplet JSONL file.
    Curate(CurateArgs),
    /// Compare MaxSim InfoNCE with its flattened counterpart on one batch.
    VerifyBounds(BoundsArgs),
    /// Run projected gradient ascent and measure the distance to a simplex ETF.
    CollapseLab(CollapseArgs),
    /// Rank candidates for each query and score the run against annotations.
    Eval(EvalArgs),
    /// Time the score-matrix kernel on a synthetic store.
    Bench(BenchArgs),
    /// Write a seeded synthetic embedding store.
    Synth(SynthArgs),
    /// Print every resolved setting with the layer it came from.
    Config,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Corpus store (TEMB).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// First rank of the window [default: 51].
    #[arg(long)]
    pub q1: Option<usize>,
    /// Last rank of the window [default: 60].
    #[arg(long)]
    pub q2: Option<usize>,
    /// Never reuse a target across references.
    #[arg(long)]
    pub no_reuse: bool,
    /// two_step or direct.
    #[arg(long)]
    pub protocol: Option<String>,
    /// mock or http.
    #[arg(long)]
    pub agent: Option<String>,
    /// Concurrent agent calls [default: 4].
    #[arg(long)]
    pub in_flight: Option<usize>,
    /// Output JSONL [default: <out>/triplets.jsonl].
    #[arg(long)]
    pub triplets_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Take query stacks from this store instead of synthesizing them.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Batch size [default: 128].
    #[arg(long)]
    pub n: Option<usize>,
    /// Tokens per synthetic item [default: 4].
    #[arg(long)]
    pub p: Option<usize>,
    /// Synthetic dimension [default: 16].
    #[arg(long)]
    pub d: Option<usize>,
    /// Temperature [default: 0.1].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Target perturbation scale [default: 0.01].
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CollapseArgs {
    /// Item count [default: 8].
    #[arg(long)]
    pub m: Option<usize>,
    /// Tokens per item [default: 1].
    #[arg(long)]
    pub p: Option<usize>,
    /// Dimension [default: 8].
    #[arg(long)]
    pub d: Option<usize>,
    /// Temperature [default: 0.1].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Ascent steps [default: 5000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step size [default: 0.5].
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Tie the target stacks to the query stacks.
    #[arg(long)]
    pub tie_v_to_u: bool,
    /// Pass threshold on both errors [default: 0.01].
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Composed-query store (TEMB); item ids are query ids.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Candidate store (TEMB).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Annotation JSONL.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Comma-separated cutoffs [default: 1,5,10,50].
    #[arg(long)]
    pub ks: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Destination store; also accepted through the `embeddings` setting.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Cluster count, 0 for none.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Exit code for an error, by the contract in the module docs.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::AgentUnavailable { .. } | Error::EmptyResponse => EXIT_UPSTREAM,
        Error::ChecksumMismatch(_) | Error::TieDetected { .. } | Error::NonBijectiveSigma { .. } => EXIT_VERIFY,
        _ => EXIT_CONFIG,
    }
}

/// One-line machine-parseable error report.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error code={} kind={} msg={msg}", exit_code(e), e.kind())
}

/// Overrides collected from the command line, as setting keys.
pub fn flag_overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let num = |v: Option<usize>| v.map(|v| v.to_string());
    let real = |v: Option<f64>| v.map(|v| v.to_string());
    put("seed", cli.seed.map(|v| v.to_string()));
    put("threads", num(cli.threads));
    put("out", path(&cli.out));
    match &cli.command {
        Command::Curate(a) => {
            put("embeddings", path(&a.embeddings));
            put("mining.q1", num(a.q1));
            put("mining.q2", num(a.q2));
            put("mining.allow_reuse", a.no_reuse.then(|| "false".into()));
            put("agent.protocol", a.protocol.clone());
            put("agent.mode", a.agent.clone());
            put("agent.in_flight", num(a.in_flight));
            put("triplets_out", path(&a.triplets_out));
        }
        Command::VerifyBounds(a) => {
            put("embeddings", path(&a.embeddings));
            put("bounds.n", num(a.n));
            put("bounds.p", num(a.p));
            put("bounds.d", num(a.d));
            put("bounds.tau", real(a.tau));
            put("bounds.noise", real(a.noise));
        }
        Command::CollapseLab(a) => {
            put("collapse.m", num(a.m));
            put("collapse.p", num(a.p));
            put("collapse.d", num(a.d));
            put("collapse.tau", real(a.tau));
            put("collapse.steps", num(a.steps));
            put("collapse.step_size", real(a.step_size));
            put("collapse.tie_v_to_u", a.tie_v_to_u.then(|| "true".into()));
            put("collapse.threshold", real(a.threshold));
        }
        Command::Eval(a) => {
            put("queries", path(&a.queries));
            put("embeddings", path(&a.embeddings));
            put("annotations", path(&a.annotations));
            put("eval.ks", a.ks.clone());
        }
        Command::Bench(a) => {
            put("bench.n", num(a.n));
            put("bench.p", num(a.p));
            put("bench.d", num(a.d));
        }
        Command::Synth(a) => {
            put("embeddings", path(&a.output));
            put("synth.n", num(a.n));
            put("synth.p", num(a.p));
            put("synth.d", num(a.d));
            put("synth.clusters", num(a.clusters));
            put("synth.noise", real(a.noise));
        }
        Command::Config => {}
    }
    // `--set` is applied last among flags so explicit keys can refine it.
    let mut generic = Vec::new();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set {item:?} is not KEY=VALUE")))?;
        generic.push((k.trim().to_string(), v.trim().to_string()));
    }
    generic.extend(out);
    Ok(generic)
}

/// Resolves settings for `cli` against the process environment.
pub fn settings_for(cli: &Cli) -> Result<Settings> {
    Settings::resolve(cli.config.as_deref(), |k| std::env::var(k).ok(), &flag_overrides(cli)?)
}

/// Runs the parsed command; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let settings = settings_for(cli)?;
    let threads = settings.threads()?;
    match &cli.command {
        Command::Config => {
            print!("{}", settings.render());
            Ok(EXIT_OK)
        }
        Command::Bench(_) => cmd_bench(&settings),
        _ => with_workers(threads, || dispatch(&cli.command, &settings))?,
    }
}

fn dispatch(command: &Command, s: &Settings) -> Result<i32> {
    match command {
        Command::Curate(_) => cmd_curate(s),
        Command::VerifyBounds(_) => cmd_verify_bounds(s),
        Command::CollapseLab(_) => cmd_collapse_lab(s),
        Command::Eval(_) => cmd_eval(s),
        Command::Synth(_) => cmd_synth(s),
        Command::Bench(_) | Command::Config => unreachable!("handled by run"),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn cmd_curate(s: &Settings) -> Result<i32> {
    let store = load_embedding_store(s.require_path("embeddings")?)?;
    let mining = s.mining()?;
    let opts = s.curation()?;
    let agent: Box<dyn Agent> = if s.agent_is_mock()? {
        Box::new(MockAgent)
    } else {
        Box::new(HttpAgent::new(s.endpoint(std::env::var(API_KEY_ENV).ok())?)?)
    };
    let resolver: Box<dyn PayloadResolver> = match s.path("agent.images_dir") {
        Some(dir) => Box::new(DirResolver::new(dir)),
        None => Box::new(IdResolver),
    };
    let triplets = curation::curate_triplets(&store, resolver.as_ref(), &mining, agent.as_ref(), &opts)?;
    let out = s.triplets_out();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    curation::save_triplets_jsonl(&triplets, &out)?;
    println!(
        "curated {} triplets window=[{},{}] protocol={} agent={} out={}",
        triplets.len(),
        mining.q1,
        mining.q2,
        opts.protocol.as_str(),
        agent.model(),
        out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BoundsOutput<'a> {
    #[serde(flatten)]
    report: &'a BoundReport,
    config: BoundsRunConfig,
}

#[derive(Serialize)]
struct BoundsRunConfig {
    source: String,
    noise: f64,
    seed: u64,
}

pub fn cmd_verify_bounds(s: &Settings) -> Result<i32> {
    let n: usize = s.get("bounds.n")?;
    let tau: f64 = s.get("bounds.tau")?;
    let noise: f64 = s.get("bounds.noise")?;
    let seed = s.seed()?;
    if n == 0 {
        return Err(Error::InvalidConfig("bounds.n must be at least 1".into()));
    }
    let (queries, source) = match s.path("embeddings") {
        Some(path) => {
            let store = load_embedding_store(&path)?;
            if n > store.len() {
                return Err(Error::InvalidConfig(format!(
                    "bounds.n = {n} exceeds the {} items in {}",
                    store.len(),
                    path.display()
                )));
            }
            let q: Vec<TokenMatrix<f64>> = store.matrices()[..n].iter().map(TokenMatrix::to_f64).collect();
            (q, path.display().to_string())
        }
        None => (
            random_stacks(n, s.get("bounds.p")?, s.get("bounds.d")?, seed)?,
            "synthetic".to_string(),
        ),
    };
    let batch = noisy_permutation_batch(queries, noise, tau, seed.wrapping_add(1))?;
    let report = verify_bounds(&batch);
    let out = s.out_dir().join("bounds.json");
    write_json(
        &out,
        &BoundsOutput {
            report: &report,
            config: BoundsRunConfig { source, noise, seed },
        },
    )?;
    let ok = report.proposition_ok && report.corollary_ok;
    println!(
        "verify-bounds n={} L={:.6} Ls={:.6} gap={:.3e} log_bound={:.3} assumption={} proposition={} corollary={} out={}",
        report.n,
        report.loss_maxsim,
        report.loss_standard,
        report.gap,
        report.log_bound,
        report.assumption_holds,
        report.proposition_ok,
        report.corollary_ok,
        out.display()
    );
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

#[derive(Serialize)]
struct CollapseOutput<'a> {
    final_objective: f64,
    etf_error: f64,
    alignment_error: f64,
    etf_target: f64,
    threshold: f64,
    passed: bool,
    config: &'a loss::CollapseConfig,
    objective_trace: Vec<f64>,
}

pub fn cmd_collapse_lab(s: &Settings) -> Result<i32> {
    let cfg = s.collapse()?;
    let threshold: f64 = s.get("collapse.threshold")?;
    let trace: bool = s.get("collapse.trace")?;
    let report = collapse_lab(&cfg)?;
    let passed = report.etf_error < threshold && report.alignment_error < threshold;
    let dir = s.out_dir();
    write_json(
        &dir.join("collapse.json"),
        &CollapseOutput {
            final_objective: report.final_objective,
            etf_error: report.etf_error,
            alignment_error: report.alignment_error,
            etf_target: -1.0 / (cfg.m as f64 - 1.0),
            threshold,
            passed,
            config: &cfg,
            objective_trace: report.objective_trace.iter().map(|r| r.objective).collect(),
        },
    )?;
    if trace {
        write_file(&dir.join("collapse_trace.csv"), report.trace_csv().as_bytes())?;
    }
    println!(
        "collapse-lab m={} p={} d={} steps={} objective={:.6} etf_error={:.3e} alignment_error={:.3e} passed={}",
        cfg.m, cfg.p, cfg.d, cfg.steps, report.final_objective, report.etf_error, report.alignment_error, passed
    );
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
}

pub fn cmd_eval(s: &Settings) -> Result<i32> {
    let queries = load_embedding_store(s.require_path("queries")?)?;
    let candidates = load_embedding_store(s.require_path("embeddings")?)?;
    let anns = load_annotations(s.require_path("annotations")?)?;
    let ks = s.ks()?;
    let normalize = |st: EmbeddingStore| if st.is_normalized() { Ok(st) } else { st.normalized() };
    let (queries, candidates) = (normalize(queries)?, normalize(candidates)?);
    let scores = maxsim_matrix(&queries, &candidates)?;
    let run: HashMap<String, _> = queries
        .ids()
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let list = top_k(q, scores.row(i), candidates.ids(), candidates.len(), None);
            (q.clone(), list)
        })
        .collect();
    let report = evaluate(&run, &anns, &ks)?;
    let out = s.out_dir().join("metrics.json");
    write_file(&out, report.to_json().as_bytes())?;
    let fmt_map = |m: &std::collections::BTreeMap<usize, f64>| {
        m.iter()
            .map(|(k, v)| format!("{k}:{v:.4}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    println!(
        "eval queries={} R@[{}] mAP@[{}] out={}",
        report.query_count,
        fmt_map(&report.recall_at),
        fmt_map(&report.map_at),
        out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub pairs_per_second: f64,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub threads: usize,
    pub wall_seconds: f64,
    pub checksum: String,
    pub sample_pairs: usize,
    pub sample_max_abs_diff: f64,
}

/// Number of pairs checked against the brute kernel before timing.
pub const BENCH_SAMPLE: usize = 32;

pub fn run_bench(n: usize, p: usize, d: usize, seed: u64, threads: usize) -> Result<BenchReport> {
    let store = synth_embeddings(&SynthSpec::uniform(n, p, d, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..BENCH_SAMPLE {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let (a, b) = (&store.matrices()[i], &store.matrices()[j]);
        let diff = (maxsim(a, b)? - maxsim_brute(a, b)?).abs();
        worst = worst.max(diff);
        if diff > 1e-6 {
            return Err(Error::ChecksumMismatch(format!(
                "pair ({i}, {j}) differs from the brute kernel by {diff:e}"
            )));
        }
    }
    let start = Instant::now();
    let scores = maxsim_matrix_threads(&store, &store, threads)?;
    let wall = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        pairs_per_second: (n * n) as f64 / wall.max(f64::MIN_POSITIVE),
        n,
        p,
        d,
        threads: effective_threads(threads),
        wall_seconds: wall,
        checksum: scores.checksum(),
        sample_pairs: BENCH_SAMPLE,
        sample_max_abs_diff: worst,
    })
}

pub fn cmd_bench(s: &Settings) -> Result<i32> {
    let report = run_bench(
        s.get("bench.n")?,
        s.get("bench.p")?,
        s.get("bench.d")?,
        s.seed()?,
        s.threads()?,
    )?;
    let out = s.out_dir().join("bench.json");
    write_json(&out, &report)?;
    println!(
        "bench n={} p={} d={} threads={} pairs_per_second={:.0} wall_seconds={:.4} checksum={} out={}",
        report.n,
        report.p,
        report.d,
        report.threads,
        report.pairs_per_second,
        report.wall_seconds,
        report.checksum,
        out.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_synth(s: &Settings) -> Result<i32> {
    let spec = s.synth()?;
    let out = s.require_path("embeddings")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_embedding_store(&synth_embeddings(&spec)?, &out)?;
    println!(
        "synth n={} p={} d={} seed={} out={}",
        spec.n,
        spec.p,
        spec.d,
        spec.seed,
        out.display()
    );
    Ok(EXIT_OK)
}

/// Help text listing every setting, appended to `--help`.
pub fn settings_help() -> String {
    let mut out = String::from("Settings (use --set KEY=VALUE, CIRLAB_<KEY> or a config file):\n");
    for (k, v, h) in KEYS {
        out.push_str(&format!("  {k:<28} {h} [default: {v:?}]\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        let io = Error::io("x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code(&io), EXIT_IO);
        let wrapped = Error::Curation {
            ref_id: "a".into(),
            source: Box::new(Error::AgentUnavailable {
                attempts: 3,
                reason: "down".into(),
            }),
        };
        assert_eq!(exit_code(&wrapped), EXIT_UPSTREAM);
        assert_eq!(
            exit_code(&Error::WindowOutOfRange {
                q1: 1,
                q2: 9,
                others: 3
            }),
            EXIT_CONFIG
        );
        assert_eq!(exit_code(&Error::ChecksumMismatch("x".into())), EXIT_VERIFY);
        let line = error_line(&io);
        assert!(line.starts_with("error code=3 kind=IoError msg="), "{line}");
    }

    #[test]
    fn set_and_dedicated_flags() {
        let cli = Cli::parse_from(["cirlab", "--set", "mining.q1=3", "curate", "--q1", "5", "--no-reuse"]);
        let flags = flag_overrides(&cli).unwrap();
        let s = Settings::resolve(None, |_| None, &flags).unwrap();
        assert_eq!(s.mining().unwrap().q1, 5);
        assert!(!s.mining().unwrap().allow_reuse);
        let bad = Cli::parse_from(["cirlab", "--set", "nonsense", "config"]);
        assert!(flag_overrides(&bad).is_err());
    }

    #[test]
    fn bench_reports_effective_threads() {
        let r = run_bench(16, 2, 8, 1, 0).unwrap();
        assert!(r.threads >= 1);
        assert!(r.pairs_per_second > 0.0);
        assert_eq!(r.checksum, run_bench(16, 2, 8, 1, 3).unwrap().checksum);
    }
}
