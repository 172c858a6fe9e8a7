//! `gozone` command-line interface.
//!
//! Exit status: 0 on success, 1 on validation or parse failures (and other
//! errors), 2 when a live run aborts on too many failed samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gozone_core::dataset::{
    check_manifest, compute_phase_stats, load_manifest_with_split, load_split, parse_manifest,
    summarize_patient_meta, DatasetManifest, PhaseStatistics, SplitSelector, Violation,
};
use gozone_core::metrics::{aggregate, EvalReport};
use gozone_core::parsing::parse_turn2;
use gozone_core::phasetool::{PhaseTool, ToolMode};
use gozone_core::{PerSampleEvaluation, SurgicalPhase, Turn2Output};
use serde::Serialize;

use crate::config::HarnessConfig;
use crate::endpoint::HttpBackend;
use crate::orchestrator::{
    config_hash, load_offline_predictions, predictions_from_transcripts, read_transcripts, run_dataset,
    write_predictions, OfflineError, PredictionRecord, RunContext, RunError, TranscriptStore,
};
use crate::review::{summarize, SessionStatus, SessionStore};
use crate::review_api::{router, ReviewService};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_ABORTED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gozone", version, about = "Phase-then-go benchmark harness")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (review label shuffles).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Manifest file, overriding `dataset.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file, overriding `dataset.split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every dataset invariant and print a JSON violation list.
    Validate {
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// Phase durations, occurrences and the transition matrix.
    Stats {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Print the JSON document instead of the tables.
        #[arg(long)]
        json: bool,
    },
    /// Score an offline predictions dump.
    Evaluate {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Line-delimited `{sample_id, turn1_raw, turn2_raw}` records.
        #[arg(long)]
        predictions: PathBuf,
        /// train, test or all.
        #[arg(long)]
        subset: Option<SplitSelector>,
        /// Row label in the table.
        #[arg(long, default_value = "model")]
        label: String,
        #[arg(long)]
        json: bool,
    },
    /// Run the two-turn protocol against a live endpoint.
    Run {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// training, inference or no-rectify.
        #[arg(long)]
        mode: Option<ToolMode>,
        #[arg(long)]
        subset: Option<SplitSelector>,
        #[arg(long)]
        base_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Blind review service and its summary.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Serve the review API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Selected ratio and accuracy rating over closed sessions.
    Summarize {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

/// Parse arguments, run, and return the exit status.
pub fn main() -> i32 {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_dataset(cfg: &mut HarnessConfig, args: &DatasetArgs) {
    if let Some(m) = &args.manifest {
        cfg.dataset.manifest = Some(m.clone());
    }
    if let Some(s) = &args.split {
        cfg.dataset.split = Some(s.clone());
    }
}

fn load_dataset(cfg: &HarnessConfig) -> anyhow::Result<DatasetManifest> {
    let path = cfg.manifest_path()?;
    load_manifest_with_split(path, cfg.dataset.split.as_deref())
        .with_context(|| format!("loading {}", path.display()))
}

pub fn execute(cli: Cli) -> anyhow::Result<i32> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Validate { dataset } => {
            apply_dataset(&mut cfg, &dataset);
            cmd_validate(&cfg)
        }
        Command::Stats { dataset, json } => {
            apply_dataset(&mut cfg, &dataset);
            cmd_stats(&cfg, json)
        }
        Command::Evaluate { dataset, predictions, subset, label, json } => {
            apply_dataset(&mut cfg, &dataset);
            if let Some(s) = subset {
                cfg.dataset.subset = s;
            }
            cmd_evaluate(&cfg, &predictions, &label, json)
        }
        Command::Run { dataset, mode, subset, base_url, model, concurrency, label } => {
            apply_dataset(&mut cfg, &dataset);
            if let Some(m) = mode {
                cfg.tool.mode = m;
            }
            if let Some(s) = subset {
                cfg.dataset.subset = s;
            }
            if let Some(u) = base_url {
                cfg.endpoint.base_url = u;
            }
            if let Some(m) = model {
                cfg.endpoint.model_name = m;
            }
            if let Some(c) = concurrency {
                cfg.endpoint.max_concurrency = c;
            }
            cmd_run(&cfg, &label)
        }
        Command::Review { command: ReviewCommand::Serve { bind, sessions } } => {
            if let Some(b) = bind {
                cfg.review.bind = b;
            }
            if let Some(s) = sessions {
                cfg.review.sessions_dir = Some(s);
            }
            cmd_review_serve(&cfg)
        }
        Command::Review { command: ReviewCommand::Summarize { sessions, json } } => {
            if let Some(s) = sessions {
                cfg.review.sessions_dir = Some(s);
            }
            cmd_review_summarize(&cfg, json)
        }
    }
}

/// `1234567` -> `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Serialize)]
struct Counts {
    samples: usize,
    train: usize,
    test: usize,
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    valid: bool,
    counts: Counts,
    violations: Vec<Violation>,
}

fn cmd_validate(cfg: &HarnessConfig) -> anyhow::Result<i32> {
    let path = cfg.manifest_path()?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut manifest = match parse_manifest(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return Ok(EXIT_FAILURE);
        }
    };
    if let Some(split) = &cfg.dataset.split {
        manifest.split = load_split(split).with_context(|| format!("loading {}", split.display()))?;
    }
    let violations = check_manifest(&manifest);
    let report = ValidationReport {
        valid: violations.is_empty(),
        counts: Counts {
            samples: manifest.records.len(),
            train: manifest.count(SplitSelector::Train),
            test: manifest.count(SplitSelector::Test),
        },
        violations,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!(
        "{} samples / {} train / {} test, {} violation(s)",
        thousands(report.counts.samples),
        thousands(report.counts.train),
        thousands(report.counts.test),
        report.violations.len()
    );
    Ok(if report.valid { EXIT_OK } else { EXIT_FAILURE })
}

#[derive(Debug, Serialize)]
struct StatsDocument<'a> {
    n_samples: usize,
    stats: &'a PhaseStatistics,
    patient_meta: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Occurrence and duration table followed by the transition matrix.
pub fn render_stats(stats: &PhaseStatistics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>8} {:>10} {:>10} {:>10} {:>10}", "Phase", "Segments", "Total (s)", "Mean (s)", "Min (s)", "Max (s)");
    for p in SurgicalPhase::ALL {
        let d = &stats.duration_seconds[&p];
        let total: f64 = d.iter().sum();
        let (mean, min, max) = if d.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                total / d.len() as f64,
                d.iter().copied().fold(f64::INFINITY, f64::min),
                d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let _ = writeln!(
            out,
            "{:<6} {:>8} {:>10.1} {:>10.1} {:>10.1} {:>10.1}",
            p.letter(),
            stats.occurrence_counts[&p],
            total,
            mean,
            min,
            max
        );
    }
    let _ = writeln!(out);
    let _ = write!(out, "{:<9}", "from\\to");
    for p in SurgicalPhase::ALL {
        let _ = write!(out, "{:>6}", p.letter());
    }
    out.push('\n');
    for from in SurgicalPhase::ALL {
        let _ = write!(out, "{:<9}", from.letter());
        for to in SurgicalPhase::ALL {
            let _ = write!(out, "{:>6}", stats.transitions(from, to));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{} video(s), {} segment(s)", stats.n_videos, stats.n_segments);
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_stats(cfg: &HarnessConfig, json: bool) -> anyhow::Result<i32> {
    let manifest = match load_dataset(cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(EXIT_FAILURE);
        }
    };
    let stats = compute_phase_stats(&manifest);
    let doc = StatsDocument {
        n_samples: manifest.records.len(),
        stats: &stats,
        patient_meta: summarize_patient_meta(&manifest),
    };
    write_json(&cfg.out_dir.join("stats.json"), &doc)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", render_stats(&stats));
    }
    Ok(EXIT_OK)
}

fn emit_report(
    dir: &Path,
    label: &str,
    report: &EvalReport,
    evaluations: &[PerSampleEvaluation],
    json: bool,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("report.txt"), report.to_table(label))?;
    write_jsonl(&dir.join("evaluations.jsonl"), evaluations)?;
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", report.to_table(label));
    }
    Ok(())
}

fn cmd_evaluate(cfg: &HarnessConfig, predictions: &Path, label: &str, json: bool) -> anyhow::Result<i32> {
    cfg.validate_settings()?;
    let manifest = match load_dataset(cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(EXIT_FAILURE);
        }
    };
    let offline = match load_offline_predictions(predictions, &manifest, cfg.dataset.subset, &cfg.rewards) {
        Ok(o) => o,
        Err(e @ OfflineError::Parse { .. }) => {
            eprintln!("error: {}: {e}", predictions.display());
            return Ok(EXIT_FAILURE);
        }
        Err(e) => return Err(e.into()),
    };
    if !offline.missing.is_empty() {
        eprintln!(
            "warning: {} selected sample(s) missing from the dump were scored at worst case: {}",
            offline.missing.len(),
            offline.missing.join(", ")
        );
    }
    let Ok(report) = aggregate(&offline.evaluations) else {
        eprintln!("error: no samples in the selected split");
        return Ok(EXIT_FAILURE);
    };
    emit_report(&cfg.out_dir, label, &report, &offline.evaluations, json)?;
    Ok(EXIT_OK)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn cmd_run(cfg: &HarnessConfig, label: &str) -> anyhow::Result<i32> {
    cfg.validate_settings()?;
    let manifest = match load_dataset(cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e:#}");
            return Ok(EXIT_FAILURE);
        }
    };
    let hash = config_hash(&(&cfg.endpoint, &cfg.rewards, &cfg.tool, &cfg.dataset));
    let store = TranscriptStore::create(&cfg.out_dir.join("runs"), &hash)?;
    let run_dir = store.dir().to_path_buf();
    let ctx = RunContext {
        backend: HttpBackend::new(&cfg.endpoint)?,
        endpoint: cfg.endpoint.clone(),
        tool: PhaseTool { fallback: cfg.tool.fallback, ..PhaseTool::default() },
        rewards: cfg.rewards,
        image_root: cfg.image_root(),
        store: Some(store),
    };
    let result = runtime()?.block_on(run_dataset(&ctx, &manifest, cfg.dataset.subset, cfg.tool.mode, &cfg.run));
    write_predictions(
        &run_dir.join("predictions.jsonl"),
        &predictions_from_transcripts(&read_transcripts(&run_dir)?),
    )?;
    match result {
        Ok(outcome) => {
            write_json(&run_dir.join("failures.json"), &outcome.failures)?;
            emit_report(&run_dir, label, &outcome.report, &outcome.evaluations, false)?;
            if !outcome.failures.is_empty() {
                eprintln!("warning: {} sample(s) failed and were scored at worst case", outcome.failures.len());
            }
            eprintln!("run directory: {}", run_dir.display());
            Ok(EXIT_OK)
        }
        Err(RunError::Aborted { failed, total, threshold, failures, .. }) => {
            write_json(&run_dir.join("failures.json"), &failures)?;
            eprintln!(
                "error: run aborted, {failed} of {total} samples failed (threshold {threshold}); transcripts kept in {}",
                run_dir.display()
            );
            Ok(EXIT_ABORTED)
        }
        Err(e) => Err(e.into()),
    }
}

/// Read a predictions dump into `(sample_id, parsed turn 2)` pairs.
pub fn load_system_outputs(path: &Path) -> anyhow::Result<Vec<(String, Turn2Output)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push((rec.sample_id, parse_turn2(&rec.turn2_raw)));
    }
    Ok(out)
}

fn cmd_review_serve(cfg: &HarnessConfig) -> anyhow::Result<i32> {
    if cfg.review.systems.len() < 2 {
        bail!("review.systems must list at least two prediction dumps");
    }
    let mut outputs = BTreeMap::new();
    for (name, path) in &cfg.review.systems {
        outputs.insert(name.clone(), load_system_outputs(path)?);
    }
    let image_refs: BTreeMap<String, String> = match &cfg.dataset.manifest {
        Some(_) => load_dataset(cfg)?
            .records
            .into_iter()
            .map(|r| (r.sample_id, r.image_ref))
            .collect(),
        None => BTreeMap::new(),
    };
    let store = SessionStore::new(cfg.sessions_dir())?;
    let service = ReviewService::new(outputs, image_refs, cfg.image_root(), store, cfg.seed)?;
    let addr: SocketAddr = cfg.review.bind.parse().with_context(|| format!("bad bind address {}", cfg.review.bind))?;
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("review service listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(service))).await?;
        anyhow::Ok(())
    })?;
    Ok(EXIT_OK)
}

fn cmd_review_summarize(cfg: &HarnessConfig, json: bool) -> anyhow::Result<i32> {
    let store = SessionStore::new(cfg.sessions_dir())?;
    let (closed, open): (Vec<_>, Vec<_>) = store
        .load_all()?
        .into_iter()
        .partition(|s| s.status == SessionStatus::Closed);
    if !open.is_empty() {
        eprintln!("note: {} open session(s) skipped", open.len());
    }
    let summary = summarize(&closed)?;
    write_json(&cfg.out_dir.join("review").join("summary.json"), &summary)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.to_table());
    }
    Ok(EXIT_OK)
}
