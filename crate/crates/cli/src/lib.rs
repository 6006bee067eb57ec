//! Batch entry points: single sessions, counterbalanced experiments,
//! analysis of stored traces, replay checks and the live service.

pub mod config;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use arachne_core::analysis::{build_report, segment_summaries, Report, ReportParams, SegmentSummary};
use arachne_core::rng::derive_seed;
use arachne_core::session::{
    replay, run_experiment, run_session, PatientSource, PlaybackSource, ReplayReport, SessionError, SessionTrace,
    SignalSource,
};
use arachne_core::signals::EdaTrace;
use arachne_core::trace::{is_trace_dir, read_trace, write_trace, TraceError};
use serde::Serialize;

pub use config::{PatientSpec, RunConfig};

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Usage = 2,
    Integrity = 3,
    Runtime = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            exit: Exit::Usage,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            exit: Exit::Runtime,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        if e.is_corrupt() {
            CliError::usage(e.to_string())
        } else {
            CliError::runtime(e.to_string())
        }
    }
}

fn session_err(e: SessionError) -> CliError {
    match e {
        SessionError::InvalidPlan(_) | SessionError::InvalidParams(_) | SessionError::EmptyPopulation => {
            CliError::usage(e.to_string())
        }
        other => CliError::runtime(other.to_string()),
    }
}

/// Seed from the flag, else the config, else a fresh one that is reported.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> (u64, bool) {
    match flag.or(config) {
        Some(s) => (s, false),
        None => (rand::random(), true),
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunOutput {
    pub seed: u64,
    pub trace_dir: PathBuf,
    pub outcome: Option<arachne_core::session::Outcome>,
    pub steps: usize,
    pub segments: Vec<SegmentSummary>,
}

/// Runs one session and writes its trace to the configured output.
pub fn cmd_run(config: &RunConfig, seed: u64) -> Result<RunOutput, CliError> {
    let spec = config
        .patient
        .as_ref()
        .ok_or_else(|| CliError::usage("`patient` is required for run"))?;
    let source: Box<dyn SignalSource> = match spec {
        PatientSpec::Playback { path } => {
            let file = fs::File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let eda = EdaTrace::read_csv(file).map_err(|e| CliError::usage(format!("{}:{e}", path.display())))?;
            Box::new(PlaybackSource::new(eda, path.display().to_string()))
        }
        spec => {
            let mut people = spec.participants()?;
            if people.len() != 1 {
                return Err(CliError::usage("run takes exactly one patient; use experiment for populations"));
            }
            let (label, model) = people.remove(0);
            Box::new(PatientSource::new(model, seed).labelled(label))
        }
    };
    let trace = run_session(source, config.plan(), config.params, seed).map_err(session_err)?;
    write_trace(&trace, &config.output)?;
    Ok(RunOutput {
        seed,
        trace_dir: config.output.clone(),
        outcome: trace.meta.outcome,
        steps: trace.steps.len(),
        segments: segment_summaries(&trace),
    })
}

#[derive(Debug, Serialize)]
pub struct ExperimentOutput {
    pub seed: u64,
    pub replicates: usize,
    pub participants: usize,
    pub failed: Vec<String>,
    pub report: Report,
}

fn replicate_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        derive_seed(seed, "replicate", r as u64)
    }
}

/// Runs a counterbalanced population `replicates` times, writes every
/// trace plus `report.json` and `report.md`.
pub fn cmd_experiment(config: &RunConfig, seed: u64, replicates: usize) -> Result<ExperimentOutput, CliError> {
    let mut population = Vec::new();
    for spec in &config.population {
        population.extend(spec.participants()?);
    }
    if population.is_empty() {
        return Err(CliError::usage("population is empty"));
    }
    if replicates == 0 {
        return Err(CliError::usage("at least one replicate is required"));
    }
    let plan = config.plan();
    let mut labelled = Vec::new();
    let mut failed = Vec::new();
    for r in 0..replicates {
        let results = run_experiment(&population, &plan, config.params, replicate_seed(seed, r)).map_err(session_err)?;
        for run in results.runs {
            let label = if replicates == 1 {
                population[run.patient].0.clone()
            } else {
                format!("rep{r}/{}", population[run.patient].0)
            };
            match run.trace {
                Ok(trace) => {
                    write_trace(&trace, &config.output.join(&label))?;
                    labelled.push((label, trace));
                }
                Err(e) => failed.push(format!("{label}: {e}")),
            }
        }
    }
    let mut report = build_report(&labelled, &ReportParams::default());
    report.notices.extend(failed.iter().map(|f| format!("session failed: {f}")));
    write_report(&report, &config.output)?;
    Ok(ExperimentOutput {
        seed,
        replicates,
        participants: population.len(),
        failed,
        report,
    })
}

pub fn write_report(report: &Report, dir: &Path) -> Result<(), CliError> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&dir.join("report.json"), &json)?;
    write_atomic(&dir.join("report.md"), report.to_markdown().as_bytes())
}

/// Trace directories at or below each path, in sorted order.
pub fn find_traces(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        if is_trace_dir(dir) {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(CliError::usage(format!("{}: not a directory", p.display())));
        }
        walk(p, &mut out)?;
    }
    Ok(out)
}

/// Analyzes stored traces and writes the report into `out`.
pub fn cmd_analyze(paths: &[PathBuf], out: &Path, params: &ReportParams) -> Result<Report, CliError> {
    let dirs = find_traces(paths)?;
    if dirs.is_empty() {
        return Err(CliError::usage("no trace directories found"));
    }
    let mut labelled = Vec::new();
    for dir in &dirs {
        let trace = read_trace(dir)?;
        labelled.push((label_for(dir, paths), trace));
    }
    let report = build_report(&labelled, params);
    write_report(&report, out)?;
    Ok(report)
}

fn label_for(dir: &Path, roots: &[PathBuf]) -> String {
    for root in roots {
        if let Ok(rel) = dir.strip_prefix(root) {
            if !rel.as_os_str().is_empty() {
                return rel.display().to_string();
            }
        }
    }
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Checks a stored trace against the engine.
pub fn cmd_replay(dir: &Path) -> Result<ReplayReport, CliError> {
    let trace: SessionTrace = read_trace(dir)?;
    replay(&trace, 1e-12).map_err(|m| CliError {
        exit: Exit::Integrity,
        message: format!("{}: {m}", dir.display()),
    })
}

/// Binds and serves until interrupted.
pub fn cmd_serve(addr: SocketAddr, traces_dir: PathBuf, manual: bool) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        let mut config = arachne_service::ServiceConfig::new(traces_dir);
        config.allow_manual = manual;
        eprintln!("listening on http://{local} (websocket at /ws)");
        arachne_service::serve(listener, arachne_service::Engine::new(config))
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}
