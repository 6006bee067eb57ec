//! Trace persistence.
//!
//! A session trace lives in a directory:
//!
//! ```text
//! meta.json   plan, seed, parameters, source, outcome, phase spans
//! steps.csv   t_s,config,estimate,desired,reward,action,method,phase,segment,terminal
//! eda.csv     t_s,eda_us
//! suds.csv    t_s,suds          (only when ratings were entered)
//! ```
//!
//! Directories are written to a sibling temporary path and renamed into
//! place, so readers never observe a half-written trace.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::MethodTag;
use crate::content::{Action, SpiderConfig};
use crate::reward::AnxietyLevel;
use crate::session::{SessionMeta, SessionTrace, StepRecord, SudsEntry};
use crate::signals::{EdaTrace, SignalError};

pub const META_FILE: &str = "meta.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const EDA_FILE: &str = "eda.csv";
pub const SUDS_FILE: &str = "suds.csv";

const STEPS_HEADER: [&str; 10] = [
    "t_s", "config", "estimate", "desired", "reward", "action", "method", "phase", "segment", "terminal",
];
const SUDS_HEADER: [&str; 2] = ["t_s", "suds"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a trace directory (missing {file})")]
    Missing { path: PathBuf, file: &'static str },
    #[error("{file}: {message}")]
    Json { file: PathBuf, message: String },
    #[error("{file}:{line}: {message}")]
    Malformed { file: PathBuf, line: u64, message: String },
    #[error("{file}: {source}")]
    Signal { file: PathBuf, source: SignalError },
}

impl TraceError {
    /// True when the stored data itself is unreadable, as opposed to an
    /// environment failure.
    pub fn is_corrupt(&self) -> bool {
        !matches!(self, TraceError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct StepRow<'a> {
    t_s: f64,
    config: String,
    estimate: u8,
    desired: u8,
    reward: f64,
    action: &'a str,
    method: &'a str,
    phase: usize,
    segment: usize,
    terminal: u8,
}

#[derive(Deserialize)]
struct RawStepRow {
    t_s: f64,
    config: String,
    estimate: i64,
    desired: i64,
    reward: f64,
    action: String,
    method: String,
    phase: usize,
    segment: usize,
    terminal: u8,
}

impl RawStepRow {
    fn into_record(self) -> Result<StepRecord, String> {
        let config: SpiderConfig = self.config.parse().map_err(|e| format!("config: {e}"))?;
        let estimate = AnxietyLevel::new(self.estimate).map_err(|e| format!("estimate: {e}"))?;
        let desired = AnxietyLevel::new(self.desired).map_err(|e| format!("desired: {e}"))?;
        let action = match self.action.as_str() {
            "" => None,
            a => Some(a.parse::<Action>().map_err(|e| format!("action: {e}"))?),
        };
        let method: MethodTag = self.method.parse()?;
        let terminal = match self.terminal {
            0 => false,
            1 => true,
            other => return Err(format!("terminal must be 0 or 1, got {other}")),
        };
        if !self.t_s.is_finite() || !self.reward.is_finite() {
            return Err("non-finite number".into());
        }
        Ok(StepRecord {
            t: self.t_s,
            phase: self.phase,
            segment: self.segment,
            config,
            estimate,
            desired,
            reward: self.reward,
            action,
            method,
            terminal,
        })
    }
}

/// Serializes steps to CSV. Floats use the shortest round-tripping form.
pub fn write_steps<W: Write>(steps: &[StepRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if steps.is_empty() {
        w.write_record(STEPS_HEADER)?;
    }
    for s in steps {
        let action = s.action.map(|a| a.label()).unwrap_or_default();
        w.serialize(StepRow {
            t_s: s.t,
            config: s.config.to_string(),
            estimate: s.estimate.get(),
            desired: s.desired.get(),
            reward: s.reward,
            action: &action,
            method: s.method.as_str(),
            phase: s.phase,
            segment: s.segment,
            terminal: s.terminal as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Parses steps CSV. Errors carry the 1-based line number.
pub fn read_steps<R: Read>(reader: R) -> Result<Vec<StepRecord>, (u64, String)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| (1, e.to_string()))?.clone();
    if header.iter().ne(STEPS_HEADER.iter().copied()) {
        return Err((1, format!("expected header {}", STEPS_HEADER.join(","))));
    }
    let mut steps = Vec::new();
    for row in r.deserialize::<RawStepRow>() {
        let row = row.map_err(|e| (csv_line(&e), e.to_string()))?;
        let line = steps.len() as u64 + 2;
        steps.push(row.into_record().map_err(|m| (line, m))?);
    }
    Ok(steps)
}

fn csv_line(e: &csv::Error) -> u64 {
    e.position().map(|p| p.line()).unwrap_or(0)
}

pub fn write_suds<W: Write>(suds: &[SudsEntry], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUDS_HEADER)?;
    for e in suds {
        w.write_record([e.t.to_string(), e.suds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_suds<R: Read>(reader: R) -> Result<Vec<SudsEntry>, (u64, String)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| (1, e.to_string()))?.clone();
    if header.iter().ne(SUDS_HEADER.iter().copied()) {
        return Err((1, format!("expected header {}", SUDS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in r.deserialize::<(f64, u8)>() {
        let (t, suds) = row.map_err(|e| (csv_line(&e), e.to_string()))?;
        if suds > 100 {
            return Err((out.len() as u64 + 2, format!("suds {suds} exceeds 100")));
        }
        out.push(SudsEntry { t, suds });
    }
    Ok(out)
}

/// Writes `trace` to `dir`, replacing any previous trace there.
pub fn write_trace(trace: &SessionTrace, dir: &Path) -> Result<(), TraceError> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("trace");
    let staging = tempfile::Builder::new()
        .prefix(&format!(".{name}.tmp"))
        .tempdir_in(&parent)
        .map_err(io_err(&parent))?;
    write_files(trace, staging.path())?;
    let staged = staging.keep();
    replace_dir(&staged, dir)
}

fn write_files(trace: &SessionTrace, dir: &Path) -> Result<(), TraceError> {
    let path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&trace.meta).map_err(|e| TraceError::Json {
        file: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, json).map_err(io_err(&path))?;

    let path = dir.join(STEPS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_steps(&trace.steps, io::BufWriter::new(file)).map_err(|e| csv_write_err(&path, e))?;

    let path = dir.join(EDA_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    trace
        .eda
        .write_csv(io::BufWriter::new(file))
        .map_err(|source| TraceError::Signal {
            file: path.clone(),
            source,
        })?;

    if !trace.suds.is_empty() {
        let path = dir.join(SUDS_FILE);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_suds(&trace.suds, io::BufWriter::new(file)).map_err(|e| csv_write_err(&path, e))?;
    }
    Ok(())
}

fn csv_write_err(path: &Path, e: csv::Error) -> TraceError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => TraceError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => TraceError::Json {
            file: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn replace_dir(staged: &Path, dir: &Path) -> Result<(), TraceError> {
    if dir.exists() {
        let old = staged.with_extension("old");
        fs::rename(dir, &old).map_err(io_err(dir))?;
        fs::rename(staged, dir).map_err(io_err(dir))?;
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    } else {
        fs::rename(staged, dir).map_err(io_err(dir))?;
    }
    Ok(())
}

/// True if `dir` looks like a trace directory.
pub fn is_trace_dir(dir: &Path) -> bool {
    dir.join(META_FILE).is_file() && dir.join(STEPS_FILE).is_file()
}

pub fn read_trace(dir: &Path) -> Result<SessionTrace, TraceError> {
    let open = |file: &'static str| -> Result<fs::File, TraceError> {
        let path = dir.join(file);
        fs::File::open(&path).map_err(|source| {
            if source.kind() == io::ErrorKind::NotFound {
                TraceError::Missing {
                    path: dir.to_path_buf(),
                    file,
                }
            } else {
                TraceError::Io { path, source }
            }
        })
    };

    let meta: SessionMeta =
        serde_json::from_reader(io::BufReader::new(open(META_FILE)?)).map_err(|e| TraceError::Malformed {
            file: dir.join(META_FILE),
            line: e.line() as u64,
            message: e.to_string(),
        })?;

    let malformed = |file: &str| {
        let file = dir.join(file);
        move |(line, message): (u64, String)| TraceError::Malformed { file, line, message }
    };
    let steps = read_steps(io::BufReader::new(open(STEPS_FILE)?)).map_err(malformed(STEPS_FILE))?;
    let eda = EdaTrace::read_csv(open(EDA_FILE)?).map_err(|source| match source {
        SignalError::Malformed { line, message } => TraceError::Malformed {
            file: dir.join(EDA_FILE),
            line: line as u64,
            message,
        },
        source => TraceError::Signal {
            file: dir.join(EDA_FILE),
            source,
        },
    })?;
    let suds = if dir.join(SUDS_FILE).exists() {
        read_suds(io::BufReader::new(open(SUDS_FILE)?)).map_err(malformed(SUDS_FILE))?
    } else {
        Vec::new()
    };
    Ok(SessionTrace { meta, steps, eda, suds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::MethodTag;
    use crate::patient::persona;
    use crate::session::{replay, run_session, PatientSource, SessionParams, SessionPlan};

    fn sample_trace() -> SessionTrace {
        let source = PatientSource::new(persona(2).unwrap(), 9);
        run_session(
            Box::new(source),
            SessionPlan::standard(MethodTag::Rl),
            SessionParams::default(),
            9,
        )
        .unwrap()
    }

    #[test]
    fn directory_round_trip_is_lossless() {
        let mut trace = sample_trace();
        trace.suds.push(SudsEntry { t: 130.5, suds: 40 });
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        write_trace(&trace, &dir).unwrap();
        let back = read_trace(&dir).unwrap();
        assert!(back == trace);
        assert!(replay(&back, 1e-12).is_ok());
    }

    #[test]
    fn rewrite_replaces_previous_contents() {
        let trace = sample_trace();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut with_suds = trace.clone();
        with_suds.suds.push(SudsEntry { t: 200.0, suds: 10 });
        write_trace(&with_suds, &dir).unwrap();
        write_trace(&trace, &dir).unwrap();
        assert!(!dir.join(SUDS_FILE).exists());
        let leftovers: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn steps_header_and_identity_action() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        write_steps(&trace.steps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t_s,config,estimate,desired,reward,action,method,phase,segment,terminal"
        );
        assert!(lines.next().unwrap().starts_with("124.0,\"[0,0,0,0,0,0]\""));
        assert_eq!(read_steps(text.as_bytes()).unwrap(), trace.steps);
    }

    #[test]
    fn corrupt_rows_report_line_numbers() {
        let trace = sample_trace();
        let mut buf = Vec::new();
        write_steps(&trace.steps[..5], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[4] = lines[4].replacen("rl", "bandit", 1);
        let (line, msg) = read_steps(lines.join("\n").as_bytes()).unwrap_err();
        assert_eq!(line, 5);
        assert!(msg.contains("bandit"), "{msg}");

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "124.0,oops".into();
        let (line, _) = read_steps(lines.join("\n").as_bytes()).unwrap_err();
        assert_eq!(line, 4);

        let (line, _) = read_steps("t,config\n".as_bytes()).unwrap_err();
        assert_eq!(line, 1);
    }

    #[test]
    fn out_of_range_values_rejected() {
        let row = "t_s,config,estimate,desired,reward,action,method,phase,segment,terminal\n\
                   4,\"[0,0,0,0,0,0]\",11,3,0.5,,rl,1,0,0\n";
        let (line, msg) = read_steps(row.as_bytes()).unwrap_err();
        assert_eq!(line, 2);
        assert!(msg.contains("estimate"));
        let row = row.replace(",11,", ",1,").replace("[0,0,0,0,0,0]", "[0,0,0,0,2,0]");
        assert!(read_steps(row.as_bytes()).unwrap_err().1.contains("config"));
    }

    #[test]
    fn missing_files_are_named() {
        let tmp = tempfile::tempdir().unwrap();
        match read_trace(tmp.path()) {
            Err(TraceError::Missing { file, .. }) => assert_eq!(file, META_FILE),
            other => panic!("{other:?}"),
        }
        assert!(!is_trace_dir(tmp.path()));
    }

    #[test]
    fn corrupt_eda_reports_file_and_line() {
        let trace = sample_trace();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        write_trace(&trace, &dir).unwrap();
        let eda = fs::read_to_string(dir.join(EDA_FILE)).unwrap();
        let mut lines: Vec<&str> = eda.lines().collect();
        lines[7] = "x,y";
        fs::write(dir.join(EDA_FILE), lines.join("\n")).unwrap();
        let err = read_trace(&dir).unwrap_err();
        assert!(err.is_corrupt());
        assert!(err.to_string().contains("eda.csv:8"), "{err}");
    }

    #[test]
    fn suds_round_trip_and_bounds() {
        let suds = vec![SudsEntry { t: 1.5, suds: 0 }, SudsEntry { t: 9.0, suds: 100 }];
        let mut buf = Vec::new();
        write_suds(&suds, &mut buf).unwrap();
        assert_eq!(read_suds(buf.as_slice()).unwrap(), suds);
        let (line, _) = read_suds("t_s,suds\n1,20\n2,101\n".as_bytes()).unwrap_err();
        assert_eq!(line, 3);
    }
}
