//! Session protocol and the closed adaptation loop.
//!
//! A session walks through its plan's phases. Relax phases show no spider
//! and end with a calibration from their EDA. Anxious phases run one
//! adaptation step per interval: estimate from the trailing tonic window,
//! reward against the target, safety check, adapter decision, new spider.
//!
//! [`Session`] is steppable so a service can inject commands between steps;
//! [`run_session`] drives it to completion.

use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Adapter, AgentError, MethodTag, QLearningParams};
use crate::analysis::{segment_summaries, SegmentSummary};
use crate::content::{Action, SpiderConfig};
use crate::patient::{PatientModel, SimulatedPatient};
use crate::reward::{reward, AnxietyLevel, DesiredSchedule, RewardError, RewardParams};
use crate::rng::{derive_seed, stream};
use crate::signals::{calibrate, scl_level, Calibration, EdaSample, EdaTrace, SignalError, SignalParams};

/// Live sources that stay silent longer than this abort the session.
pub const SENSOR_DROPOUT_S: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("sensor lost: no samples for {0:.1}s")]
    SensorLoss(f64),
    #[error("source: {0}")]
    Source(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("empty population")]
    EmptyPopulation,
    #[error("session already finished")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Relax,
    Anxious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub kind: PhaseKind,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<DesiredSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<MethodTag>,
}

impl Phase {
    pub fn relax(duration_s: f64) -> Self {
        Phase {
            kind: PhaseKind::Relax,
            duration_s,
            schedule: None,
            adapter: None,
        }
    }

    pub fn anxious(duration_s: f64, schedule: DesiredSchedule, adapter: MethodTag) -> Self {
        Phase {
            kind: PhaseKind::Anxious,
            duration_s,
            schedule: Some(schedule),
            adapter: Some(adapter),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlan {
    pub phases: Vec<Phase>,
}

impl SessionPlan {
    /// Relax 120 s, anxious 280 s with `first`, relax 120 s, anxious 280 s
    /// with the other adapter. Each anxious phase targets 3 then 7.
    pub fn standard(first: MethodTag) -> Self {
        SessionPlan {
            phases: vec![
                Phase::relax(120.0),
                Phase::anxious(280.0, DesiredSchedule::low_high(280.0), first),
                Phase::relax(120.0),
                Phase::anxious(280.0, DesiredSchedule::low_high(280.0), first.other()),
            ],
        }
    }

    /// One relax phase followed by one anxious phase.
    pub fn single(method: MethodTag) -> Self {
        SessionPlan {
            phases: vec![
                Phase::relax(120.0),
                Phase::anxious(280.0, DesiredSchedule::low_high(280.0), method),
            ],
        }
    }

    /// Same plan with the two methods swapped in every anxious phase.
    pub fn swapped(&self) -> Self {
        let mut plan = self.clone();
        for p in &mut plan.phases {
            p.adapter = p.adapter.map(MethodTag::other);
        }
        plan
    }

    pub fn total_duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    pub fn validate(&self, step_interval_s: f64, needs_calibration: bool) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::InvalidPlan(m));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        let mut calibrated = false;
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.duration_s.is_finite() && p.duration_s > 0.0) {
                return bad(format!("phase {i} has non-positive duration"));
            }
            match p.kind {
                PhaseKind::Relax => {
                    if p.schedule.is_some() || p.adapter.is_some() {
                        return bad(format!("relax phase {i} cannot carry a schedule or adapter"));
                    }
                    calibrated |= p.duration_s >= 60.0;
                }
                PhaseKind::Anxious => {
                    let Some(schedule) = &p.schedule else {
                        return bad(format!("anxious phase {i} has no schedule"));
                    };
                    if p.adapter.is_none() {
                        return bad(format!("anxious phase {i} has no adapter"));
                    }
                    if (schedule.total_duration() - p.duration_s).abs() > 1e-9 {
                        return bad(format!("anxious phase {i}: schedule length differs from phase length"));
                    }
                    if p.duration_s < step_interval_s {
                        return bad(format!("anxious phase {i} shorter than one step"));
                    }
                    if needs_calibration && !calibrated {
                        return bad(format!("anxious phase {i} has no preceding relax phase of at least 60 s"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyPolicy {
    pub max_level: AnxietyLevel,
    pub consecutive_steps: usize,
}

impl Default for SafetyPolicy {
    fn default() -> Self {
        SafetyPolicy {
            max_level: AnxietyLevel::MAX,
            consecutive_steps: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafetyVerdict {
    Continue,
    Terminate,
}

/// Terminate iff the last `consecutive_steps` estimates all sit at `max_level`.
pub fn safety_check(recent: &[AnxietyLevel], policy: &SafetyPolicy) -> SafetyVerdict {
    let n = policy.consecutive_steps.max(1);
    if recent.len() >= n && recent[recent.len() - n..].iter().all(|l| *l >= policy.max_level) {
        SafetyVerdict::Terminate
    } else {
        SafetyVerdict::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionParams {
    pub step_interval_s: f64,
    pub initial_config: SpiderConfig,
    pub qlearning: QLearningParams,
    pub reward: RewardParams,
    pub signals: SignalParams,
    pub safety: SafetyPolicy,
}

impl Default for SessionParams {
    fn default() -> Self {
        SessionParams {
            step_interval_s: 4.0,
            initial_config: SpiderConfig::MIN,
            qlearning: QLearningParams::default(),
            reward: RewardParams::default(),
            signals: SignalParams::default(),
            safety: SafetyPolicy::default(),
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::InvalidParams(m.to_string()));
        if !(self.step_interval_s.is_finite() && self.step_interval_s > 0.0) {
            return bad("step_interval_s must be positive");
        }
        self.qlearning
            .validate()
            .map_err(|e| SessionError::InvalidParams(e.to_string()))?;
        self.reward
            .validate()
            .map_err(|e| SessionError::InvalidParams(e.to_string()))?;
        let s = &self.signals;
        if !(s.min_amplitude > 0.0 && s.min_span > 0.0 && s.span_multiplier >= 0.0 && s.tonic_window_s > 0.0) {
            return bad("signal parameters must be positive");
        }
        if self.safety.consecutive_steps == 0 {
            return bad("safety.consecutive_steps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Session time of the decision, seconds.
    pub t: f64,
    pub phase: usize,
    /// Schedule segment the measured window belongs to.
    pub segment: usize,
    /// Spider shown during the measured window.
    pub config: SpiderConfig,
    pub estimate: AnxietyLevel,
    pub desired: AnxietyLevel,
    pub reward: f64,
    pub action: Option<Action>,
    pub method: MethodTag,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SudsEntry {
    pub t: f64,
    pub suds: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    SafetyTerminated { t: f64, step: usize },
    OperatorAbort { t: f64 },
    SensorLoss { t: f64 },
}

impl Outcome {
    pub fn is_terminal_stop(&self) -> bool {
        !matches!(self, Outcome::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub index: usize,
    pub kind: PhaseKind,
    pub start_t: f64,
    pub end_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<DesiredSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

/// Where the signal came from, recorded for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceInfo {
    Patient {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
        model: PatientModel,
    },
    Playback { path: String },
    Live,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub version: u32,
    pub seed: u64,
    pub plan: SessionPlan,
    pub params: SessionParams,
    pub source: SourceInfo,
    pub outcome: Option<Outcome>,
    pub phases: Vec<PhaseSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub meta: SessionMeta,
    pub steps: Vec<StepRecord>,
    pub eda: EdaTrace,
    pub suds: Vec<SudsEntry>,
}

impl SessionTrace {
    pub fn outcome(&self) -> Option<Outcome> {
        self.meta.outcome
    }

    pub fn anxious_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter()
    }

    pub fn steps_in_phase(&self, phase: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.phase == phase)
    }
}

/// How a source relates to wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Virtual time advances as fast as samples are produced.
    Virtual,
    /// Steps align to real time.
    RealTime,
}

/// Anything that can be shown a spider and yields EDA samples.
pub trait SignalSource: Send {
    fn present(&mut self, config: Option<SpiderConfig>);
    /// Samples with timestamps in `(previous call, until]`.
    fn advance_to(&mut self, until: f64) -> Result<Vec<EdaSample>, SessionError>;
    fn pacing(&self) -> Pacing {
        Pacing::Virtual
    }
    /// Whether estimates come from submitted SUDs ratings instead of EDA.
    fn manual(&self) -> bool {
        false
    }
    fn info(&self) -> SourceInfo;
}

/// Closed-loop simulated patient, advanced in 1-second ticks.
pub struct PatientSource {
    patient: SimulatedPatient,
    label: Option<String>,
}

impl PatientSource {
    pub fn new(model: PatientModel, seed: u64) -> Self {
        PatientSource {
            patient: SimulatedPatient::new(model, derive_seed(seed, "patient-source", 0)),
            label: None,
        }
    }

    pub fn labelled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

const PATIENT_TICK_S: f64 = 1.0;

impl SignalSource for PatientSource {
    fn present(&mut self, config: Option<SpiderConfig>) {
        self.patient.present(config);
    }

    fn advance_to(&mut self, until: f64) -> Result<Vec<EdaSample>, SessionError> {
        let mut out = Vec::new();
        while self.patient.time() < until - 1e-9 {
            let dt = PATIENT_TICK_S.min(until - self.patient.time());
            out.extend(self.patient.advance(dt).0);
        }
        Ok(out)
    }

    fn info(&self) -> SourceInfo {
        SourceInfo::Patient {
            label: self.label.clone(),
            model: self.patient.model().clone(),
        }
    }
}

/// Open-loop playback of a recorded trace; the spider has no effect.
pub struct PlaybackSource {
    samples: Vec<EdaSample>,
    cursor: usize,
    path: String,
}

impl PlaybackSource {
    pub fn new(trace: EdaTrace, path: impl Into<String>) -> Self {
        PlaybackSource {
            samples: trace.into(),
            cursor: 0,
            path: path.into(),
        }
    }
}

impl SignalSource for PlaybackSource {
    fn present(&mut self, _config: Option<SpiderConfig>) {}

    fn advance_to(&mut self, until: f64) -> Result<Vec<EdaSample>, SessionError> {
        let start = self.cursor;
        while self.cursor < self.samples.len() && self.samples[self.cursor].t <= until + 1e-9 {
            self.cursor += 1;
        }
        if self.cursor == self.samples.len() && start == self.cursor && until > self.samples.last().map_or(0.0, |s| s.t) + SENSOR_DROPOUT_S {
            return Err(SessionError::SensorLoss(until - self.samples.last().map_or(0.0, |s| s.t)));
        }
        Ok(self.samples[start..self.cursor].to_vec())
    }

    fn info(&self) -> SourceInfo {
        SourceInfo::Playback {
            path: self.path.clone(),
        }
    }
}

/// Samples pushed by a hardware bridge through a channel. Sample times are
/// seconds since session start.
pub struct LiveSource {
    rx: Receiver<EdaSample>,
    pending: Option<EdaSample>,
    last_config: Option<SpiderConfig>,
    on_present: Option<Box<dyn FnMut(Option<SpiderConfig>) + Send>>,
}

impl LiveSource {
    pub fn new(rx: Receiver<EdaSample>) -> Self {
        LiveSource {
            rx,
            pending: None,
            last_config: None,
            on_present: None,
        }
    }

    /// Hook invoked whenever the engine changes the displayed spider.
    pub fn on_present(mut self, f: impl FnMut(Option<SpiderConfig>) + Send + 'static) -> Self {
        self.on_present = Some(Box::new(f));
        self
    }

    pub fn shown(&self) -> Option<SpiderConfig> {
        self.last_config
    }
}

impl SignalSource for LiveSource {
    fn present(&mut self, config: Option<SpiderConfig>) {
        self.last_config = config;
        if let Some(f) = &mut self.on_present {
            f(config);
        }
    }

    fn advance_to(&mut self, until: f64) -> Result<Vec<EdaSample>, SessionError> {
        let mut out = Vec::new();
        if let Some(p) = self.pending.take() {
            if p.t > until {
                self.pending = Some(p);
                return Ok(out);
            }
            out.push(p);
        }
        let timeout = Duration::from_secs_f64(SENSOR_DROPOUT_S);
        let mut last = Instant::now();
        loop {
            match self.rx.recv_timeout(timeout) {
                Ok(s) if s.t > until => {
                    self.pending = Some(s);
                    return Ok(out);
                }
                Ok(s) => {
                    out.push(s);
                    if s.t >= until - 1e-9 {
                        return Ok(out);
                    }
                    last = Instant::now();
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(SessionError::SensorLoss(last.elapsed().as_secs_f64()))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(SessionError::SensorLoss(last.elapsed().as_secs_f64()))
                }
            }
        }
    }

    fn pacing(&self) -> Pacing {
        Pacing::RealTime
    }

    fn info(&self) -> SourceInfo {
        SourceInfo::Live
    }
}

/// No sensor: the estimate is the latest submitted SUDs rating / 10.
#[derive(Debug, Default)]
pub struct ManualSource {
    pacing_real_time: bool,
}

impl ManualSource {
    pub fn new(real_time: bool) -> Self {
        ManualSource {
            pacing_real_time: real_time,
        }
    }
}

impl SignalSource for ManualSource {
    fn present(&mut self, _config: Option<SpiderConfig>) {}

    fn advance_to(&mut self, _until: f64) -> Result<Vec<EdaSample>, SessionError> {
        Ok(Vec::new())
    }

    fn pacing(&self) -> Pacing {
        if self.pacing_real_time {
            Pacing::RealTime
        } else {
            Pacing::Virtual
        }
    }

    fn manual(&self) -> bool {
        true
    }

    fn info(&self) -> SourceInfo {
        SourceInfo::Manual
    }
}

/// Operator commands applied between adaptation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionCommand {
    SetDesired { level: AnxietyLevel },
    Pause,
    Resume,
    Abort,
    SwitchMethod { method: MethodTag },
    SubmitSuds { value: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Relaxing,
    Anxious,
    Terminated,
    Completed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    PhaseStarted { index: usize, kind: PhaseKind },
    Step(StepRecord),
    Finished(Outcome),
}

struct PhaseAdapters {
    rl: Adapter,
    rules: Adapter,
    active: MethodTag,
}

impl PhaseAdapters {
    fn new(seed: u64, phase: usize, active: MethodTag, params: &SessionParams) -> Self {
        let mut q = params.qlearning;
        q.rng_seed = derive_seed(seed, "rl", phase as u64);
        PhaseAdapters {
            rl: Adapter::rl(q, params.reward, stream(seed, "rl", phase as u64)),
            rules: Adapter::rules(stream(seed, "rules", phase as u64)),
            active,
        }
    }

    fn get(&mut self, method: MethodTag) -> &mut Adapter {
        match method {
            MethodTag::Rl => &mut self.rl,
            MethodTag::Rules => &mut self.rules,
        }
    }

    fn segment_boundary(&mut self) {
        self.rl.segment_boundary();
        self.rules.segment_boundary();
    }
}

struct AnxiousState {
    step: usize,
    steps_total: usize,
    adapters: PhaseAdapters,
    segment: Option<usize>,
}

enum Cursor {
    /// About to start the phase with this index.
    PhaseStart(usize),
    Relax(usize),
    Anxious(usize, Box<AnxiousState>),
    Done,
}

pub struct Session {
    source: Box<dyn SignalSource>,
    trace: SessionTrace,
    cursor: Cursor,
    config: Option<SpiderConfig>,
    calibration: Option<Calibration>,
    recent: Vec<AnxietyLevel>,
    desired_override: Option<AnxietyLevel>,
    latest_suds: Option<u8>,
    paused: bool,
    phase_start: f64,
    now: f64,
}

impl Session {
    pub fn new(
        source: Box<dyn SignalSource>,
        plan: SessionPlan,
        params: SessionParams,
        seed: u64,
    ) -> Result<Self, SessionError> {
        params.validate()?;
        plan.validate(params.step_interval_s, !source.manual())?;
        let meta = SessionMeta {
            version: 1,
            seed,
            plan,
            params,
            source: source.info(),
            outcome: None,
            phases: Vec::new(),
        };
        Ok(Session {
            source,
            trace: SessionTrace {
                meta,
                steps: Vec::new(),
                eda: EdaTrace::default(),
                suds: Vec::new(),
            },
            cursor: Cursor::PhaseStart(0),
            config: None,
            calibration: None,
            recent: Vec::new(),
            desired_override: None,
            latest_suds: None,
            paused: false,
            phase_start: 0.0,
            now: 0.0,
        })
    }

    pub fn trace(&self) -> &SessionTrace {
        &self.trace
    }

    pub fn into_trace(self) -> SessionTrace {
        self.trace
    }

    pub fn config(&self) -> Option<SpiderConfig> {
        self.config
    }

    pub fn pacing(&self) -> Pacing {
        self.source.pacing()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_done(&self) -> bool {
        matches!(self.cursor, Cursor::Done)
    }

    pub fn status(&self) -> SessionStatus {
        match (&self.cursor, self.trace.meta.outcome) {
            (Cursor::Done, Some(Outcome::Completed)) => SessionStatus::Completed,
            (Cursor::Done, _) => SessionStatus::Terminated,
            (Cursor::Relax(_), _) => SessionStatus::Relaxing,
            (Cursor::Anxious(..), _) => SessionStatus::Anxious,
            (Cursor::PhaseStart(0), _) => SessionStatus::Idle,
            (Cursor::PhaseStart(i), _) => match self.trace.meta.plan.phases[*i - 1].kind {
                PhaseKind::Relax => SessionStatus::Relaxing,
                PhaseKind::Anxious => SessionStatus::Anxious,
            },
        }
    }

    pub fn current_phase(&self) -> Option<(usize, PhaseKind)> {
        match &self.cursor {
            Cursor::Relax(i) => Some((*i, PhaseKind::Relax)),
            Cursor::Anxious(i, _) => Some((*i, PhaseKind::Anxious)),
            _ => None,
        }
    }

    /// Adapter currently in charge, if in an anxious phase.
    pub fn active_method(&self) -> Option<MethodTag> {
        match &self.cursor {
            Cursor::Anxious(_, st) => Some(st.adapters.active),
            _ => None,
        }
    }

    pub fn desired_override(&self) -> Option<AnxietyLevel> {
        self.desired_override
    }

    /// Session time reached so far.
    pub fn time(&self) -> f64 {
        self.now
    }

    /// Applies a command at the current step boundary.
    pub fn apply(&mut self, command: SessionCommand) -> Result<(), SessionError> {
        if self.is_done() {
            return Err(SessionError::Finished);
        }
        match command {
            SessionCommand::SetDesired { level } => self.desired_override = Some(level),
            SessionCommand::Pause => self.paused = true,
            SessionCommand::Resume => self.paused = false,
            SessionCommand::Abort => {
                let t = self.time();
                self.finish(Outcome::OperatorAbort { t });
            }
            SessionCommand::SwitchMethod { method } => {
                if let Cursor::Anxious(_, st) = &mut self.cursor {
                    st.adapters.active = method;
                }
            }
            SessionCommand::SubmitSuds { value } => {
                if value > 100 {
                    return Err(SessionError::InvalidParams(format!("SUDs {value} outside 0..=100")));
                }
                let t = self.time();
                self.trace.suds.push(SudsEntry { t, suds: value });
                self.latest_suds = Some(value);
            }
        }
        Ok(())
    }

    fn finish(&mut self, outcome: Outcome) {
        let now = self.time();
        if let Some(span) = self.trace.meta.phases.last_mut() {
            span.end_t = span.end_t.min(now);
        }
        self.source.present(None);
        self.config = None;
        self.trace.meta.outcome = Some(outcome);
        self.cursor = Cursor::Done;
    }

    /// Runs until the next phase start, adaptation step or the end.
    pub fn advance(&mut self) -> Result<Progress, SessionError> {
        let cursor = std::mem::replace(&mut self.cursor, Cursor::Done);
        match cursor {
            Cursor::Done => {
                self.cursor = Cursor::Done;
                Ok(Progress::Finished(self.trace.meta.outcome.unwrap_or(Outcome::Completed)))
            }
            Cursor::PhaseStart(i) if i >= self.trace.meta.plan.phases.len() => {
                self.finish(Outcome::Completed);
                Ok(Progress::Finished(Outcome::Completed))
            }
            Cursor::PhaseStart(i) => {
                let phase = self.trace.meta.plan.phases[i].clone();
                self.desired_override = None;
                self.recent.clear();
                self.trace.meta.phases.push(PhaseSpan {
                    index: i,
                    kind: phase.kind,
                    start_t: self.phase_start,
                    end_t: self.phase_start + phase.duration_s,
                    schedule: phase.schedule.clone(),
                    method: phase.adapter,
                    calibration: None,
                });
                match phase.kind {
                    PhaseKind::Relax => {
                        self.config = None;
                        self.source.present(None);
                        self.cursor = Cursor::Relax(i);
                    }
                    PhaseKind::Anxious => {
                        let params = self.trace.meta.params;
                        let method = phase.adapter.expect("validated");
                        let steps_total = (phase.duration_s / params.step_interval_s + 1e-9).floor() as usize;
                        self.config = Some(params.initial_config);
                        self.source.present(self.config);
                        self.cursor = Cursor::Anxious(
                            i,
                            Box::new(AnxiousState {
                                step: 0,
                                steps_total,
                                adapters: PhaseAdapters::new(self.trace.meta.seed, i, method, &params),
                                segment: None,
                            }),
                        );
                    }
                }
                Ok(Progress::PhaseStarted { index: i, kind: phase.kind })
            }
            Cursor::Relax(i) => {
                let end = self.phase_start + self.trace.meta.plan.phases[i].duration_s;
                if let Err(e) = self.pull_samples(end) {
                    return self.fail(e);
                }
                if !self.source.manual() && self.trace.meta.plan.phases[i].duration_s >= 60.0 {
                    let relax = EdaTrace::new(self.trace.eda.window(self.phase_start, end).to_vec())?;
                    let cal = calibrate(&relax, &self.trace.meta.params.signals)?;
                    self.calibration = Some(cal);
                    if let Some(span) = self.trace.meta.phases.last_mut() {
                        span.calibration = Some(cal);
                    }
                }
                self.phase_start = end;
                self.cursor = Cursor::PhaseStart(i + 1);
                self.advance()
            }
            Cursor::Anxious(i, mut st) => {
                if st.step >= st.steps_total {
                    self.phase_start += self.trace.meta.plan.phases[i].duration_s;
                    self.cursor = Cursor::PhaseStart(i + 1);
                    return self.advance();
                }
                match self.adaptation_step(i, &mut st) {
                    Ok(record) => {
                        if record.terminal {
                            self.trace.steps.push(record);
                            self.finish(Outcome::SafetyTerminated {
                                t: record.t,
                                step: self.trace.steps.len() - 1,
                            });
                        } else {
                            self.trace.steps.push(record);
                            self.cursor = Cursor::Anxious(i, st);
                        }
                        Ok(Progress::Step(record))
                    }
                    Err(e) => self.fail(e),
                }
            }
        }
    }

    fn fail(&mut self, e: SessionError) -> Result<Progress, SessionError> {
        if let SessionError::SensorLoss(_) = e {
            let t = self.trace.eda.last_t().unwrap_or(self.phase_start);
            self.finish(Outcome::SensorLoss { t });
        } else {
            self.cursor = Cursor::Done;
        }
        Err(e)
    }

    fn pull_samples(&mut self, until: f64) -> Result<(), SessionError> {
        let samples = self.source.advance_to(until)?;
        self.trace.eda.extend(samples)?;
        self.now = until;
        Ok(())
    }

    fn adaptation_step(&mut self, phase: usize, st: &mut AnxiousState) -> Result<StepRecord, SessionError> {
        let params = self.trace.meta.params;
        let interval = params.step_interval_s;
        st.step += 1;
        let t = self.phase_start + st.step as f64 * interval;
        self.pull_samples(t)?;

        let estimate = if self.source.manual() {
            AnxietyLevel::from_real(self.latest_suds.unwrap_or(0) as f64 / 10.0)
        } else {
            let window = self.trace.eda.window(t - params.signals.tonic_window_s, t);
            let cal = self
                .calibration
                .as_mut()
                .ok_or_else(|| SessionError::InvalidPlan("no calibration available".into()))?;
            scl_level(window, cal)?
        };

        let schedule = self.trace.meta.plan.phases[phase]
            .schedule
            .as_ref()
            .expect("validated");
        let window_start = (st.step - 1) as f64 * interval;
        let segment = schedule.segment_index(window_start)?;
        if st.segment.is_some_and(|s| s != segment) {
            st.adapters.segment_boundary();
        }
        st.segment = Some(segment);
        let desired = match self.desired_override {
            Some(level) => level,
            None => schedule.segments()[segment].target,
        };

        let config = self.config.expect("spider shown in anxious phase");
        let r = reward(estimate, desired, params.reward);
        self.recent.push(estimate);
        let method = st.adapters.active;
        if safety_check(&self.recent, &params.safety) == SafetyVerdict::Terminate {
            return Ok(StepRecord {
                t,
                phase,
                segment,
                config,
                estimate,
                desired,
                reward: r,
                action: None,
                method,
                terminal: true,
            });
        }
        let decision = st.adapters.get(method).step(estimate, desired, config)?;
        self.config = Some(decision.new_config);
        self.source.present(self.config);
        Ok(StepRecord {
            t,
            phase,
            segment,
            config,
            estimate,
            desired,
            reward: r,
            action: decision.action,
            method,
            terminal: false,
        })
    }

    /// The last `seconds` of raw EDA.
    pub fn recent_eda(&self, seconds: f64) -> Vec<EdaSample> {
        match self.trace.eda.last_t() {
            Some(end) => self.trace.eda.window(end - seconds, end).to_vec(),
            None => Vec::new(),
        }
    }
}

/// Runs a session to completion. Safety termination is an outcome, not an
/// error; sensor loss is an error.
pub fn run_session(
    source: Box<dyn SignalSource>,
    plan: SessionPlan,
    params: SessionParams,
    seed: u64,
) -> Result<SessionTrace, SessionError> {
    let mut session = Session::new(source, plan, params, seed)?;
    loop {
        if let Progress::Finished(_) = session.advance()? {
            return Ok(session.into_trace());
        }
    }
}

/// Mismatch found while replaying a trace.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayMismatch {
    #[error("step {step} (t={t}): logged reward {logged} but recomputed {recomputed}")]
    Reward { step: usize, t: f64, logged: f64, recomputed: f64 },
    #[error("step {step} (t={t}): config {logged} does not follow from previous action (expected {expected})")]
    Config { step: usize, t: f64, logged: String, expected: String },
    #[error("step {step} (t={t}): logged action {logged} but adapter chose {replayed}")]
    Action { step: usize, t: f64, logged: String, replayed: String },
    #[error("step {step}: {message}")]
    Structure { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps_checked: usize,
    pub rewards_checked: usize,
    pub actions_checked: usize,
}

fn action_label(a: Option<Action>) -> String {
    a.map_or_else(|| "none".to_string(), |a| a.label())
}

/// Re-derives rewards from logged estimates and re-runs the adapters on the
/// logged inputs with the recorded seed. Logged rewards are compared at the
/// precision they were written with.
pub fn replay(trace: &SessionTrace, reward_tolerance: f64) -> Result<ReplayReport, ReplayMismatch> {
    let meta = &trace.meta;
    let params = meta.params;
    let mut report = ReplayReport {
        steps_checked: 0,
        rewards_checked: 0,
        actions_checked: 0,
    };
    let mut current_phase: Option<(usize, PhaseAdapters, Option<usize>)> = None;
    let mut expected_config: Option<SpiderConfig> = None;
    for (i, step) in trace.steps.iter().enumerate() {
        let recomputed = reward(step.estimate, step.desired, params.reward);
        if (recomputed - step.reward).abs() > reward_tolerance {
            return Err(ReplayMismatch::Reward {
                step: i,
                t: step.t,
                logged: step.reward,
                recomputed,
            });
        }
        report.rewards_checked += 1;

        let fresh_phase = current_phase.as_ref().is_none_or(|(p, _, _)| *p != step.phase);
        if fresh_phase {
            let Some(phase) = meta.plan.phases.get(step.phase) else {
                return Err(ReplayMismatch::Structure {
                    step: i,
                    message: format!("unknown phase {}", step.phase),
                });
            };
            let method = phase.adapter.unwrap_or(step.method);
            current_phase = Some((step.phase, PhaseAdapters::new(meta.seed, step.phase, method, &params), None));
            expected_config = Some(params.initial_config);
        }
        let (_, adapters, segment) = current_phase.as_mut().expect("set above");
        if expected_config != Some(step.config) {
            return Err(ReplayMismatch::Config {
                step: i,
                t: step.t,
                logged: step.config.to_string(),
                expected: expected_config.map_or("none".into(), |c| c.to_string()),
            });
        }
        if segment.is_some_and(|s| s != step.segment) {
            adapters.segment_boundary();
        }
        *segment = Some(step.segment);
        report.steps_checked += 1;

        if step.terminal {
            if step.action.is_some() {
                return Err(ReplayMismatch::Action {
                    step: i,
                    t: step.t,
                    logged: action_label(step.action),
                    replayed: "none".into(),
                });
            }
            continue;
        }
        let decision = adapters
            .get(step.method)
            .step(step.estimate, step.desired, step.config)
            .map_err(|e| ReplayMismatch::Structure {
                step: i,
                message: e.to_string(),
            })?;
        if decision.action != step.action {
            return Err(ReplayMismatch::Action {
                step: i,
                t: step.t,
                logged: action_label(step.action),
                replayed: action_label(decision.action),
            });
        }
        report.actions_checked += 1;
        expected_config = Some(decision.new_config);
    }
    Ok(report)
}

/// One patient's counterbalanced two-method run.
#[derive(Debug, Clone)]
pub struct PatientRun {
    pub patient: usize,
    pub order: [MethodTag; 2],
    pub seed: u64,
    pub trace: Result<SessionTrace, String>,
    pub summaries: Vec<SegmentSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub seed: u64,
    pub runs: Vec<PatientRun>,
}

impl ExperimentResults {
    pub fn traces(&self) -> impl Iterator<Item = (usize, &SessionTrace)> {
        self.runs
            .iter()
            .filter_map(|r| r.trace.as_ref().ok().map(|t| (r.patient, t)))
    }
}

/// Runs every patient through the two-method plan, alternating which method
/// comes first: even-indexed patients get `plan_template` as given, odd ones
/// the swapped order. Sessions run in parallel; results keep population
/// order.
pub fn run_experiment(
    population: &[(String, PatientModel)],
    plan_template: &SessionPlan,
    params: SessionParams,
    seed: u64,
) -> Result<ExperimentResults, SessionError> {
    if population.is_empty() {
        return Err(SessionError::EmptyPopulation);
    }
    let runs = population
        .par_iter()
        .enumerate()
        .map(|(i, (label, model))| {
            let plan = if i % 2 == 0 {
                plan_template.clone()
            } else {
                plan_template.swapped()
            };
            let methods: Vec<MethodTag> = plan.phases.iter().filter_map(|p| p.adapter).collect();
            let order = [
                methods.first().copied().unwrap_or(MethodTag::Rl),
                methods.get(1).copied().unwrap_or(MethodTag::Rules),
            ];
            let session_seed = derive_seed(seed, "experiment-patient", i as u64);
            let source = PatientSource::new(model.clone(), session_seed).labelled(label.clone());
            let trace = run_session(Box::new(source), plan, params, session_seed).map_err(|e| e.to_string());
            let summaries = trace.as_ref().map(segment_summaries).unwrap_or_default();
            PatientRun {
                patient: i,
                order,
                seed: session_seed,
                trace,
                summaries,
            }
        })
        .collect();
    Ok(ExperimentResults { seed, runs })
}
