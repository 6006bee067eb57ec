//! Session registry and per-session drivers.
//!
//! Each running session is owned by one tokio task. Commands reach it
//! through a queue and are applied between adaptation steps; snapshots
//! leave through a broadcast channel.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arachne_core::agents::MethodTag;
use arachne_core::patient::{persona, random_patient};
use arachne_core::session::{
    ManualSource, Outcome, Pacing, PatientSource, Progress, Session, SessionCommand, SessionParams, SessionPlan,
    SessionStatus, SessionTrace, SignalSource, StepRecord,
};
use arachne_core::trace::write_trace;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::Instant;

use crate::protocol::{SafetyStatus, SessionSummary, Snapshot, SourceSpec};

/// Seconds of raw EDA carried by each snapshot.
pub const SNAPSHOT_EDA_S: f64 = 4.0;
const BROADCAST_CAPACITY: usize = 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Finished traces are written to `<traces_dir>/<session id>`.
    pub traces_dir: PathBuf,
    /// Accept `start_session` with a manual source.
    pub allow_manual: bool,
}

impl ServiceConfig {
    pub fn new(traces_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            traces_dir: traces_dir.into(),
            allow_manual: false,
        }
    }
}

pub struct StartRequest {
    pub source: SourceSpec,
    pub plan: Option<SessionPlan>,
    pub first: Option<MethodTag>,
    pub seed: Option<u64>,
    pub params: Option<SessionParams>,
    pub pace_ms: u64,
    pub real_time: Option<bool>,
}

type Reply = oneshot::Sender<Result<f64, String>>;

struct Entry {
    commands: mpsc::UnboundedSender<(SessionCommand, Reply)>,
    snapshots: broadcast::Sender<Arc<Snapshot>>,
    latest: Option<Arc<Snapshot>>,
    status: SessionStatus,
    steps: usize,
    persisted: Option<PathBuf>,
}

/// Shared service state.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Mutex<Registry>>,
    config: Arc<ServiceConfig>,
}

struct Registry {
    next_id: u64,
    sessions: BTreeMap<String, Entry>,
}

impl Engine {
    pub fn new(config: ServiceConfig) -> Self {
        Engine {
            inner: Arc::new(Mutex::new(Registry {
                next_id: 1,
                sessions: BTreeMap::new(),
            })),
            config: Arc::new(config),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        self.lock()
            .sessions
            .iter()
            .map(|(id, e)| SessionSummary {
                id: id.clone(),
                status: e.status,
                t: e.latest.as_ref().map_or(0.0, |s| s.t),
                steps: e.steps,
                persisted: e.persisted.is_some(),
            })
            .collect()
    }

    pub fn is_finished(&self, id: &str) -> bool {
        self.lock()
            .sessions
            .get(id)
            .is_none_or(|e| matches!(e.status, SessionStatus::Completed | SessionStatus::Terminated))
    }

    pub fn trace_dir(&self, id: &str) -> Option<Result<PathBuf, SessionStatus>> {
        let reg = self.lock();
        let e = reg.sessions.get(id)?;
        Some(e.persisted.clone().ok_or(e.status))
    }

    /// Current snapshot plus a receiver for the ones that follow.
    pub fn subscribe(&self, id: &str) -> Option<(Option<Arc<Snapshot>>, broadcast::Receiver<Arc<Snapshot>>)> {
        let reg = self.lock();
        let e = reg.sessions.get(id)?;
        Some((e.latest.clone(), e.snapshots.subscribe()))
    }

    /// Queues a steering command; resolves with the session time at which
    /// it was applied.
    pub async fn command(&self, id: &str, command: SessionCommand) -> Result<f64, String> {
        let (tx, rx) = oneshot::channel();
        {
            let reg = self.lock();
            let e = reg.sessions.get(id).ok_or_else(|| format!("unknown session {id:?}"))?;
            e.commands
                .send((command, tx))
                .map_err(|_| format!("session {id} has finished"))?;
        }
        rx.await.map_err(|_| format!("session {id} has finished"))?
    }

    /// Creates and starts a session. The returned receiver is subscribed
    /// before the first step runs.
    pub fn start(&self, req: StartRequest) -> Result<(String, broadcast::Receiver<Arc<Snapshot>>), String> {
        let seed = req.seed.unwrap_or_else(rand::random);
        let manual = matches!(req.source, SourceSpec::Manual);
        if manual && !self.config.allow_manual {
            return Err("manual sessions are disabled; start the service with --manual".into());
        }
        let source: Box<dyn SignalSource> = match req.source {
            SourceSpec::Persona { id } => {
                let model = persona(id).map_err(|e| e.to_string())?;
                Box::new(PatientSource::new(model, seed).labelled(format!("persona-{id}")))
            }
            SourceSpec::Random { seed: s } => {
                Box::new(PatientSource::new(random_patient(s), seed).labelled(format!("random-{s}")))
            }
            SourceSpec::Model { model } => {
                model.validate().map_err(|e| e.to_string())?;
                Box::new(PatientSource::new(model, seed))
            }
            SourceSpec::Manual => Box::new(ManualSource::new(req.real_time.unwrap_or(true))),
        };
        let first = req.first.unwrap_or(MethodTag::Rl);
        let plan = req.plan.unwrap_or_else(|| {
            if manual {
                SessionPlan::single(first)
            } else {
                SessionPlan::standard(first)
            }
        });
        let params = req.params.unwrap_or_default();
        let real_time = req.real_time.unwrap_or(false) || source.pacing() == Pacing::RealTime;
        let session = Session::new(source, plan, params, seed).map_err(|e| e.to_string())?;

        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (snap_tx, snap_rx) = broadcast::channel(BROADCAST_CAPACITY);
        let id = {
            let mut reg = self.lock();
            let id = format!("s{}", reg.next_id);
            reg.next_id += 1;
            reg.sessions.insert(
                id.clone(),
                Entry {
                    commands: cmd_tx,
                    snapshots: snap_tx,
                    latest: None,
                    status: SessionStatus::Idle,
                    steps: 0,
                    persisted: None,
                },
            );
            id
        };
        let driver = Driver {
            id: id.clone(),
            engine: self.clone(),
            session,
            commands: cmd_rx,
            pace: Duration::from_millis(req.pace_ms),
            real_time,
            seq: 0,
            last_step: None,
            final_sent: false,
        };
        tokio::spawn(driver.run());
        Ok((id, snap_rx))
    }

    fn publish(&self, snapshot: Snapshot, steps: usize) {
        let snapshot = Arc::new(snapshot);
        let mut reg = self.lock();
        if let Some(e) = reg.sessions.get_mut(&snapshot.session) {
            e.status = snapshot.status;
            e.steps = steps;
            e.latest = Some(snapshot.clone());
            let _ = e.snapshots.send(snapshot);
        }
    }

    fn mark_persisted(&self, id: &str, dir: PathBuf) {
        if let Some(e) = self.lock().sessions.get_mut(id) {
            e.persisted = Some(dir);
        }
    }
}

struct Driver {
    id: String,
    engine: Engine,
    session: Session,
    commands: mpsc::UnboundedReceiver<(SessionCommand, Reply)>,
    pace: Duration,
    real_time: bool,
    seq: u64,
    last_step: Option<StepRecord>,
    final_sent: bool,
}

impl Driver {
    async fn run(mut self) {
        let mut clock = Instant::now();
        while !self.session.is_done() {
            while let Ok((cmd, reply)) = self.commands.try_recv() {
                self.apply(cmd, reply);
            }
            if self.session.is_done() {
                break;
            }
            if self.session.is_paused() {
                let paused_at = Instant::now();
                match self.commands.recv().await {
                    Some((cmd, reply)) => self.apply(cmd, reply),
                    None => break,
                }
                clock += paused_at.elapsed();
                continue;
            }
            let progress = self.session.advance();
            match progress {
                Ok(Progress::Step(record)) => self.last_step = Some(record),
                Ok(Progress::PhaseStarted { .. }) => self.last_step = None,
                Ok(Progress::Finished(_)) => break,
                Err(e) => {
                    tracing::warn!(session = %self.id, error = %e, "session failed");
                    break;
                }
            }
            self.publish();
            if self.real_time {
                tokio::time::sleep_until(clock + Duration::from_secs_f64(self.session.time())).await;
            } else if !self.pace.is_zero() {
                tokio::time::sleep(self.pace).await;
            } else {
                tokio::task::yield_now().await;
            }
        }
        if !self.final_sent {
            self.publish();
        }
        let Driver {
            id,
            engine,
            session,
            mut commands,
            ..
        } = self;
        // Later commands are answered with an error.
        commands.close();
        while let Ok((_, reply)) = commands.try_recv() {
            let _ = reply.send(Err(format!("session {id} has finished")));
        }
        drop(commands);
        persist(engine, id, session.into_trace()).await;
    }

    fn apply(&mut self, cmd: SessionCommand, reply: Reply) {
        let result = self.session.apply(cmd).map(|_| self.session.time()).map_err(|e| e.to_string());
        let _ = reply.send(result);
        if matches!(cmd, SessionCommand::Abort | SessionCommand::Pause | SessionCommand::Resume) {
            self.publish();
        }
    }

    fn publish(&mut self) {
        let snapshot = self.snapshot();
        self.final_sent = snapshot.terminal;
        self.seq += 1;
        self.engine.publish(snapshot, self.session.trace().steps.len());
    }

    fn snapshot(&self) -> Snapshot {
        let trace = self.session.trace();
        let status = self.session.status();
        let outcome = trace.meta.outcome;
        let safety = match outcome {
            Some(Outcome::SafetyTerminated { .. }) => SafetyStatus::Terminated,
            _ => SafetyStatus::Ok,
        };
        let (phase, phase_kind) = match self.session.current_phase() {
            Some((i, k)) => (Some(i), Some(k)),
            None => (None, None),
        };
        let step = self.last_step;
        Snapshot {
            session: self.id.clone(),
            seq: self.seq,
            t: self.session.time(),
            status,
            paused: self.session.is_paused(),
            phase: phase.or(step.map(|s| s.phase)),
            phase_kind,
            config: self.session.config(),
            estimate: step.map(|s| s.estimate),
            desired: step.map(|s| s.desired).or(self.session.desired_override()),
            reward: step.map(|s| s.reward),
            action: step.and_then(|s| s.action).map(|a| a.label()),
            method: self.session.active_method().or(step.map(|s| s.method)),
            safety,
            terminal: self.session.is_done(),
            outcome,
            eda: self
                .session
                .recent_eda(SNAPSHOT_EDA_S)
                .iter()
                .map(|s| [s.t, s.conductance])
                .collect(),
        }
    }
}

async fn persist(engine: Engine, id: String, trace: SessionTrace) {
    let dir = engine.config.traces_dir.join(&id);
    let target = dir.clone();
    match tokio::task::spawn_blocking(move || write_trace(&trace, &target)).await {
        Ok(Ok(())) => engine.mark_persisted(&id, dir),
        Ok(Err(e)) => tracing::error!(session = %id, error = %e, "trace not persisted"),
        Err(e) => tracing::error!(session = %id, error = %e, "trace writer panicked"),
    }
}
