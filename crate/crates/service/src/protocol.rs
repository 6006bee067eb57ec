//! Wire messages. Every frame is one JSON object carrying `"v": 1` and a
//! `"type"` of `snapshot`, `command`, `ack` or `error`.

use arachne_core::agents::MethodTag;
use arachne_core::content::SpiderConfig;
use arachne_core::patient::PatientModel;
use arachne_core::reward::AnxietyLevel;
use arachne_core::session::{Outcome, PhaseKind, SessionCommand, SessionParams, SessionPlan, SessionStatus};
use arachne_core::signals::EdaSample;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyStatus {
    Ok,
    Terminated,
}

/// State of one session after a step, phase change or termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session: String,
    pub seq: u64,
    pub t: f64,
    pub status: SessionStatus,
    pub paused: bool,
    pub phase: Option<usize>,
    pub phase_kind: Option<PhaseKind>,
    pub config: Option<SpiderConfig>,
    pub estimate: Option<AnxietyLevel>,
    pub desired: Option<AnxietyLevel>,
    pub reward: Option<f64>,
    pub action: Option<String>,
    pub method: Option<MethodTag>,
    pub safety: SafetyStatus,
    pub terminal: bool,
    pub outcome: Option<Outcome>,
    /// Raw samples from the last 4 s as `[t, µS]` pairs.
    pub eda: Vec<[f64; 2]>,
}

impl Snapshot {
    pub fn eda_samples(&self) -> Vec<EdaSample> {
        self.eda.iter().map(|[t, c]| EdaSample::new(*t, *c)).collect()
    }
}

/// Signal source requested by `start_session`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Persona { id: usize },
    Random { seed: u64 },
    Model { model: PatientModel },
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    StartSession {
        source: SourceSpec,
        #[serde(default)]
        plan: Option<SessionPlan>,
        /// Adapter for the first anxious phase of the default plan.
        #[serde(default)]
        first: Option<MethodTag>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        params: Option<SessionParams>,
        /// Wall-clock delay between steps in virtual time, milliseconds.
        #[serde(default)]
        pace_ms: u64,
        /// Align session time with wall-clock time.
        #[serde(default)]
        real_time: Option<bool>,
    },
    SetDesired {
        level: AnxietyLevel,
    },
    Pause,
    Resume,
    Abort,
    SwitchMethod {
        method: MethodTag,
    },
    SubmitSuds {
        value: u8,
    },
    Subscribe,
    Unsubscribe,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::StartSession { .. } => "start_session",
            Command::SetDesired { .. } => "set_desired",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::Abort => "abort",
            Command::SwitchMethod { .. } => "switch_method",
            Command::SubmitSuds { .. } => "submit_suds",
            Command::Subscribe => "subscribe",
            Command::Unsubscribe => "unsubscribe",
        }
    }

    /// The engine-level command, for steering commands.
    pub fn steering(&self) -> Option<SessionCommand> {
        Some(match *self {
            Command::SetDesired { level } => SessionCommand::SetDesired { level },
            Command::Pause => SessionCommand::Pause,
            Command::Resume => SessionCommand::Resume,
            Command::Abort => SessionCommand::Abort,
            Command::SwitchMethod { method } => SessionCommand::SwitchMethod { method },
            Command::SubmitSuds { value } => SessionCommand::SubmitSuds { value },
            _ => return None,
        })
    }
}

/// A command frame as received from a client.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandFrame {
    pub id: Option<u64>,
    pub session: Option<String>,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        session: Option<String>,
        command: String,
        /// Session time at which the command took effect.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        session: Option<String>,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(id: Option<u64>, session: Option<String>, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            id,
            session,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("messages serialize");
        if let Value::Object(map) = &mut value {
            map.insert("v".into(), PROTOCOL_VERSION.into());
        }
        value.to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        check_version(&mut value)?;
        serde_json::from_value(value).map_err(|e| e.to_string())
    }
}

fn check_version(value: &mut Value) -> Result<(), String> {
    let map = value.as_object_mut().ok_or("frame must be a JSON object")?;
    match map.remove("v") {
        Some(v) if v == PROTOCOL_VERSION => Ok(()),
        Some(v) => Err(format!("unsupported protocol version {v}")),
        None => Err("missing protocol version \"v\"".into()),
    }
}

/// Parses a client frame. On failure returns the correlation id, if one
/// could be read, with the diagnostic.
pub fn parse_command(text: &str) -> Result<CommandFrame, (Option<u64>, String)> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| (None, format!("invalid JSON: {e}")))?;
    let id = value.get("id").and_then(Value::as_u64);
    check_version(&mut value).map_err(|m| (id, m))?;
    let map = value.as_object_mut().expect("checked object");
    match map.remove("type") {
        Some(Value::String(t)) if t == "command" => {}
        Some(other) => return Err((id, format!("clients may only send commands, got type {other}"))),
        None => return Err((id, "missing \"type\"".into())),
    }
    map.remove("id");
    let session = match map.remove("session") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(other) => return Err((id, format!("session must be a string, got {other}"))),
    };
    let command: Command = serde_json::from_value(value).map_err(|e| (id, e.to_string()))?;
    if let Command::SubmitSuds { value } = command {
        if value > 100 {
            return Err((id, format!("SUDs {value} outside 0..=100")));
        }
    }
    Ok(CommandFrame { id, session, command })
}

/// Serializes a client frame; the inverse of [`parse_command`].
pub fn command_json(id: Option<u64>, session: Option<&str>, command: &Command) -> String {
    let mut value = serde_json::to_value(command).expect("commands serialize");
    let map = value.as_object_mut().expect("tagged enum");
    map.insert("v".into(), PROTOCOL_VERSION.into());
    map.insert("type".into(), "command".into());
    if let Some(id) = id {
        map.insert("id".into(), id.into());
    }
    if let Some(s) = session {
        map.insert("session".into(), s.into());
    }
    value.to_string()
}

/// Entry in the `GET /sessions` listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: SessionStatus,
    pub t: f64,
    pub steps: usize,
    pub persisted: bool,
}
