//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use arachne_core::agents::MethodTag;
use arachne_core::patient::{persona, random_patient, PatientModel, PERSONA_NAMES};
use arachne_core::rng::derive_seed;
use arachne_core::session::{SessionParams, SessionPlan};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Who or what produces the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatientSpec {
    /// One catalogue persona.
    Persona { id: usize },
    /// All eight catalogue personas.
    Personas,
    /// A seeded random responder.
    Random { seed: u64 },
    /// `count` random responders derived from `seed`.
    RandomCohort { count: usize, seed: u64 },
    /// An explicit model.
    Model { label: String, model: PatientModel },
    /// Recorded EDA replayed against the adapters.
    Playback { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Defaults to the two-method counterbalanced plan.
    #[serde(default)]
    pub plan: Option<SessionPlan>,
    /// Adapter for the first anxious phase of the default plan.
    #[serde(default)]
    pub first: Option<MethodTag>,
    /// Step interval, adapter, reward, signal and safety parameters.
    #[serde(default)]
    pub params: SessionParams,
    /// Signal source for `run`.
    #[serde(default)]
    pub patient: Option<PatientSpec>,
    /// Population for `experiment`.
    #[serde(default)]
    pub population: Vec<PatientSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Independent experiment replicates.
    #[serde(default = "one")]
    pub seeds: usize,
    pub output: PathBuf,
}

fn one() -> usize {
    1
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| CliError::usage(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        match value.get("version") {
            Some(v) if *v == CONFIG_VERSION => {}
            Some(v) => return Err(format!("unsupported config version {v}")),
            None => return Err("missing field `version`".into()),
        }
        let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("at `{path}`: {}", e.inner())
            }
        })?;
        config.params.validate().map_err(|e| e.to_string())?;
        if config.seeds == 0 {
            return Err("`seeds` must be at least 1".into());
        }
        Ok(config)
    }

    pub fn plan(&self) -> SessionPlan {
        self.plan
            .clone()
            .unwrap_or_else(|| SessionPlan::standard(self.first.unwrap_or(MethodTag::Rl)))
    }
}

/// A simulated participant.
pub type Participant = (String, PatientModel);

impl PatientSpec {
    /// Expands into simulated participants. Playback has none.
    pub fn participants(&self) -> Result<Vec<Participant>, CliError> {
        Ok(match self {
            PatientSpec::Persona { id } => {
                let model = persona(*id).map_err(|e| CliError::usage(e.to_string()))?;
                vec![(format!("persona-{id}"), model)]
            }
            PatientSpec::Personas => (0..PERSONA_NAMES.len())
                .map(|id| (format!("persona-{id}"), persona(id).expect("catalogue id")))
                .collect(),
            PatientSpec::Random { seed } => vec![(format!("random-{seed}"), random_patient(*seed))],
            PatientSpec::RandomCohort { count, seed } => (0..*count as u64)
                .map(|i| {
                    let s = derive_seed(*seed, "random-patient", i);
                    (format!("random-{seed}-{i}"), random_patient(s))
                })
                .collect(),
            PatientSpec::Model { label, model } => {
                model.validate().map_err(|e| CliError::usage(e.to_string()))?;
                vec![(label.clone(), model.clone())]
            }
            PatientSpec::Playback { .. } => {
                return Err(CliError::usage("playback sources cannot join an experiment population"))
            }
        })
    }
}
