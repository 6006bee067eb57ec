//! Closed-loop adaptive exposure engine.
//!
//! A parametric virtual spider (six ordinal attributes) is adjusted step by
//! step so that an anxiety estimate derived from skin conductance tracks a
//! target level. Two adapters are provided: tabular Q-learning and a
//! correction-factor rules baseline. Simulated patients close the loop for
//! desk-scale experiments, and the `analysis` module reproduces the
//! comparison statistics and the personalization clustering.

pub mod agents;
pub mod analysis;
pub mod content;
pub mod patient;
pub mod reward;
pub mod rng;
pub mod session;
pub mod signals;
pub mod trace;

pub use agents::{Adapter, AdapterDecision, MethodTag, QLearningParams, QTable};
pub use content::{Action, Attribute, Direction, SpiderConfig, StateIndex};
pub use patient::{PatientModel, SimulatedPatient};
pub use reward::{AnxietyLevel, DesiredSchedule, RewardParams};
pub use session::{SessionPlan, SessionTrace};
pub use signals::{Calibration, EdaSample, EdaTrace, ScrFeatures};
