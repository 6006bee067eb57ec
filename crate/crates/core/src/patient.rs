//! Synthetic patients: per-attribute sensitivities map a spider to a latent
//! anxiety level, and a tonic-plus-phasic generator turns that level into
//! skin conductance.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Attribute, SpiderConfig};
use crate::rng::{stream, SimRng};
use crate::signals::{quantize_us, EdaSample};

/// Simulated sensor rate.
pub const SAMPLE_RATE_HZ: f64 = 8.0;

/// SCR rise and decay shape, seconds.
const SCR_RISE_S: f64 = 1.0;
const SCR_DECAY_S: f64 = 4.0;
/// Contributions older than this are dropped (below 1e-4 of the amplitude).
const SCR_HORIZON_S: f64 = SCR_RISE_S + 10.0 * SCR_DECAY_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatientError {
    #[error("unknown persona {0}; valid ids are 0..=7")]
    UnknownPersona(usize),
    #[error("invalid patient model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientModel {
    /// `sensitivity[attribute][value]` in `[0, 1]`, rows sized by cardinality.
    pub sensitivity: Vec<Vec<f64>>,
    /// Level units.
    pub base_anxiety: f64,
    /// Level units per second of unchanged exposure.
    pub habituation_rate: f64,
    /// Level units.
    pub noise_sd: f64,
    /// µS.
    pub scl_base: f64,
    /// µS per level.
    pub scl_gain: f64,
    /// SCR events per second per level.
    pub scr_rate_gain: f64,
    /// µS per level.
    pub scr_amp_gain: f64,
    /// Time constant of the tonic response, seconds.
    pub latency: f64,
    pub rng_seed: u64,
}

impl PatientModel {
    pub fn validate(&self) -> Result<(), PatientError> {
        let bad = |m: String| Err(PatientError::Invalid(m));
        if self.sensitivity.len() != 6 {
            return bad(format!("sensitivity needs 6 rows, got {}", self.sensitivity.len()));
        }
        for a in Attribute::ALL {
            let row = &self.sensitivity[a.index()];
            if row.len() != a.cardinality() as usize {
                return bad(format!("sensitivity row {a} needs {} entries", a.cardinality()));
            }
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return bad(format!("sensitivity row {a} has entries outside [0, 1]"));
            }
        }
        let gains = [
            ("habituation_rate", self.habituation_rate),
            ("noise_sd", self.noise_sd),
            ("scl_base", self.scl_base),
            ("scl_gain", self.scl_gain),
            ("scr_rate_gain", self.scr_rate_gain),
            ("scr_amp_gain", self.scr_amp_gain),
            ("latency", self.latency),
        ];
        for (name, v) in gains {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.base_anxiety.is_finite() {
            return bad("base_anxiety must be finite".into());
        }
        Ok(())
    }

    /// Level before habituation and noise.
    pub fn drive(&self, config: &SpiderConfig) -> f64 {
        let total: f64 = Attribute::ALL
            .iter()
            .map(|a| self.sensitivity[a.index()][config.get(*a) as usize])
            .sum();
        self.base_anxiety + 10.0 * total / 6.0
    }

    /// Noise-free latent anxiety with no habituation.
    pub fn expected_anxiety(&self, config: &SpiderConfig) -> f64 {
        self.drive(config).clamp(0.0, 10.0)
    }

    /// The configuration with the highest noise-free anxiety (first in index
    /// order on ties).
    pub fn peak_config(&self) -> SpiderConfig {
        SpiderConfig::all()
            .fold((SpiderConfig::MIN, f64::NEG_INFINITY), |(best, v), c| {
                let a = self.drive(&c);
                if a > v {
                    (c, a)
                } else {
                    (best, v)
                }
            })
            .0
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_sd = 0.0;
        self.habituation_rate = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExposureState {
    pub time_at_config: f64,
    pub habituation_debt: f64,
}

/// Habituation bookkeeping: debt accrues linearly while the spider is
/// unchanged and halves on every change.
pub fn step_exposure(exposure: ExposureState, config_changed: bool, dt: f64, rate: f64) -> ExposureState {
    if config_changed {
        ExposureState {
            time_at_config: dt,
            habituation_debt: exposure.habituation_debt * 0.5 + rate * dt,
        }
    } else {
        ExposureState {
            time_at_config: exposure.time_at_config + dt,
            habituation_debt: exposure.habituation_debt + rate * dt,
        }
    }
}

/// `clamp(base + 10 * mean(w) - debt + noise, 0, 10)`.
pub fn latent_anxiety(
    model: &PatientModel,
    config: &SpiderConfig,
    exposure: &ExposureState,
    rng: &mut SimRng,
) -> f64 {
    let noise = if model.noise_sd > 0.0 {
        Normal::new(0.0, model.noise_sd).expect("validated sd").sample(rng)
    } else {
        0.0
    };
    (model.drive(config) - exposure.habituation_debt + noise).clamp(0.0, 10.0)
}

#[derive(Debug, Clone, Copy)]
struct ScrEvent {
    start: f64,
    amplitude: f64,
}

fn scr_shape(since: f64, amplitude: f64) -> f64 {
    if since < 0.0 {
        0.0
    } else if since < SCR_RISE_S {
        amplitude * 0.5 * (1.0 - (std::f64::consts::PI * since / SCR_RISE_S).cos())
    } else {
        amplitude * (-(since - SCR_RISE_S) / SCR_DECAY_S).exp()
    }
}

/// Tonic first-order lag plus Poisson-driven SCR events, sampled at 8 Hz.
#[derive(Debug, Clone)]
pub struct EdaGenerator {
    sample_index: u64,
    tonic: f64,
    events: Vec<ScrEvent>,
    hazard: f64,
    threshold: f64,
    started: bool,
}

impl EdaGenerator {
    /// Starts at `start_t` with the tonic level settled at `scl_base`.
    pub fn new(model: &PatientModel, start_t: f64) -> Self {
        EdaGenerator {
            sample_index: (start_t * SAMPLE_RATE_HZ).round() as u64,
            tonic: model.scl_base,
            events: Vec::new(),
            hazard: 0.0,
            threshold: 0.0,
            started: false,
        }
    }

    pub fn time(&self) -> f64 {
        self.sample_index as f64 / SAMPLE_RATE_HZ
    }

    pub fn tonic(&self) -> f64 {
        self.tonic
    }

    /// Emits `dt * 8` samples while the latent level is held at `anxiety`.
    pub fn emit(&mut self, model: &PatientModel, anxiety: f64, dt: f64, rng: &mut SimRng) -> Vec<EdaSample> {
        if !self.started {
            self.threshold = Exp1.sample(rng);
            self.started = true;
        }
        let h = 1.0 / SAMPLE_RATE_HZ;
        let n = (dt * SAMPLE_RATE_HZ).round() as usize;
        let target = model.scl_base + model.scl_gain * anxiety;
        let blend = if model.latency > 0.0 {
            1.0 - (-h / model.latency).exp()
        } else {
            1.0
        };
        let rate = model.scr_rate_gain * anxiety;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let t0 = self.time();
            // Unit-rate clock of the (possibly time-varying) Poisson process.
            self.hazard += rate * h;
            while self.hazard >= self.threshold {
                let overshoot = (self.hazard - self.threshold) / rate.max(f64::MIN_POSITIVE);
                let start = (t0 + h - overshoot).max(t0);
                let u: f64 = rng.random_range(0.5..1.5);
                self.events.push(ScrEvent {
                    start,
                    amplitude: model.scr_amp_gain * anxiety * u,
                });
                self.hazard -= self.threshold;
                self.threshold = Exp1.sample(rng);
            }
            self.sample_index += 1;
            let t = self.time();
            self.tonic += (target - self.tonic) * blend;
            self.events.retain(|e| t - e.start < SCR_HORIZON_S);
            let phasic: f64 = self.events.iter().map(|e| scr_shape(t - e.start, e.amplitude)).sum();
            out.push(EdaSample::new(t, quantize_us((self.tonic + phasic).max(0.0))));
        }
        out
    }

    /// Number of SCR events started so far that are still contributing.
    pub fn active_events(&self) -> usize {
        self.events.len()
    }
}

/// A patient with its own random stream, exposure state and EDA generator.
#[derive(Debug, Clone)]
pub struct SimulatedPatient {
    model: PatientModel,
    exposure: ExposureState,
    generator: EdaGenerator,
    rng: SimRng,
    config: Option<SpiderConfig>,
    changed: bool,
}

impl SimulatedPatient {
    /// `session_seed` is mixed with the model's own seed.
    pub fn new(model: PatientModel, session_seed: u64) -> Self {
        let rng = stream(model.rng_seed ^ session_seed.rotate_left(17), "patient", session_seed);
        let generator = EdaGenerator::new(&model, 0.0);
        SimulatedPatient {
            model,
            exposure: ExposureState::default(),
            generator,
            rng,
            config: None,
            changed: false,
        }
    }

    pub fn model(&self) -> &PatientModel {
        &self.model
    }

    pub fn time(&self) -> f64 {
        self.generator.time()
    }

    /// Shows a spider, or none during relax phases.
    pub fn present(&mut self, config: Option<SpiderConfig>) {
        if config != self.config {
            self.changed = true;
            if config.is_none() {
                self.exposure = ExposureState::default();
            }
        }
        self.config = config;
    }

    /// Advances by `dt` seconds, returning the emitted samples and the
    /// latent anxiety that drove them.
    pub fn advance(&mut self, dt: f64) -> (Vec<EdaSample>, f64) {
        let anxiety = match self.config {
            Some(config) => {
                self.exposure =
                    step_exposure(self.exposure, self.changed, dt, self.model.habituation_rate);
                latent_anxiety(&self.model, &config, &self.exposure, &mut self.rng)
            }
            None => 0.0,
        };
        self.changed = false;
        let samples = self.generator.emit(&self.model, anxiety, dt, &mut self.rng);
        (samples, anxiety)
    }
}

/// Names of the eight catalogue personas, indexed by id.
pub const PERSONA_NAMES: [&str; 8] = [
    "size-dominant",
    "movement-dominant",
    "closeness-dominant",
    "color-specific",
    "hairiness-specific",
    "locomotion-dominant",
    "mixed-pair",
    "uniform-mild",
];

// Rows: locomotion, movement, closeness, largeness, hairiness, color.
// Each persona has a preferred value per attribute; the dominant attribute
// spans the full range, the rest fall off sharply away from the preference.
const PERSONA_SENSITIVITY: [[&[f64]; 6]; 8] = [
    [
        &[0.2, 0.8, 0.2],
        &[0.8, 0.25, 0.1],
        &[0.2, 0.8, 0.3],
        &[0.0, 0.4, 1.0],
        &[0.8, 0.2],
        &[0.1, 0.2, 0.8],
    ],
    [
        &[0.8, 0.3, 0.1],
        &[0.0, 0.4, 1.0],
        &[0.1, 0.25, 0.8],
        &[0.8, 0.3, 0.1],
        &[0.2, 0.8],
        &[0.8, 0.2, 0.1],
    ],
    [
        &[0.1, 0.25, 0.8],
        &[0.2, 0.8, 0.2],
        &[0.0, 0.4, 1.0],
        &[0.25, 0.8, 0.2],
        &[0.8, 0.15],
        &[0.2, 0.8, 0.25],
    ],
    [
        &[0.2, 0.8, 0.25],
        &[0.1, 0.3, 0.8],
        &[0.8, 0.25, 0.1],
        &[0.1, 0.2, 0.8],
        &[0.2, 0.8],
        &[0.1, 1.0, 0.1],
    ],
    [
        &[0.8, 0.2, 0.1],
        &[0.25, 0.8, 0.2],
        &[0.2, 0.8, 0.2],
        &[0.8, 0.25, 0.1],
        &[0.0, 1.0],
        &[0.1, 0.25, 0.8],
    ],
    [
        &[0.0, 0.4, 1.0],
        &[0.1, 0.2, 0.8],
        &[0.8, 0.3, 0.1],
        &[0.2, 0.8, 0.2],
        &[0.8, 0.2],
        &[0.8, 0.25, 0.1],
    ],
    [
        &[0.8, 0.3, 0.1],
        &[0.0, 0.4, 1.0],
        &[0.25, 0.8, 0.2],
        &[0.1, 0.25, 0.8],
        &[0.2, 0.8],
        &[0.0, 0.4, 1.0],
    ],
    [
        &[0.1, 0.35, 0.6],
        &[0.1, 0.35, 0.6],
        &[0.1, 0.35, 0.6],
        &[0.1, 0.35, 0.6],
        &[0.1, 0.6],
        &[0.1, 0.35, 0.6],
    ],
];

const PERSONA_BASE: [f64; 8] = [0.67, 0.67, 0.67, 0.67, 0.67, 0.67, 0.33, 1.0];

/// Physiological defaults shared by the catalogue.
fn physiology(sensitivity: Vec<Vec<f64>>, base_anxiety: f64, rng_seed: u64) -> PatientModel {
    PatientModel {
        sensitivity,
        base_anxiety,
        habituation_rate: 0.02,
        noise_sd: 0.3,
        scl_base: 2.0,
        scl_gain: 0.4,
        scr_rate_gain: 0.02,
        scr_amp_gain: 0.03,
        latency: 3.0,
        rng_seed,
    }
}

/// Versioned persona catalogue (v2). Each persona peaks on a different
/// attribute pattern.
pub fn persona(id: usize) -> Result<PatientModel, PatientError> {
    let rows = PERSONA_SENSITIVITY.get(id).ok_or(PatientError::UnknownPersona(id))?;
    let sensitivity = rows.iter().map(|r| r.to_vec()).collect();
    Ok(physiology(sensitivity, PERSONA_BASE[id], 1000 + id as u64))
}

/// A random responder reproducible from `seed`: one preferred value per
/// attribute with sensitivity in [0.7, 0.9], the others in [0, 0.3], and
/// jittered physiology.
pub fn random_patient(seed: u64) -> PatientModel {
    let mut rng = stream(seed, "random-patient", 0);
    let sensitivity = Attribute::ALL
        .iter()
        .map(|a| {
            let n = a.cardinality() as usize;
            let preferred = rng.random_range(0..n);
            (0..n)
                .map(|v| {
                    if v == preferred {
                        rng.random_range(0.7..=0.9)
                    } else {
                        rng.random_range(0.0..=0.3)
                    }
                })
                .collect()
        })
        .collect();
    let base = rng.random_range(0.3..1.5);
    let mut model = physiology(sensitivity, base, seed);
    model.scl_base = rng.random_range(1.5..3.0);
    model.scl_gain = rng.random_range(0.35..0.45);
    model.habituation_rate = rng.random_range(0.015..0.025);
    model
}
