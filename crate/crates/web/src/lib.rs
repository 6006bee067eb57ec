//! Browser bindings. Each export returns plain numbers or a JSON string so
//! the page needs no glue beyond `JSON.parse`.

use arachne_core::agents::MethodTag;
use arachne_core::analysis::segment_summaries;
use arachne_core::content::{Attribute, SpiderConfig};
use arachne_core::patient::{persona, PERSONA_NAMES};
use arachne_core::reward::{reward, AnxietyLevel, RewardParams};
use arachne_core::session::{run_session, PatientSource, SessionParams, SessionPlan};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Reward for each estimate 0..=10 against `desired`.
pub fn reward_row(desired: u8, sigma: f64) -> Result<Vec<f64>, String> {
    let desired = AnxietyLevel::new(desired as i64).map_err(|e| e.to_string())?;
    let params = RewardParams { sigma };
    params.validate().map_err(|e| e.to_string())?;
    Ok((0..=10)
        .map(|a| reward(AnxietyLevel::new(a).expect("in range"), desired, params))
        .collect())
}

#[derive(Debug, Serialize)]
pub struct AttributeProfile {
    pub name: &'static str,
    pub sensitivity: Vec<f64>,
    /// Noise-free anxiety when only this attribute moves away from the peak.
    pub anxiety: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct PersonaProfile {
    pub id: usize,
    pub name: &'static str,
    pub peak: SpiderConfig,
    pub peak_anxiety: f64,
    pub attributes: Vec<AttributeProfile>,
}

pub fn persona_profile(id: usize) -> Result<PersonaProfile, String> {
    let model = persona(id).map_err(|e| e.to_string())?;
    let peak = model.peak_config();
    let attributes = Attribute::ALL
        .iter()
        .map(|&a| AttributeProfile {
            name: a.name(),
            sensitivity: model.sensitivity[a.index()].clone(),
            anxiety: (0..a.cardinality())
                .map(|v| {
                    let mut values = peak.values();
                    values[a.index()] = v;
                    let c = SpiderConfig::new(values).expect("value within cardinality");
                    model.expected_anxiety(&c)
                })
                .collect(),
        })
        .collect();
    Ok(PersonaProfile {
        id,
        name: PERSONA_NAMES[id],
        peak,
        peak_anxiety: model.expected_anxiety(&peak),
        attributes,
    })
}

#[derive(Debug, Serialize)]
pub struct StepPoint {
    pub t: f64,
    pub estimate: u8,
    pub desired: u8,
    pub reward: f64,
    pub method: MethodTag,
    pub config: SpiderConfig,
}

#[derive(Debug, Serialize)]
pub struct SegmentPoint {
    pub method: MethodTag,
    pub target: u8,
    pub mse: f64,
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub steps: Vec<StepPoint>,
    pub segments: Vec<SegmentPoint>,
    pub outcome: String,
    /// EDA downsampled to 1 Hz as `[t, µS]`.
    pub eda: Vec<[f64; 2]>,
}

pub fn simulate_session(persona_id: usize, seed: u64, rl_first: bool) -> Result<Simulation, String> {
    let model = persona(persona_id).map_err(|e| e.to_string())?;
    let first = if rl_first { MethodTag::Rl } else { MethodTag::Rules };
    let trace = run_session(
        Box::new(PatientSource::new(model, seed)),
        SessionPlan::standard(first),
        SessionParams::default(),
        seed,
    )
    .map_err(|e| e.to_string())?;
    let steps = trace
        .steps
        .iter()
        .map(|s| StepPoint {
            t: s.t,
            estimate: s.estimate.get(),
            desired: s.desired.get(),
            reward: s.reward,
            method: s.method,
            config: s.config,
        })
        .collect();
    let segments = segment_summaries(&trace)
        .into_iter()
        .map(|s| SegmentPoint {
            method: s.method,
            target: s.target,
            mse: s.mse,
        })
        .collect();
    let eda = trace
        .eda
        .samples()
        .iter()
        .step_by(8)
        .map(|s| [s.t, s.conductance])
        .collect();
    let outcome = match trace.meta.outcome {
        Some(o) => serde_json::to_value(o)
            .ok()
            .and_then(|v| v["kind"].as_str().map(String::from))
            .unwrap_or_default(),
        None => "incomplete".into(),
    };
    Ok(Simulation {
        steps,
        segments,
        outcome,
        eda,
    })
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = rewardCurve)]
pub fn reward_curve(desired: u8, sigma: f64) -> Result<Vec<f64>, JsError> {
    reward_row(desired, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = personaCount)]
pub fn persona_count() -> usize {
    PERSONA_NAMES.len()
}

#[wasm_bindgen(js_name = personaProfile)]
pub fn persona_profile_json(id: usize) -> Result<String, JsError> {
    js(persona_profile(id))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_json(persona_id: usize, seed: u32, rl_first: bool) -> Result<String, JsError> {
    js(simulate_session(persona_id, seed as u64, rl_first))
}
