//! Content adapters: tabular Q-learning and the correction-factor rules
//! baseline, both behind [`Adapter`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{Action, Attribute, ContentError, Direction, SpiderConfig, StateIndex};
use crate::content::{ACTION_COUNT, STATE_COUNT};
use crate::reward::{reward, AnxietyLevel, RewardParams};
use crate::rng::SimRng;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no legal action available")]
    NoLegalAction,
    #[error("invalid Q-learning parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error("Q-table csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Rl,
    Rules,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Rl => "rl",
            MethodTag::Rules => "rules",
        }
    }

    pub fn other(self) -> MethodTag {
        match self {
            MethodTag::Rl => MethodTag::Rules,
            MethodTag::Rules => MethodTag::Rl,
        }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl" => Ok(MethodTag::Rl),
            "rules" => Ok(MethodTag::Rules),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearningParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rng_seed: u64,
    /// Zero the table when the target schedule moves to its next segment.
    pub reset_between_segments: bool,
}

impl Default for QLearningParams {
    fn default() -> Self {
        QLearningParams {
            epsilon: 0.05,
            alpha: 0.7,
            gamma: 0.6,
            rng_seed: 0,
            reset_between_segments: false,
        }
    }
}

impl QLearningParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidParams(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        Ok(())
    }
}

/// State-action values, 486 rows by 12 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<f64>,
}

impl Default for QTable {
    fn default() -> Self {
        QTable {
            values: vec![0.0; STATE_COUNT * ACTION_COUNT],
        }
    }
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, state: StateIndex, action: Action) -> f64 {
        self.values[state.get() * ACTION_COUNT + action.index()]
    }

    pub fn set(&mut self, state: StateIndex, action: Action, value: f64) {
        self.values[state.get() * ACTION_COUNT + action.index()] = value;
    }

    pub fn row(&self, state: StateIndex) -> &[f64] {
        let start = state.get() * ACTION_COUNT;
        &self.values[start..start + ACTION_COUNT]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest value among the legal actions of `state`.
    pub fn max_legal(&self, state: StateIndex) -> f64 {
        SpiderConfig::decode(state)
            .legal_actions()
            .into_iter()
            .map(|a| self.get(state, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AgentError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| AgentError::Csv(e.to_string());
        w.write_record(Action::all().map(|a| a.label())).map_err(err)?;
        for row in self.values.chunks_exact(ACTION_COUNT) {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
        }
        w.flush().map_err(|e| AgentError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<QTable, AgentError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| AgentError::Csv(e.to_string()))?;
        let expected: Vec<String> = Action::all().map(|a| a.label()).collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(AgentError::Csv("unexpected header".into()));
        }
        let mut values = Vec::with_capacity(STATE_COUNT * ACTION_COUNT);
        for (i, record) in r.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| AgentError::Csv(format!("line {line}: {e}")))?;
            if record.len() != ACTION_COUNT {
                return Err(AgentError::Csv(format!("line {line}: expected 12 columns")));
            }
            for field in record.iter() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| AgentError::Csv(format!("line {line}: bad number {field:?}")))?;
                if !v.is_finite() {
                    return Err(AgentError::Csv(format!("line {line}: non-finite value")));
                }
                values.push(v);
            }
        }
        if values.len() != STATE_COUNT * ACTION_COUNT {
            return Err(AgentError::Csv(format!(
                "expected {STATE_COUNT} rows, found {}",
                values.len() / ACTION_COUNT
            )));
        }
        Ok(QTable { values })
    }
}

/// Epsilon-greedy choice over `legal`; greedy ties are broken uniformly.
pub fn select_action(
    qtable: &QTable,
    state: StateIndex,
    legal: &[Action],
    epsilon: f64,
    rng: &mut SimRng,
) -> Result<Action, AgentError> {
    if legal.is_empty() {
        return Err(AgentError::NoLegalAction);
    }
    if rng.random::<f64>() < epsilon {
        return Ok(*legal.choose(rng).expect("non-empty"));
    }
    let best = legal
        .iter()
        .map(|a| qtable.get(state, *a))
        .fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<Action> = legal
        .iter()
        .copied()
        .filter(|a| qtable.get(state, *a) == best)
        .collect();
    Ok(*ties.choose(rng).expect("at least one maximiser"))
}

/// One-step Q-learning backup of a single entry.
pub fn q_update(
    qtable: &mut QTable,
    state: StateIndex,
    action: Action,
    reward: f64,
    next: StateIndex,
    params: &QLearningParams,
) {
    let old = qtable.get(state, action);
    let target = reward + params.gamma * qtable.max_legal(next);
    qtable.set(state, action, old + params.alpha * (target - old));
}

/// `(current - desired) / 10`, in `[-1, 1]`.
pub fn correction_factor(current: AnxietyLevel, desired: AnxietyLevel) -> f64 {
    (current.as_f64() - desired.as_f64()) / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterDecision {
    /// `None` for the identity decision.
    pub action: Option<Action>,
    pub new_config: SpiderConfig,
    pub method_tag: MethodTag,
}

impl AdapterDecision {
    fn identity(config: SpiderConfig, method_tag: MethodTag) -> Self {
        AdapterDecision {
            action: None,
            new_config: config,
            method_tag,
        }
    }
}

/// Correction-factor baseline. A positive factor (anxiety above target)
/// weakens the stimulus; a negative one strengthens it. The number of
/// candidate attributes grows with the factor's magnitude and one candidate
/// is stepped.
pub fn rules_step(
    current: AnxietyLevel,
    desired: AnxietyLevel,
    config: SpiderConfig,
    rng: &mut SimRng,
) -> AdapterDecision {
    let cf = correction_factor(current, desired);
    let direction = if cf > 0.0 {
        Direction::Decrease
    } else if cf < 0.0 {
        Direction::Increase
    } else {
        return AdapterDecision::identity(config, MethodTag::Rules);
    };
    let movable: Vec<Attribute> = Attribute::ALL
        .into_iter()
        .filter(|a| config.can_apply(Action::new(*a, direction)))
        .collect();
    if movable.is_empty() {
        return AdapterDecision::identity(config, MethodTag::Rules);
    }
    let wanted = ((cf.abs() * 6.0).round() as usize).clamp(1, 6);
    let candidates: Vec<Attribute> = movable.choose_multiple(rng, wanted).copied().collect();
    let attribute = *candidates.choose(rng).expect("non-empty");
    let action = Action::new(attribute, direction);
    AdapterDecision {
        action: Some(action),
        new_config: config.apply(action).expect("movable attribute"),
        method_tag: MethodTag::Rules,
    }
}

#[derive(Debug, Clone)]
pub struct RlAdapter {
    qtable: QTable,
    params: QLearningParams,
    reward_params: RewardParams,
    rng: SimRng,
    previous: Option<(StateIndex, Action)>,
}

impl RlAdapter {
    pub fn new(params: QLearningParams, reward_params: RewardParams, rng: SimRng) -> Self {
        RlAdapter {
            qtable: QTable::new(),
            params,
            reward_params,
            rng,
            previous: None,
        }
    }

    pub fn with_table(mut self, qtable: QTable) -> Self {
        self.qtable = qtable;
        self
    }

    pub fn qtable(&self) -> &QTable {
        &self.qtable
    }

    pub fn params(&self) -> &QLearningParams {
        &self.params
    }

    pub fn step(
        &mut self,
        estimate: AnxietyLevel,
        desired: AnxietyLevel,
        config: SpiderConfig,
    ) -> Result<AdapterDecision, AgentError> {
        let state = config.encode();
        if let Some((prev_state, prev_action)) = self.previous {
            let r = reward(estimate, desired, self.reward_params);
            q_update(&mut self.qtable, prev_state, prev_action, r, state, &self.params);
        }
        let legal = config.legal_actions();
        let action = select_action(&self.qtable, state, &legal, self.params.epsilon, &mut self.rng)?;
        self.previous = Some((state, action));
        Ok(AdapterDecision {
            action: Some(action),
            new_config: config.apply(action)?,
            method_tag: MethodTag::Rl,
        })
    }

    fn segment_boundary(&mut self) {
        if self.params.reset_between_segments {
            self.qtable = QTable::new();
            self.previous = None;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RulesAdapter {
    rng: SimRng,
}

impl RulesAdapter {
    pub fn new(rng: SimRng) -> Self {
        RulesAdapter { rng }
    }

    pub fn step(
        &mut self,
        estimate: AnxietyLevel,
        desired: AnxietyLevel,
        config: SpiderConfig,
    ) -> AdapterDecision {
        rules_step(estimate, desired, config, &mut self.rng)
    }
}

#[derive(Debug, Clone)]
pub enum Adapter {
    Rl(Box<RlAdapter>),
    Rules(RulesAdapter),
}

impl Adapter {
    pub fn rl(params: QLearningParams, reward_params: RewardParams, rng: SimRng) -> Self {
        Adapter::Rl(Box::new(RlAdapter::new(params, reward_params, rng)))
    }

    pub fn rules(rng: SimRng) -> Self {
        Adapter::Rules(RulesAdapter::new(rng))
    }

    pub fn method(&self) -> MethodTag {
        match self {
            Adapter::Rl(_) => MethodTag::Rl,
            Adapter::Rules(_) => MethodTag::Rules,
        }
    }

    pub fn step(
        &mut self,
        estimate: AnxietyLevel,
        desired: AnxietyLevel,
        config: SpiderConfig,
    ) -> Result<AdapterDecision, AgentError> {
        match self {
            Adapter::Rl(a) => a.step(estimate, desired, config),
            Adapter::Rules(a) => Ok(a.step(estimate, desired, config)),
        }
    }

    /// Called when the target schedule enters a new segment.
    pub fn segment_boundary(&mut self) {
        if let Adapter::Rl(a) = self {
            a.segment_boundary();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn lvl(v: i64) -> AnxietyLevel {
        AnxietyLevel::new(v).unwrap()
    }

    fn rng(i: u64) -> SimRng {
        stream(99, "agents-test", i)
    }

    #[test]
    fn greedy_picks_unique_max() {
        let mut q = QTable::new();
        let s = SpiderConfig::MIN.encode();
        let legal = SpiderConfig::MIN.legal_actions();
        let target = legal[3];
        q.set(s, target, 0.5);
        let mut r = rng(0);
        for _ in 0..200 {
            assert_eq!(select_action(&q, s, &legal, 0.0, &mut r).unwrap(), target);
        }
    }

    #[test]
    fn illegal_maximum_is_never_selected() {
        let mut q = QTable::new();
        let s = SpiderConfig::MIN.encode();
        let illegal = Action::new(Attribute::Color, Direction::Decrease);
        q.set(s, illegal, 100.0);
        let legal = SpiderConfig::MIN.legal_actions();
        let mut r = rng(1);
        for _ in 0..500 {
            let a = select_action(&q, s, &legal, 0.3, &mut r).unwrap();
            assert!(legal.contains(&a));
        }
    }

    #[test]
    fn empty_legal_set_rejected() {
        let q = QTable::new();
        let mut r = rng(2);
        assert!(matches!(
            select_action(&q, StateIndex::new(0).unwrap(), &[], 0.1, &mut r),
            Err(AgentError::NoLegalAction)
        ));
    }

    /// Pearson chi-square statistic against a uniform law.
    fn chi_square_uniform(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let expected = n as f64 / counts.len() as f64;
        counts
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum()
    }

    // 99.9% quantile of chi-square with 11 degrees of freedom.
    const CHI2_11_999: f64 = 31.264;

    #[test]
    fn full_exploration_is_uniform() {
        let mut q = QTable::new();
        let config = SpiderConfig::new([1, 1, 1, 1, 0, 1]).unwrap();
        let s = config.encode();
        let legal: Vec<Action> = Action::all().collect();
        q.set(s, legal[0], 5.0);
        let mut r = rng(3);
        let mut counts = vec![0usize; 12];
        for _ in 0..10_000 {
            counts[select_action(&q, s, &legal, 1.0, &mut r).unwrap().index()] += 1;
        }
        assert!(chi_square_uniform(&counts) < CHI2_11_999, "{counts:?}");
    }

    #[test]
    fn greedy_ties_are_uniform() {
        let q = QTable::new();
        let s = StateIndex::new(100).unwrap();
        let legal: Vec<Action> = Action::all().collect();
        let mut r = rng(4);
        let mut counts = vec![0usize; 12];
        for _ in 0..12_000 {
            counts[select_action(&q, s, &legal, 0.0, &mut r).unwrap().index()] += 1;
        }
        assert!(chi_square_uniform(&counts) < CHI2_11_999, "{counts:?}");
    }

    #[test]
    fn update_examples() {
        let params = QLearningParams {
            alpha: 0.1,
            gamma: 0.9,
            ..Default::default()
        };
        let s = SpiderConfig::MIN.encode();
        let a = Action::new(Attribute::Largeness, Direction::Increase);
        let next = SpiderConfig::MIN.apply(a).unwrap().encode();

        let mut q = QTable::new();
        q_update(&mut q, s, a, 1.0, next, &params);
        assert!((q.get(s, a) - 0.1).abs() < 1e-15);

        let mut q = QTable::new();
        q_update(&mut q, s, a, 0.0, next, &params);
        assert_eq!(q, QTable::new());

        let overwrite = QLearningParams {
            alpha: 1.0,
            gamma: 0.0,
            ..Default::default()
        };
        let mut q = QTable::new();
        q.set(s, a, 3.0);
        q_update(&mut q, s, a, -0.5, next, &overwrite);
        assert_eq!(q.get(s, a), -0.5);
    }

    #[test]
    fn update_bootstraps_from_legal_actions_only() {
        let params = QLearningParams {
            alpha: 1.0,
            gamma: 0.5,
            ..Default::default()
        };
        let s = SpiderConfig::MIN.encode();
        let a = Action::new(Attribute::Color, Direction::Increase);
        let next = SpiderConfig::MAX.encode();
        let mut q = QTable::new();
        // Increase actions are illegal at the all-max config.
        for act in Action::all() {
            let v = if act.direction == Direction::Increase { 10.0 } else { -2.0 };
            q.set(next, act, v);
        }
        q_update(&mut q, s, a, 0.0, next, &params);
        assert_eq!(q.get(s, a), -1.0);
    }

    #[test]
    fn update_touches_one_entry() {
        let params = QLearningParams::default();
        let mut q = QTable::new();
        let mut r = rng(5);
        for i in 0..300 {
            let s = StateIndex::new((i * 37) % STATE_COUNT).unwrap();
            let config = SpiderConfig::decode(s);
            let legal = config.legal_actions();
            let a = *legal.choose(&mut r).unwrap();
            let next = config.apply(a).unwrap().encode();
            let before = q.clone();
            q_update(&mut q, s, a, r.random_range(-1.0..1.0), next, &params);
            let changed = before
                .values()
                .iter()
                .zip(q.values())
                .filter(|(x, y)| x != y)
                .count();
            assert!(changed <= 1);
        }
    }

    #[test]
    fn params_validation() {
        assert!(QLearningParams::default().validate().is_ok());
        let bad = [
            QLearningParams { epsilon: 1.5, ..Default::default() },
            QLearningParams { alpha: 0.0, ..Default::default() },
            QLearningParams { gamma: 1.0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
    }

    #[test]
    fn correction_factor_examples() {
        assert!((correction_factor(lvl(7), lvl(3)) - 0.4).abs() < 1e-15);
        assert_eq!(correction_factor(lvl(5), lvl(5)), 0.0);
        assert_eq!(correction_factor(lvl(0), lvl(10)), -1.0);
    }

    #[test]
    fn rules_identity_cases() {
        let mut r = rng(6);
        let c = SpiderConfig::new([1, 0, 2, 1, 1, 0]).unwrap();
        let d = rules_step(lvl(4), lvl(4), c, &mut r);
        assert_eq!((d.action, d.new_config), (None, c));
        let d = rules_step(lvl(0), lvl(10), SpiderConfig::MAX, &mut r);
        assert_eq!((d.action, d.new_config), (None, SpiderConfig::MAX));
        let d = rules_step(lvl(9), lvl(2), SpiderConfig::MIN, &mut r);
        assert_eq!(d.action, None);
    }

    #[test]
    fn rules_direction_follows_sign() {
        let mut r = rng(7);
        let c = SpiderConfig::new([1, 1, 1, 1, 0, 1]).unwrap();
        for _ in 0..100 {
            let up = rules_step(lvl(2), lvl(7), c, &mut r);
            assert_eq!(up.action.unwrap().direction, Direction::Increase);
            let down = rules_step(lvl(8), lvl(3), c, &mut r);
            let a = down.action.unwrap();
            assert_eq!(a.direction, Direction::Decrease);
            assert_ne!(a.attribute, Attribute::Hairiness);
            assert_eq!(down.new_config, c.apply(a).unwrap());
        }
    }

    /// Exact selection law of the two-stage draw, by enumerating every
    /// candidate subset and every pick within it.
    fn two_stage_law(movable: &[usize], wanted: usize) -> [f64; 6] {
        fn subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            if items.len() < k {
                return vec![];
            }
            let mut with: Vec<Vec<usize>> = subsets(&items[1..], k - 1)
                .into_iter()
                .map(|mut s| {
                    s.push(items[0]);
                    s
                })
                .collect();
            with.extend(subsets(&items[1..], k));
            with
        }
        let all = subsets(movable, wanted.min(movable.len()));
        let mut law = [0.0; 6];
        for s in &all {
            for a in s {
                law[*a] += 1.0 / (all.len() as f64 * s.len() as f64);
            }
        }
        law
    }

    #[test]
    fn rules_selection_matches_two_stage_law() {
        let cases = [
            (SpiderConfig::MAX, lvl(7), lvl(3)),
            (SpiderConfig::new([2, 0, 2, 1, 1, 0]).unwrap(), lvl(9), lvl(0)),
            (SpiderConfig::new([2, 0, 2, 1, 0, 0]).unwrap(), lvl(6), lvl(7)),
        ];
        for (ci, (config, current, desired)) in cases.into_iter().enumerate() {
            let cf = correction_factor(current, desired);
            let direction = if cf > 0.0 { Direction::Decrease } else { Direction::Increase };
            let movable: Vec<usize> = Attribute::ALL
                .iter()
                .filter(|a| config.can_apply(Action::new(**a, direction)))
                .map(|a| a.index())
                .collect();
            let wanted = ((cf.abs() * 6.0).round() as usize).clamp(1, 6);
            let law = two_stage_law(&movable, wanted);

            let runs = 10_000;
            let mut counts = [0usize; 6];
            for seed in 0..runs {
                let mut r = stream(seed, "rules-law", ci as u64);
                let d = rules_step(current, desired, config, &mut r);
                counts[d.action.unwrap().attribute.index()] += 1;
            }
            for i in 0..6 {
                let p = law[i];
                let freq = counts[i] as f64 / runs as f64;
                let sd = (p * (1.0 - p) / runs as f64).sqrt();
                assert!((freq - p).abs() <= 4.0 * sd + 1e-12, "case {ci} attr {i}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn rl_cold_start_selects_without_update() {
        let mut adapter = RlAdapter::new(QLearningParams::default(), RewardParams::default(), rng(8));
        let d = adapter.step(lvl(0), lvl(3), SpiderConfig::MIN).unwrap();
        assert_eq!(adapter.qtable(), &QTable::new());
        assert_eq!(d.method_tag, MethodTag::Rl);
        assert_eq!(d.new_config, SpiderConfig::MIN.apply(d.action.unwrap()).unwrap());
        let d2 = adapter.step(lvl(3), lvl(3), d.new_config).unwrap();
        assert!(adapter.qtable().get(SpiderConfig::MIN.encode(), d.action.unwrap()) > 0.0);
        assert!(d2.action.is_some());
    }

    #[test]
    fn reset_flag_clears_table_at_boundary() {
        let params = QLearningParams {
            reset_between_segments: true,
            ..Default::default()
        };
        let mut adapter = Adapter::rl(params, RewardParams::default(), rng(9));
        let d = adapter.step(lvl(0), lvl(3), SpiderConfig::MIN).unwrap();
        adapter.step(lvl(3), lvl(3), d.new_config).unwrap();
        adapter.segment_boundary();
        match &adapter {
            Adapter::Rl(a) => assert_eq!(a.qtable(), &QTable::new()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn rules_adapter_identity_at_target() {
        let mut adapter = Adapter::rules(rng(10));
        let c = SpiderConfig::new([0, 1, 2, 0, 1, 2]).unwrap();
        let d = adapter.step(lvl(6), lvl(6), c).unwrap();
        assert_eq!(d.action, None);
        assert_eq!(d.new_config, c);
    }

    #[test]
    fn qtable_csv_round_trip() {
        let mut q = QTable::new();
        let mut r = rng(11);
        for s in 0..STATE_COUNT {
            for a in Action::all() {
                q.set(StateIndex::new(s).unwrap(), a, r.random_range(-3.0..3.0));
            }
        }
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("locomotion+,locomotion-,movement+"));
        assert_eq!(text.lines().count(), STATE_COUNT + 1);
        assert_eq!(QTable::read_csv(&buf[..]).unwrap(), q);
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(QTable::read_csv(truncated.as_bytes()).is_err());
    }
}
