//! Spider attribute space, state indexing and the single-step action set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct spider configurations.
pub const STATE_COUNT: usize = 486;
/// Number of distinct actions (six attributes, two directions).
pub const ACTION_COUNT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContentError {
    #[error("attribute {attribute} value {value} out of range 0..={max}")]
    ValueOutOfRange {
        attribute: Attribute,
        value: u8,
        max: u8,
    },
    #[error("state index {0} out of range 0..486")]
    IndexOutOfRange(usize),
    #[error("action {action} leaves {attribute} outside its range (current value {value})")]
    BoundaryViolation {
        action: Action,
        attribute: Attribute,
        value: u8,
    },
    #[error("action index {0} out of range 0..12")]
    ActionIndexOutOfRange(usize),
    #[error("cannot parse {0:?}")]
    Parse(String),
}

/// The six adaptive attributes, in encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Locomotion,
    Movement,
    Closeness,
    Largeness,
    Hairiness,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Locomotion,
        Attribute::Movement,
        Attribute::Closeness,
        Attribute::Largeness,
        Attribute::Hairiness,
        Attribute::Color,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Attribute> {
        Self::ALL.get(i).copied()
    }

    /// Number of ordinal values the attribute takes.
    pub fn cardinality(self) -> u8 {
        match self {
            Attribute::Hairiness => 2,
            _ => 3,
        }
    }

    pub fn max_value(self) -> u8 {
        self.cardinality() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Locomotion => "locomotion",
            Attribute::Movement => "movement",
            Attribute::Closeness => "closeness",
            Attribute::Largeness => "largeness",
            Attribute::Hairiness => "hairiness",
            Attribute::Color => "color",
        }
    }

    /// Human-readable label of an ordinal value.
    pub fn value_label(self, value: u8) -> &'static str {
        const LABELS: [&[&str]; 6] = [
            &["standing", "walking", "jumping"],
            &["slightly", "moderate", "too much"],
            &["far away", "in the middle", "very close"],
            &["small", "medium", "large"],
            &["without", "with"],
            &["grey", "red", "black"],
        ];
        LABELS[self.index()].get(value as usize).copied().unwrap_or("?")
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = ContentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ContentError::Parse(s.to_string()))
    }
}

/// A spider configuration. Serialized as a 6-integer array in attribute order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SpiderConfig([u8; 6]);

impl SpiderConfig {
    pub const MIN: SpiderConfig = SpiderConfig([0; 6]);
    pub const MAX: SpiderConfig = SpiderConfig([2, 2, 2, 2, 1, 2]);

    pub fn new(values: [u8; 6]) -> Result<Self, ContentError> {
        for attribute in Attribute::ALL {
            let value = values[attribute.index()];
            if value > attribute.max_value() {
                return Err(ContentError::ValueOutOfRange {
                    attribute,
                    value,
                    max: attribute.max_value(),
                });
            }
        }
        Ok(SpiderConfig(values))
    }

    pub fn values(&self) -> [u8; 6] {
        self.0
    }

    pub fn get(&self, attribute: Attribute) -> u8 {
        self.0[attribute.index()]
    }

    pub fn locomotion(&self) -> u8 {
        self.0[0]
    }
    pub fn movement(&self) -> u8 {
        self.0[1]
    }
    pub fn closeness(&self) -> u8 {
        self.0[2]
    }
    pub fn largeness(&self) -> u8 {
        self.0[3]
    }
    pub fn hairiness(&self) -> u8 {
        self.0[4]
    }
    pub fn color(&self) -> u8 {
        self.0[5]
    }

    /// Mixed-radix index in attribute order.
    pub fn encode(&self) -> StateIndex {
        let index = Attribute::ALL.iter().fold(0usize, |acc, a| {
            acc * a.cardinality() as usize + self.0[a.index()] as usize
        });
        StateIndex(index as u16)
    }

    pub fn decode(index: StateIndex) -> SpiderConfig {
        let mut rest = index.0 as usize;
        let mut values = [0u8; 6];
        for a in Attribute::ALL.iter().rev() {
            let card = a.cardinality() as usize;
            values[a.index()] = (rest % card) as u8;
            rest /= card;
        }
        SpiderConfig(values)
    }

    pub fn can_apply(&self, action: Action) -> bool {
        let value = self.get(action.attribute);
        match action.direction {
            Direction::Increase => value < action.attribute.max_value(),
            Direction::Decrease => value > 0,
        }
    }

    pub fn legal_actions(&self) -> Vec<Action> {
        Action::all().filter(|a| self.can_apply(*a)).collect()
    }

    pub fn apply(&self, action: Action) -> Result<SpiderConfig, ContentError> {
        if !self.can_apply(action) {
            return Err(ContentError::BoundaryViolation {
                action,
                attribute: action.attribute,
                value: self.get(action.attribute),
            });
        }
        let mut values = self.0;
        let slot = &mut values[action.attribute.index()];
        match action.direction {
            Direction::Increase => *slot += 1,
            Direction::Decrease => *slot -= 1,
        }
        Ok(SpiderConfig(values))
    }

    /// Each attribute scaled to `[0, 1]` by its maximum value.
    pub fn normalized_vector(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for a in Attribute::ALL {
            out[a.index()] = self.get(a) as f64 / a.max_value() as f64;
        }
        out
    }

    /// Iterates all 486 configurations in index order.
    pub fn all() -> impl Iterator<Item = SpiderConfig> {
        (0..STATE_COUNT as u16).map(|i| SpiderConfig::decode(StateIndex(i)))
    }
}

impl fmt::Display for SpiderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        write!(f, "[{},{},{},{},{},{}]", v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

impl FromStr for SpiderConfig {
    type Err = ContentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ContentError::Parse(s.to_string());
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(err)?;
        let parts: Vec<u8> = inner
            .split(',')
            .map(|p| p.trim().parse::<u8>().map_err(|_| err()))
            .collect::<Result<_, _>>()?;
        let values: [u8; 6] = parts.try_into().map_err(|_| err())?;
        SpiderConfig::new(values)
    }
}

impl Serialize for SpiderConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SpiderConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = <[u8; 6]>::deserialize(deserializer)?;
        SpiderConfig::new(values).map_err(serde::de::Error::custom)
    }
}

/// Row index of the Q-table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateIndex(u16);

impl StateIndex {
    pub fn new(index: usize) -> Result<Self, ContentError> {
        if index >= STATE_COUNT {
            return Err(ContentError::IndexOutOfRange(index));
        }
        Ok(StateIndex(index as u16))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

pub fn encode_state(config: SpiderConfig) -> StateIndex {
    config.encode()
}

pub fn decode_state(index: usize) -> Result<SpiderConfig, ContentError> {
    StateIndex::new(index).map(SpiderConfig::decode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Increase => 1,
            Direction::Decrease => -1,
        }
    }
}

/// Step one attribute up or down by one ordinal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub attribute: Attribute,
    pub direction: Direction,
}

impl Action {
    pub fn new(attribute: Attribute, direction: Direction) -> Self {
        Action {
            attribute,
            direction,
        }
    }

    /// Column index in the Q-table: `2 * attribute + (0 for +1, 1 for -1)`.
    pub fn index(self) -> usize {
        self.attribute.index() * 2
            + match self.direction {
                Direction::Increase => 0,
                Direction::Decrease => 1,
            }
    }

    pub fn from_index(i: usize) -> Result<Action, ContentError> {
        let attribute = Attribute::from_index(i / 2).ok_or(ContentError::ActionIndexOutOfRange(i))?;
        let direction = if i % 2 == 0 {
            Direction::Increase
        } else {
            Direction::Decrease
        };
        Ok(Action::new(attribute, direction))
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..ACTION_COUNT).map(|i| Action::from_index(i).expect("index in range"))
    }

    /// Label such as `largeness+` or `color-`.
    pub fn label(self) -> String {
        format!(
            "{}{}",
            self.attribute.name(),
            match self.direction {
                Direction::Increase => '+',
                Direction::Decrease => '-',
            }
        )
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Action {
    type Err = ContentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ContentError::Parse(s.to_string());
        let (name, direction) = if let Some(n) = s.strip_suffix('+') {
            (n, Direction::Increase)
        } else if let Some(n) = s.strip_suffix('-') {
            (n, Direction::Decrease)
        } else {
            return Err(err());
        };
        Ok(Action::new(name.parse().map_err(|_| err())?, direction))
    }
}
