//! Discrete anxiety scale, target schedules and the Gaussian-shaped reward.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("anxiety level {0} out of range 0..=10")]
    LevelOutOfRange(i64),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("schedule segment {index} has non-positive duration {duration_s}")]
    InvalidDuration { index: usize, duration_s: f64 },
    #[error("schedule is empty")]
    EmptySchedule,
    #[error("time {t}s outside schedule of length {total}s")]
    OutsideSchedule { t: f64, total: f64 },
}

/// Anxiety on the 0..=10 scale. 10 is the safety-relevant maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize)]
#[serde(transparent)]
pub struct AnxietyLevel(u8);

impl AnxietyLevel {
    pub const MIN: AnxietyLevel = AnxietyLevel(0);
    pub const MAX: AnxietyLevel = AnxietyLevel(10);

    pub fn new(level: i64) -> Result<Self, RewardError> {
        if !(0..=10).contains(&level) {
            return Err(RewardError::LevelOutOfRange(level));
        }
        Ok(AnxietyLevel(level as u8))
    }

    /// Rounds and clamps a real-valued level onto the scale.
    pub fn from_real(value: f64) -> Self {
        if value.is_nan() {
            return AnxietyLevel(0);
        }
        AnxietyLevel(value.round().clamp(0.0, 10.0) as u8)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl<'de> Deserialize<'de> for AnxietyLevel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        AnxietyLevel::new(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for AnxietyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    pub sigma: f64,
}

impl RewardParams {
    pub fn new(sigma: f64) -> Result<Self, RewardError> {
        let params = RewardParams { sigma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(RewardError::InvalidSigma(self.sigma));
        }
        Ok(())
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { sigma: 2.0 }
    }
}

/// Gaussian bump rescaled onto `[-1, 1]`: 1 at the target, tending to -1 far
/// away. `r = 2 exp(-(current - desired)^2 / (2 sigma^2)) - 1`.
pub fn reward(current: AnxietyLevel, desired: AnxietyLevel, params: RewardParams) -> f64 {
    let delta = current.as_f64() - desired.as_f64();
    2.0 * (-(delta * delta) / (2.0 * params.sigma * params.sigma)).exp() - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    pub target: AnxietyLevel,
    pub duration_s: f64,
}

/// Ordered target segments covering one anxious phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleSegment>", into = "Vec<ScheduleSegment>")]
pub struct DesiredSchedule {
    segments: Vec<ScheduleSegment>,
}

impl DesiredSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self, RewardError> {
        if segments.is_empty() {
            return Err(RewardError::EmptySchedule);
        }
        for (index, s) in segments.iter().enumerate() {
            if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
                return Err(RewardError::InvalidDuration {
                    index,
                    duration_s: s.duration_s,
                });
            }
        }
        Ok(DesiredSchedule { segments })
    }

    /// Low target 3 then high target 7, split evenly over `total_s`.
    pub fn low_high(total_s: f64) -> Self {
        DesiredSchedule::new(vec![
            ScheduleSegment {
                target: AnxietyLevel(3),
                duration_s: total_s / 2.0,
            },
            ScheduleSegment {
                target: AnxietyLevel(7),
                duration_s: total_s / 2.0,
            },
        ])
        .expect("positive durations")
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Index of the segment containing `t` (left-closed intervals).
    pub fn segment_index(&self, t: f64) -> Result<usize, RewardError> {
        let total = self.total_duration();
        if !(t >= 0.0 && t < total) {
            return Err(RewardError::OutsideSchedule { t, total });
        }
        let mut start = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if t < start + s.duration_s {
                return Ok(i);
            }
            start += s.duration_s;
        }
        Ok(self.segments.len() - 1)
    }

    pub fn desired_at(&self, t: f64) -> Result<AnxietyLevel, RewardError> {
        self.segment_index(t).map(|i| self.segments[i].target)
    }
}

impl TryFrom<Vec<ScheduleSegment>> for DesiredSchedule {
    type Error = RewardError;

    fn try_from(value: Vec<ScheduleSegment>) -> Result<Self, Self::Error> {
        DesiredSchedule::new(value)
    }
}

impl From<DesiredSchedule> for Vec<ScheduleSegment> {
    fn from(value: DesiredSchedule) -> Self {
        value.segments
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lvl(v: i64) -> AnxietyLevel {
        AnxietyLevel::new(v).unwrap()
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert_eq!(reward(lvl(7), lvl(7), p), 1.0);
        assert!((reward(lvl(3), lvl(7), p) - (-0.729_329_433_5)).abs() < 1e-9);
        assert!((reward(lvl(10), lvl(0), p) - (2.0 * (-12.5f64).exp() - 1.0)).abs() < 1e-15);
        assert!((reward(lvl(10), lvl(0), p) + 0.999_992_5).abs() < 1e-7);
    }

    #[test]
    fn sigma_validation() {
        assert!(RewardParams::new(0.0).is_err());
        assert!(RewardParams::new(-1.0).is_err());
        assert!(RewardParams::new(f64::NAN).is_err());
        assert!(RewardParams::new(0.5).is_ok());
    }

    #[test]
    fn level_validation() {
        assert!(AnxietyLevel::new(11).is_err());
        assert!(AnxietyLevel::new(-1).is_err());
        assert!(serde_json::from_str::<AnxietyLevel>("11").is_err());
        assert_eq!(AnxietyLevel::from_real(4.5).get(), 5);
        assert_eq!(AnxietyLevel::from_real(13.0).get(), 10);
        assert_eq!(AnxietyLevel::from_real(-2.0).get(), 0);
    }

    #[test]
    fn schedule_lookup() {
        let s = DesiredSchedule::low_high(280.0);
        assert_eq!(s.desired_at(0.0).unwrap().get(), 3);
        assert_eq!(s.desired_at(139.9).unwrap().get(), 3);
        assert_eq!(s.desired_at(140.0).unwrap().get(), 7);
        assert_eq!(s.desired_at(279.999).unwrap().get(), 7);
        assert!(s.desired_at(280.0).is_err());
        assert!(s.desired_at(-0.1).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(DesiredSchedule::new(vec![]).is_err());
        let bad = vec![ScheduleSegment {
            target: lvl(3),
            duration_s: 0.0,
        }];
        assert!(DesiredSchedule::new(bad).is_err());
        let json = r#"[{"target":3,"duration_s":140},{"target":7,"duration_s":140}]"#;
        let s: DesiredSchedule = serde_json::from_str(json).unwrap();
        assert_eq!(s, DesiredSchedule::low_high(280.0));
        assert!(serde_json::from_str::<DesiredSchedule>("[]").is_err());
    }

    // Below sigma ~1.3 the far tail rounds to exactly -1.0 in f64.
    proptest! {
        #[test]
        fn reward_shape(a in 0i64..=10, d in 0i64..=10, sigma in 1.5f64..10.0) {
            let p = RewardParams::new(sigma).unwrap();
            let r = reward(lvl(a), lvl(d), p);
            prop_assert!(r > -1.0 && r <= 1.0);
            prop_assert_eq!(r, reward(lvl(d), lvl(a), p));
            prop_assert_eq!(r == 1.0, a == d);
            let best = (0..=10).max_by(|x, y| {
                reward(lvl(*x), lvl(d), p).partial_cmp(&reward(lvl(*y), lvl(d), p)).unwrap()
            });
            prop_assert_eq!(best, Some(d));
        }

        #[test]
        fn reward_strictly_decays(d in 0i64..=10, sigma in 1.5f64..10.0) {
            let p = RewardParams::new(sigma).unwrap();
            let mut by_distance: Vec<(i64, f64)> =
                (0..=10).map(|a| ((a - d).abs(), reward(lvl(a), lvl(d), p))).collect();
            by_distance.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for w in by_distance.windows(2) {
                if w[1].0 > w[0].0 {
                    prop_assert!(w[1].1 < w[0].1);
                } else {
                    prop_assert_eq!(w[1].1, w[0].1);
                }
            }
        }
    }
}
