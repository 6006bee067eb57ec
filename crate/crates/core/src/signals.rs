//! Skin-conductance processing: calibration, tonic level to anxiety level,
//! SCR peak detection and the trace CSV format.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::AnxietyLevel;

/// Resolution of the trace CSV format, µS.
pub const CSV_RESOLUTION_US: f64 = 1e-4;

/// Rounds a conductance onto the CSV grid so that write/read is lossless.
pub fn quantize_us(value: f64) -> f64 {
    (value * 10_000.0).round() / 10_000.0
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("trace covers {duration:.3}s, need at least {required}s")]
    TraceTooShort { duration: f64, required: f64 },
    #[error("empty window")]
    EmptyWindow,
    #[error("sampling rate {rate_hz:.2} Hz below the 4 Hz minimum")]
    RateTooLow { rate_hz: f64 },
    #[error("irregular sampling at sample {index}: interval {interval:.4}s vs nominal {nominal:.4}s")]
    IrregularSampling {
        index: usize,
        interval: f64,
        nominal: f64,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sample {index}: {message}")]
    InvalidSample { index: usize, message: String },
    #[error("calibration span must be positive, got {0}")]
    InvalidSpan(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdaSample {
    /// Seconds.
    pub t: f64,
    /// Microsiemens.
    pub conductance: f64,
}

impl EdaSample {
    pub fn new(t: f64, conductance: f64) -> Self {
        EdaSample { t, conductance }
    }
}

/// Samples with strictly increasing timestamps and non-negative conductance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<EdaSample>", into = "Vec<EdaSample>")]
pub struct EdaTrace {
    samples: Vec<EdaSample>,
}

impl EdaTrace {
    pub fn new(samples: Vec<EdaSample>) -> Result<Self, SignalError> {
        for (index, s) in samples.iter().enumerate() {
            check_sample(index, samples.get(index.wrapping_sub(1)), s)?;
        }
        Ok(EdaTrace { samples })
    }

    pub fn push(&mut self, sample: EdaSample) -> Result<(), SignalError> {
        check_sample(self.samples.len(), self.samples.last(), &sample)?;
        self.samples.push(sample);
        Ok(())
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = EdaSample>) -> Result<(), SignalError> {
        for s in samples {
            self.push(s)?;
        }
        Ok(())
    }

    pub fn samples(&self) -> &[EdaSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last_t(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    /// Samples with `start < t <= end`.
    pub fn window(&self, start: f64, end: f64) -> &[EdaSample] {
        let lo = self.samples.partition_point(|s| s.t <= start);
        let hi = self.samples.partition_point(|s| s.t <= end);
        &self.samples[lo..hi.max(lo)]
    }

    pub fn conductances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.conductance).collect()
    }

    /// Median sampling interval, if there are at least two samples.
    pub fn nominal_interval(&self) -> Option<f64> {
        median_interval(&self.samples)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<(), SignalError> {
        writer.write_all(b"t_s,eda_us\n")?;
        for s in &self.samples {
            writeln!(writer, "{:.4},{:.4}", s.t, s.conductance)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SignalError> {
        let mut lines = BufReader::new(reader).lines();
        match lines.next().transpose()? {
            Some(header) if header.trim_end_matches('\r') == "t_s,eda_us" => {}
            Some(_) => {
                return Err(SignalError::Malformed {
                    line: 1,
                    message: "expected header t_s,eda_us".into(),
                })
            }
            None => {
                return Err(SignalError::Malformed {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        }
        let mut trace = EdaTrace::default();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let malformed = |message: String| SignalError::Malformed {
                line: line_no,
                message,
            };
            let (t, c) = line
                .split_once(',')
                .ok_or_else(|| malformed("expected two fields".into()))?;
            let t: f64 = t.trim().parse().map_err(|_| malformed(format!("bad time {t:?}")))?;
            let c: f64 = c
                .trim()
                .parse()
                .map_err(|_| malformed(format!("bad conductance {c:?}")))?;
            trace
                .push(EdaSample::new(t, c))
                .map_err(|e| match e {
                    SignalError::InvalidSample { message, .. } => malformed(message),
                    other => other,
                })?;
        }
        Ok(trace)
    }
}

fn check_sample(index: usize, prev: Option<&EdaSample>, s: &EdaSample) -> Result<(), SignalError> {
    let invalid = |message: String| SignalError::InvalidSample { index, message };
    if !s.t.is_finite() || !s.conductance.is_finite() {
        return Err(invalid("non-finite value".into()));
    }
    if s.conductance < 0.0 {
        return Err(invalid(format!("negative conductance {}", s.conductance)));
    }
    if let Some(p) = prev {
        if s.t <= p.t {
            return Err(invalid(format!("timestamp {} not after {}", s.t, p.t)));
        }
    }
    Ok(())
}

impl TryFrom<Vec<EdaSample>> for EdaTrace {
    type Error = SignalError;

    fn try_from(value: Vec<EdaSample>) -> Result<Self, Self::Error> {
        EdaTrace::new(value)
    }
}

impl From<EdaTrace> for Vec<EdaSample> {
    fn from(value: EdaTrace) -> Self {
        value.samples
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<EdaTrace, SignalError> {
    EdaTrace::read_csv(fs::File::open(path)?)
}

pub fn write_trace(path: impl AsRef<Path>, trace: &EdaTrace) -> Result<(), SignalError> {
    let mut buf = Vec::with_capacity(trace.len() * 16 + 16);
    trace.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn median_interval(samples: &[EdaSample]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    dts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Some(dts[dts.len() / 2])
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalParams {
    /// Smallest trough-to-peak rise counted as an SCR, µS.
    pub min_amplitude: f64,
    /// Floor on the calibrated dynamic range, µS.
    pub min_span: f64,
    /// Observed relax-trace range is scaled by this to propose a span.
    pub span_multiplier: f64,
    /// Trailing window used for each tonic estimate, seconds.
    pub tonic_window_s: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        SignalParams {
            min_amplitude: 0.05,
            min_span: 4.0,
            span_multiplier: 2.0,
            tonic_window_s: 4.0,
        }
    }
}

/// Relaxed tonic level and the conductance range mapped onto 0..=10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub baseline: f64,
    pub span: f64,
}

impl Calibration {
    pub fn new(baseline: f64, span: f64) -> Result<Self, SignalError> {
        if !(span.is_finite() && span > 0.0) {
            return Err(SignalError::InvalidSpan(span));
        }
        Ok(Calibration { baseline, span })
    }
}

const CALIBRATION_TAIL_S: f64 = 60.0;

/// Baseline from the final 60 s of a relax trace; span from the configured
/// floor or the scaled observed range, whichever is larger.
pub fn calibrate(relax: &EdaTrace, params: &SignalParams) -> Result<Calibration, SignalError> {
    let samples = relax.samples();
    let duration = match (samples.first(), samples.last(), relax.nominal_interval()) {
        (Some(first), Some(last), Some(dt)) => last.t - first.t + dt,
        _ => 0.0,
    };
    if duration + 1e-9 < CALIBRATION_TAIL_S {
        return Err(SignalError::TraceTooShort {
            duration,
            required: CALIBRATION_TAIL_S,
        });
    }
    let end = samples.last().expect("non-empty").t;
    let tail = relax.window(end - CALIBRATION_TAIL_S, end);
    let baseline = mean(tail.iter().map(|s| s.conductance)).expect("non-empty tail");
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.conductance), hi.max(s.conductance))
    });
    let span = params.min_span.max((hi - lo) * params.span_multiplier);
    Calibration::new(baseline, span)
}

/// Maps the window's mean conductance onto 0..=10. A tonic value above the
/// mapped range widens the span so it sits exactly at the top.
pub fn scl_level(window: &[EdaSample], cal: &mut Calibration) -> Result<AnxietyLevel, SignalError> {
    let tonic = mean(window.iter().map(|s| s.conductance)).ok_or(SignalError::EmptyWindow)?;
    if tonic - cal.baseline > cal.span {
        cal.span = tonic - cal.baseline;
    }
    Ok(AnxietyLevel::from_real(10.0 * (tonic - cal.baseline) / cal.span))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrPeak {
    pub onset_t: f64,
    pub peak_t: f64,
    pub amplitude: f64,
}

/// Largest tolerated deviation of any sampling interval from the median.
const SAMPLING_TOLERANCE: f64 = 0.5;

fn check_sampling(samples: &[EdaSample]) -> Result<(), SignalError> {
    let Some(nominal) = median_interval(samples) else {
        return Ok(());
    };
    if 1.0 / nominal < 4.0 - 1e-9 {
        return Err(SignalError::RateTooLow {
            rate_hz: 1.0 / nominal,
        });
    }
    for (i, w) in samples.windows(2).enumerate() {
        let interval = w[1].t - w[0].t;
        if (interval - nominal).abs() > SAMPLING_TOLERANCE * nominal {
            return Err(SignalError::IrregularSampling {
                index: i + 1,
                interval,
                nominal,
            });
        }
    }
    Ok(())
}

/// Trough-to-peak SCR detection with hysteresis.
///
/// A trough is confirmed once the signal climbs `min_amplitude` above it and
/// a peak once the signal falls `min_amplitude` below it. Each peak's
/// amplitude is the rise from its preceding trough, measured on the raw
/// conductance so the slow tonic offset cancels. A rise still in progress at
/// the end of the trace is reported only if its maximum is not the final
/// sample.
pub fn detect_scr_peaks(trace: &EdaTrace, min_amplitude: f64) -> Result<Vec<ScrPeak>, SignalError> {
    let samples = trace.samples();
    check_sampling(samples)?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }

    enum Phase {
        Falling { trough: usize },
        Rising { trough: usize, peak: usize },
    }
    let c = |i: usize| samples[i].conductance;
    let mut phase = Phase::Falling { trough: 0 };
    let mut peaks = Vec::new();
    for i in 1..samples.len() {
        let v = c(i);
        phase = match phase {
            Phase::Falling { trough } => {
                if v < c(trough) {
                    Phase::Falling { trough: i }
                } else if v - c(trough) >= min_amplitude {
                    Phase::Rising { trough, peak: i }
                } else {
                    Phase::Falling { trough }
                }
            }
            Phase::Rising { trough, peak } => {
                if v > c(peak) {
                    Phase::Rising { trough, peak: i }
                } else if c(peak) - v >= min_amplitude {
                    peaks.push(ScrPeak {
                        onset_t: samples[trough].t,
                        peak_t: samples[peak].t,
                        amplitude: c(peak) - c(trough),
                    });
                    Phase::Falling { trough: i }
                } else {
                    Phase::Rising { trough, peak }
                }
            }
        };
    }
    if let Phase::Rising { trough, peak } = phase {
        if peak + 1 < samples.len() {
            peaks.push(ScrPeak {
                onset_t: samples[trough].t,
                peak_t: samples[peak].t,
                amplitude: c(peak) - c(trough),
            });
        }
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScrFeatures {
    pub peak_count: usize,
    pub mean_amplitude: f64,
    pub sum_amplitude: f64,
}

impl ScrFeatures {
    /// `sum_amplitude` is stored as `mean * count` so the identity is exact.
    pub fn from_peaks(peaks: &[ScrPeak]) -> Self {
        if peaks.is_empty() {
            return ScrFeatures::default();
        }
        let count = peaks.len();
        let mean_amplitude = peaks.iter().map(|p| p.amplitude).sum::<f64>() / count as f64;
        ScrFeatures {
            peak_count: count,
            mean_amplitude,
            sum_amplitude: mean_amplitude * count as f64,
        }
    }
}

pub fn scr_features(trace: &EdaTrace, min_amplitude: f64) -> Result<ScrFeatures, SignalError> {
    detect_scr_peaks(trace, min_amplitude).map(|p| ScrFeatures::from_peaks(&p))
}
