//! Post-hoc analyses over session traces: per-segment error, paired
//! signed-rank comparison, SCR contrasts and spider clustering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::agents::MethodTag;
use crate::content::SpiderConfig;
use crate::rng::{stream, SimRng};
use crate::session::{PhaseKind, SessionTrace, StepRecord};
use crate::signals::{scr_features, EdaTrace, ScrFeatures};

/// Largest sample size for which the signed-rank null is enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("phase {phase} segment {segment} not present in trace")]
    MissingSegment { phase: usize, segment: usize },
    #[error("all differences are zero")]
    DegenerateSample,
    #[error("no pairs")]
    NoPairs,
    #[error("k={k} exceeds the {n} available points")]
    TooManyClusters { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("empty k range")]
    EmptyRange,
    #[error("trace has no anxious steps")]
    NoAnxiousSteps,
    #[error("points must all have the same dimension")]
    RaggedPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Low,
    High,
}

impl SegmentKind {
    pub fn of_target(target: u8) -> Self {
        if target >= 5 {
            SegmentKind::High
        } else {
            SegmentKind::Low
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::Low => "low",
            SegmentKind::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub method: MethodTag,
    pub phase: usize,
    pub segment: usize,
    pub kind: SegmentKind,
    pub target: u8,
    pub steps: usize,
    pub mse: f64,
    pub mean_estimate: f64,
    pub scr: ScrFeatures,
}

/// Mean of `(estimate - desired)^2`.
pub fn mse(steps: &[StepRecord]) -> Option<f64> {
    if steps.is_empty() {
        return None;
    }
    let sum: f64 = steps
        .iter()
        .map(|s| {
            let d = s.estimate.as_f64() - s.desired.as_f64();
            d * d
        })
        .sum();
    Some(sum / steps.len() as f64)
}

pub fn segment_mse(trace: &SessionTrace, phase: usize, segment: usize) -> Result<f64, AnalysisError> {
    let steps: Vec<StepRecord> = trace
        .steps
        .iter()
        .filter(|s| s.phase == phase && s.segment == segment)
        .copied()
        .collect();
    mse(&steps).ok_or(AnalysisError::MissingSegment { phase, segment })
}

/// One summary per (anxious phase, segment) that has steps.
pub fn segment_summaries(trace: &SessionTrace) -> Vec<SegmentSummary> {
    let min_amp = trace.meta.params.signals.min_amplitude;
    let interval = trace.meta.params.step_interval_s;
    let mut groups: BTreeMap<(usize, usize), Vec<StepRecord>> = BTreeMap::new();
    for s in &trace.steps {
        groups.entry((s.phase, s.segment)).or_default().push(*s);
    }
    groups
        .into_iter()
        .map(|((phase, segment), steps)| {
            let n = steps.len() as f64;
            let target = steps[0].desired.get();
            let target = trace
                .meta
                .plan
                .phases
                .get(phase)
                .and_then(|p| p.schedule.as_ref())
                .and_then(|s| s.segments().get(segment))
                .map_or(target, |seg| seg.target.get());
            // Majority method; a mid-segment switch is attributed to the
            // adapter that made most of the decisions.
            let rl = steps.iter().filter(|s| s.method == MethodTag::Rl).count();
            let method = if 2 * rl >= steps.len() {
                MethodTag::Rl
            } else {
                MethodTag::Rules
            };
            let start = steps[0].t - interval;
            let end = steps[steps.len() - 1].t;
            let scr = EdaTrace::new(trace.eda.window(start, end).to_vec())
                .ok()
                .and_then(|w| scr_features(&w, min_amp).ok())
                .unwrap_or_default();
            SegmentSummary {
                method,
                phase,
                segment,
                kind: SegmentKind::of_target(target),
                target,
                steps: steps.len(),
                mse: mse(&steps).unwrap_or(0.0),
                mean_estimate: steps.iter().map(|s| s.estimate.as_f64()).sum::<f64>() / n,
                scr,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub p_two_sided: f64,
    /// Alternative: `x` tends to be smaller than `y`.
    pub p_less: f64,
    /// Alternative: `x` tends to be larger than `y`.
    pub p_greater: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, ties sharing the mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult, AnalysisError> {
    wilcoxon_signed_rank_with(pairs, WilcoxonMethod::Auto)
}

/// Signed-rank test on `x - y`. Zero differences are dropped.
pub fn wilcoxon_signed_rank_with(
    pairs: &[(f64, f64)],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::NoPairs);
    }
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(AnalysisError::DegenerateSample);
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let exact = match method {
        WilcoxonMethod::Auto => n <= WILCOXON_EXACT_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let (p_less, p_greater) = if exact {
        exact_tails(&ranks, w_plus)
    } else {
        normal_tails(&ranks, w_plus)
    };
    Ok(WilcoxonResult {
        w: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n_effective: n,
        p_two_sided: (2.0 * p_less.min(p_greater)).min(1.0),
        p_less,
        p_greater,
        exact,
    })
}

/// Exact null distribution of W+ over all sign patterns. Midranks are
/// multiples of 1/2, so the subset-sum runs on doubled ranks.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    let obs = (w_plus * 2.0).round() as usize;
    let le: f64 = counts[..=obs].iter().sum();
    let ge: f64 = counts[obs..].iter().sum();
    (le / patterns, ge / patterns)
}

/// Normal approximation with tie-corrected variance and continuity
/// correction.
fn normal_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return (1.0, 1.0);
    }
    let normal = Normal::standard();
    let sd = var.sqrt();
    let p_less = normal.cdf((w_plus - mean + 0.5) / sd).min(1.0);
    let p_greater = (1.0 - normal.cdf((w_plus - mean - 0.5) / sd)).min(1.0);
    (p_less, p_greater)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl ClusterModel {
    /// Index of the centroid nearest to `point`; ties go to the lower index.
    pub fn nearest(&self, point: &[f64]) -> usize {
        nearest(&self.centroids, point).0
    }

    pub fn assign_config(&self, config: &SpiderConfig) -> usize {
        self.nearest(&config.normalized_vector())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<(), AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::ZeroClusters);
    }
    if k > points.len() {
        return Err(AnalysisError::TooManyClusters { k, n: points.len() });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(AnalysisError::RaggedPoints);
    }
    Ok(())
}

/// k-means++ seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's iteration from the given centroids. Returns the model and the
/// inertia after each assignment pass.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> (ClusterModel, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        // Running means keep identical members' centroid bit-exact.
        let mut means = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            let n = counts[c] as f64;
            for (m, x) in means[c].iter_mut().zip(p) {
                *m += (x - *m) / n;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = std::mem::take(&mut means[c]);
            }
        }
        // Re-seed empty clusters from the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assignments[b]]))
                    });
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    counts[c] = 1;
                    centroids[c] = points[i].clone();
                    assignments[i] = c;
                }
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    (
        ClusterModel {
            k,
            centroids,
            assignments,
            inertia,
        },
        history,
    )
}

/// Number of k-means++ restarts; the lowest-inertia run wins.
pub const KMEANS_RESTARTS: usize = 10;

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel, AnalysisError> {
    check_points(points, k)?;
    let mut best: Option<ClusterModel> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = stream(seed, "kmeans", (k * KMEANS_RESTARTS + restart) as u64);
        let init = seed_centroids(points, k, &mut rng);
        let (model, _) = lloyd(points, init, max_iter);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub k: usize,
    pub inertias: Vec<(usize, f64)>,
}

/// Picks the k whose point on the inertia curve lies farthest from the
/// chord joining the curve's endpoints. Both axes are scaled to [0, 1];
/// ties go to the smaller k.
pub fn elbow_from_curve(curve: &[(usize, f64)]) -> Result<usize, AnalysisError> {
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(AnalysisError::EmptyRange),
    };
    if curve.len() < 3 {
        return Ok(first.0);
    }
    let (ymin, ymax) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| (lo.min(*y), hi.max(*y)));
    let xs = (last.0 - first.0) as f64;
    let ys = if ymax > ymin { ymax - ymin } else { 1.0 };
    let norm = |(k, y): (usize, f64)| ((k - first.0) as f64 / xs, (y - ymin) / ys);
    let (x0, y0) = norm(first);
    let (x1, y1) = norm(last);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len = (dx * dx + dy * dy).sqrt();
    let mut best = (first.0, -1.0);
    for &pt in curve {
        let (x, y) = norm(pt);
        let d = ((x - x0) * dy - (y - y0) * dx).abs() / len;
        if d > best.1 + 1e-12 {
            best = (pt.0, d);
        }
    }
    Ok(best.0)
}

pub fn elbow_k(
    points: &[Vec<f64>],
    k_range: RangeInclusive<usize>,
    seed: u64,
    max_iter: usize,
) -> Result<ElbowResult, AnalysisError> {
    if k_range.is_empty() {
        return Err(AnalysisError::EmptyRange);
    }
    let mut inertias = Vec::new();
    for k in k_range {
        inertias.push((k, kmeans(points, k, seed, max_iter)?.inertia));
    }
    Ok(ElbowResult {
        k: elbow_from_curve(&inertias)?,
        inertias,
    })
}

/// Config at the step with the highest estimate; ties go to the earliest.
pub fn max_anxiety_spider(trace: &SessionTrace) -> Result<SpiderConfig, AnalysisError> {
    let mut best: Option<&StepRecord> = None;
    for s in anxious_steps(trace) {
        if best.is_none_or(|b| s.estimate > b.estimate) {
            best = Some(s);
        }
    }
    best.map(|s| s.config).ok_or(AnalysisError::NoAnxiousSteps)
}

fn anxious_steps(trace: &SessionTrace) -> impl Iterator<Item = &StepRecord> {
    trace.steps.iter().filter(move |s| {
        trace
            .meta
            .plan
            .phases
            .get(s.phase)
            .is_some_and(|p| p.kind == PhaseKind::Anxious)
    })
}

/// Entry (i, j): mean over participants in cluster i of their highest
/// estimate while shown a spider from cluster j. `None` where no
/// participant in cluster i saw a cluster-j spider.
pub fn cross_cluster_matrix(participants: &[&SessionTrace], model: &ClusterModel) -> Vec<Vec<Option<f64>>> {
    let k = model.k;
    let mut sums = vec![vec![(0.0, 0usize); k]; k];
    for (p, trace) in participants.iter().enumerate() {
        let Some(&row) = model.assignments.get(p) else {
            continue;
        };
        let mut best: Vec<Option<u8>> = vec![None; k];
        for s in anxious_steps(trace) {
            let j = model.assign_config(&s.config);
            best[j] = Some(best[j].map_or(s.estimate.get(), |b| b.max(s.estimate.get())));
        }
        for (j, b) in best.into_iter().enumerate() {
            if let Some(v) = b {
                sums[row][j].0 += v as f64;
                sums[row][j].1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(s, n)| if n > 0 { Some(s / n as f64) } else { None })
                .collect()
        })
        .collect()
}

/// Rows whose diagonal is the maximum of the non-missing entries. A
/// missing diagonal never counts.
pub fn diagonal_dominant_rows(matrix: &[Vec<Option<f64>>]) -> usize {
    matrix
        .iter()
        .enumerate()
        .filter(|(i, row)| match row.get(*i).copied().flatten() {
            Some(d) => row.iter().flatten().all(|v| *v <= d),
            None => false,
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub kind: SegmentKind,
    pub metric: String,
    pub rl_mean: f64,
    pub rules_mean: f64,
    pub pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wilcoxon: Option<WilcoxonResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantCluster {
    pub label: String,
    pub max_spider: SpiderConfig,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub elbow: ElbowResult,
    pub model: ClusterModel,
    pub participants: Vec<ParticipantCluster>,
    pub matrix: Vec<Vec<Option<f64>>>,
    pub diagonal_dominant_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub label: String,
    pub outcome: Option<crate::session::Outcome>,
    pub segments: Vec<SegmentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub participants: Vec<ParticipantSummary>,
    pub comparisons: Vec<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringReport>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportParams {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            k_min: 1,
            k_max: 12,
            seed: 0,
            max_iter: 100,
        }
    }
}

type Metric = (&'static str, fn(&SegmentSummary) -> f64);

const METRICS: [Metric; 4] = [
    ("mse", |s| s.mse),
    ("scr_count", |s| s.scr.peak_count as f64),
    ("scr_mean_amplitude", |s| s.scr.mean_amplitude),
    ("scr_sum_amplitude", |s| s.scr.sum_amplitude),
];

/// Per-method mean of each segment's metric within one participant.
fn participant_means(segments: &[SegmentSummary], kind: SegmentKind, f: fn(&SegmentSummary) -> f64) -> Option<(f64, f64)> {
    let mean = |m: MethodTag| {
        let v: Vec<f64> = segments.iter().filter(|s| s.kind == kind && s.method == m).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some((mean(MethodTag::Rl)?, mean(MethodTag::Rules)?))
}

pub fn build_report(traces: &[(String, SessionTrace)], params: &ReportParams) -> Report {
    let mut notices = Vec::new();
    let participants: Vec<ParticipantSummary> = traces
        .iter()
        .map(|(label, t)| ParticipantSummary {
            label: label.clone(),
            outcome: t.outcome(),
            segments: segment_summaries(t),
        })
        .collect();

    let mut comparisons = Vec::new();
    for kind in [SegmentKind::Low, SegmentKind::High] {
        for (name, f) in METRICS {
            let pairs: Vec<(f64, f64)> = participants
                .iter()
                .filter_map(|p| participant_means(&p.segments, kind, f))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let n = pairs.len() as f64;
            let (wilcoxon, notice) = match wilcoxon_signed_rank(&pairs) {
                Ok(w) => (Some(w), None),
                Err(e) => (None, Some(e.to_string())),
            };
            comparisons.push(Comparison {
                kind,
                metric: name.to_string(),
                rl_mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
                rules_mean: pairs.iter().map(|p| p.1).sum::<f64>() / n,
                pairs: pairs.len(),
                wilcoxon,
                notice,
            });
        }
    }
    if comparisons.is_empty() {
        notices.push("no participant ran both methods; paired comparisons skipped".to_string());
    }

    let clustering = cluster_participants(traces, params, &mut notices);
    Report {
        version: 1,
        participants,
        comparisons,
        clustering,
        notices,
    }
}

fn cluster_participants(
    traces: &[(String, SessionTrace)],
    params: &ReportParams,
    notices: &mut Vec<String>,
) -> Option<ClusteringReport> {
    let mut used = Vec::new();
    let mut spiders = Vec::new();
    for (label, t) in traces {
        if let Ok(c) = max_anxiety_spider(t) {
            used.push((label.clone(), t));
            spiders.push(c);
        }
    }
    let k_max = params.k_max.min(spiders.len());
    if spiders.len() < 2 || k_max < params.k_min.max(1) {
        notices.push(format!(
            "clustering skipped: {} participant(s) with anxious steps",
            spiders.len()
        ));
        return None;
    }
    if k_max < params.k_max {
        notices.push(format!("k range capped at {k_max} by the number of participants"));
    }
    let points: Vec<Vec<f64>> = spiders.iter().map(|c| c.normalized_vector().to_vec()).collect();
    let elbow = elbow_k(&points, params.k_min.max(1)..=k_max, params.seed, params.max_iter).ok()?;
    let model = kmeans(&points, elbow.k, params.seed, params.max_iter).ok()?;
    let refs: Vec<&SessionTrace> = used.iter().map(|(_, t)| *t).collect();
    let matrix = cross_cluster_matrix(&refs, &model);
    let participants = used
        .iter()
        .zip(&spiders)
        .zip(&model.assignments)
        .map(|(((label, _), spider), cluster)| ParticipantCluster {
            label: label.clone(),
            max_spider: *spider,
            cluster: *cluster,
        })
        .collect();
    Some(ClusteringReport {
        diagonal_dominant_rows: diagonal_dominant_rows(&matrix),
        elbow,
        model,
        participants,
        matrix,
    })
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Session analysis\n\n");
        let _ = writeln!(out, "Participants: {}\n", self.participants.len());
        if !self.comparisons.is_empty() {
            out.push_str("## Method comparison\n\n");
            out.push_str("| segment | metric | pairs | RL mean | rules mean | W | n | p (two-sided) | p (RL < rules) |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|\n");
            for c in &self.comparisons {
                let (w, n, p2, pl) = match &c.wilcoxon {
                    Some(w) => (
                        format!("{:.1}", w.w),
                        w.n_effective.to_string(),
                        format!("{:.4}", w.p_two_sided),
                        format!("{:.4}", w.p_less),
                    ),
                    None => ("-".into(), "0".into(), "-".into(), "-".into()),
                };
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {:.3} | {:.3} | {} | {} | {} | {} |",
                    c.kind.as_str(),
                    c.metric,
                    c.pairs,
                    c.rl_mean,
                    c.rules_mean,
                    w,
                    n,
                    p2,
                    pl
                );
            }
            out.push('\n');
        }
        out.push_str("## Segments\n\n| participant | phase | segment | method | target | steps | MSE | mean estimate | SCR peaks |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for p in &self.participants {
            for s in &p.segments {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {:.3} | {:.2} | {} |",
                    p.label,
                    s.phase,
                    s.kind.as_str(),
                    s.method,
                    s.target,
                    s.steps,
                    s.mse,
                    s.mean_estimate,
                    s.scr.peak_count
                );
            }
        }
        out.push('\n');
        if let Some(c) = &self.clustering {
            let _ = writeln!(out, "## Spider clusters\n\nElbow k = {} (inertia by k: {}).\n",
                c.elbow.k,
                c.elbow
                    .inertias
                    .iter()
                    .map(|(k, i)| format!("{k}: {i:.3}"))
                    .collect::<Vec<_>>()
                    .join(", "));
            out.push_str("Maximum estimate by participant cluster (rows) and spider cluster (columns):\n\n|   |");
            for j in 0..c.model.k {
                let _ = write!(out, " C{j} |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(c.model.k));
            out.push('\n');
            for (i, row) in c.matrix.iter().enumerate() {
                let _ = write!(out, "| C{i} |");
                for v in row {
                    match v {
                        Some(v) => {
                            let _ = write!(out, " {v:.2} |");
                        }
                        None => out.push_str(" N/A |"),
                    }
                }
                out.push('\n');
            }
            let _ = writeln!(
                out,
                "\nDiagonal-dominant rows: {} of {}.\n",
                c.diagonal_dominant_rows, c.model.k
            );
        }
        for n in &self.notices {
            let _ = writeln!(out, "Note: {n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::AnxietyLevel;
    use crate::session::{SessionMeta, SessionParams, SessionPlan, SourceInfo};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    /// Enumerates every sign pattern directly.
    fn brute_force(pairs: &[(f64, f64)]) -> (f64, f64) {
        let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let obs: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let n = diffs.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= obs + 1e-9 {
                le += 1;
            }
            if w >= obs - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (le as f64 / total, ge as f64 / total)
    }

    fn step(phase: usize, segment: usize, est: i64, des: i64, config: SpiderConfig) -> StepRecord {
        StepRecord {
            t: 0.0,
            phase,
            segment,
            config,
            estimate: AnxietyLevel::new(est).unwrap(),
            desired: AnxietyLevel::new(des).unwrap(),
            reward: 0.0,
            action: None,
            method: MethodTag::Rl,
            terminal: false,
        }
    }

    fn trace_with(steps: Vec<StepRecord>) -> SessionTrace {
        SessionTrace {
            meta: SessionMeta {
                version: 1,
                seed: 0,
                plan: SessionPlan::single(MethodTag::Rl),
                params: SessionParams::default(),
                source: SourceInfo::Manual,
                outcome: None,
                phases: Vec::new(),
            },
            steps,
            eda: EdaTrace::default(),
            suds: Vec::new(),
        }
    }

    fn cfg(i: usize) -> SpiderConfig {
        crate::content::decode_state(i).unwrap()
    }

    #[test]
    fn mse_examples() {
        let c = SpiderConfig::MIN;
        let t = trace_with(vec![step(1, 1, 3, 7, c), step(1, 1, 5, 7, c), step(1, 1, 7, 7, c)]);
        assert!((segment_mse(&t, 1, 1).unwrap() - 20.0 / 3.0).abs() < 1e-12);
        let t = trace_with((0..5).map(|_| step(1, 0, 5, 3, c)).collect());
        assert_eq!(segment_mse(&t, 1, 0).unwrap(), 4.0);
        let t = trace_with((0..5).map(|_| step(1, 0, 3, 3, c)).collect());
        assert_eq!(segment_mse(&t, 1, 0).unwrap(), 0.0);
        assert!(matches!(segment_mse(&t, 1, 1), Err(AnalysisError::MissingSegment { .. })));
    }

    #[test]
    fn wilcoxon_examples() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.w_plus, 0.0);
        assert_eq!(r.w, 0.0);
        assert_eq!(r.n_effective, 5);
        assert_eq!(r.p_less, 0.03125);
        assert_eq!(r.p_two_sided, 0.0625);
        assert_eq!(brute_force(&pairs).0, 0.03125);
        assert!(r.exact);

        let sym = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(sym.w_plus, sym.w_minus);
        assert_eq!(sym.p_two_sided, 1.0);

        let with_zero = wilcoxon_signed_rank(&[(1.0, 1.0), (1.0, 2.0), (3.0, 5.0)]).unwrap();
        assert_eq!(with_zero.n_effective, 2);

        assert_eq!(wilcoxon_signed_rank(&[(1.0, 1.0)]), Err(AnalysisError::DegenerateSample));
        assert_eq!(wilcoxon_signed_rank(&[]), Err(AnalysisError::NoPairs));
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn exact_matches_normal_for_twelve_pairs() {
        let mut rng = stream(5, "wilcoxon-test", 0);
        for _ in 0..100 {
            let pairs: Vec<(f64, f64)> = (0..12)
                .map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
                .collect();
            let e = wilcoxon_signed_rank_with(&pairs, WilcoxonMethod::Exact).unwrap();
            let n = wilcoxon_signed_rank_with(&pairs, WilcoxonMethod::Normal).unwrap();
            assert!((e.p_two_sided - n.p_two_sided).abs() < 0.05, "{e:?} {n:?}");
        }
    }

    proptest! {
        #[test]
        fn exact_agrees_with_brute_force(
            diffs in prop::collection::vec(-4i32..=4, 1..12)
        ) {
            let pairs: Vec<(f64, f64)> = diffs.iter().map(|d| (*d as f64, 0.0)).collect();
            prop_assume!(diffs.iter().any(|d| *d != 0));
            let r = wilcoxon_signed_rank(&pairs).unwrap();
            let (le, ge) = brute_force(&pairs);
            prop_assert!((r.p_less - le).abs() < 1e-12);
            prop_assert!((r.p_greater - ge).abs() < 1e-12);
            prop_assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
            prop_assert_eq!(r.w_plus + r.w_minus, (r.n_effective * (r.n_effective + 1)) as f64 / 2.0);
        }

        #[test]
        fn mse_ignores_order(values in prop::collection::vec(0i64..=10, 1..30), seed in 0u64..1000) {
            let steps: Vec<StepRecord> =
                values.iter().map(|v| step(1, 0, *v, 7, SpiderConfig::MIN)).collect();
            let mut shuffled = steps.clone();
            shuffled.shuffle(&mut stream(seed, "shuffle", 0));
            let a = mse(&steps).unwrap();
            let b = mse(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn lloyd_inertia_never_increases(seed in 0u64..200, k in 1usize..6) {
            let mut rng = stream(seed, "lloyd", 0);
            let points: Vec<Vec<f64>> =
                (0..30).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
            let init = seed_centroids(&points, k, &mut rng);
            let (model, history) = lloyd(&points, init, 100);
            for w in history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(model.assignments.iter().all(|a| *a < k));
        }

        #[test]
        fn elbow_stays_in_range(seed in 0u64..50, lo in 1usize..4, span in 0usize..5) {
            let mut rng = stream(seed, "elbow", 0);
            let points: Vec<Vec<f64>> =
                (0..12).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
            let r = elbow_k(&points, lo..=lo + span, seed, 50).unwrap();
            prop_assert!(r.k >= lo && r.k <= lo + span);
        }
    }

    /// Eight groups at the codewords of a punctured simplex code (pairwise
    /// Hamming distance 3 or 4), jitter at most 0.05.
    fn planted(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let columns = [1u32, 2, 3, 4, 5, 6];
        let centers: Vec<Vec<f64>> = (0..8u32)
            .map(|g| {
                columns
                    .iter()
                    .map(|c| if (g & c).count_ones() % 2 == 1 { 0.9 } else { 0.1 })
                    .collect()
            })
            .collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert!(sq_dist(&centers[a], &centers[b]).sqrt() >= 0.5);
            }
        }
        let mut rng = stream(seed, "planted", 0);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (g, c) in centers.iter().enumerate() {
            for _ in 0..5 {
                let j: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = j.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = rng.random_range(0.0..0.05) / norm;
                points.push(c.iter().zip(&j).map(|(x, e)| x + e * scale).collect());
                labels.push(g);
            }
        }
        (points, labels)
    }

    #[test]
    fn kmeans_planted_purity() {
        for seed in 0..5 {
            let (points, labels) = planted(seed);
            let model = kmeans(&points, 8, seed, 100).unwrap();
            for g in 0..8 {
                let clusters: Vec<usize> = (0..points.len())
                    .filter(|i| labels[*i] == g)
                    .map(|i| model.assignments[i])
                    .collect();
                assert!(clusters.iter().all(|c| *c == clusters[0]));
            }
            let mut distinct: Vec<usize> = model.assignments.clone();
            distinct.sort();
            distinct.dedup();
            assert_eq!(distinct.len(), 8);
        }
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let a = vec![0.2, 0.0, 1.0, 0.5, 0.0, 0.5];
        let b = vec![1.0, 1.0, 0.0, 0.5, 1.0, 0.0];
        let points = vec![a.clone(), a.clone(), a.clone(), b.clone(), b.clone()];
        let model = kmeans(&points, 2, 1, 100).unwrap();
        let mut centroids = model.centroids.clone();
        centroids.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(centroids, vec![a, b]);
        assert_eq!(model.inertia, 0.0);

        let (points, _) = planted(9);
        let all = kmeans(&points, points.len(), 2, 100).unwrap();
        assert!(all.inertia < 1e-24);
        let mut seen = all.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), points.len());

        assert!(matches!(kmeans(&points, points.len() + 1, 0, 10), Err(AnalysisError::TooManyClusters { .. })));
        assert!(matches!(kmeans(&points, 0, 0, 10), Err(AnalysisError::ZeroClusters)));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (points, _) = planted(3);
        assert_eq!(kmeans(&points, 5, 7, 100).unwrap(), kmeans(&points, 5, 7, 100).unwrap());
    }

    #[test]
    fn elbow_examples() {
        let (points, _) = planted(1);
        assert_eq!(elbow_k(&points, 1..=12, 4, 100).unwrap().k, 8);

        let mut rng = stream(2, "blob", 0);
        let blob: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| 0.5 + rng.random_range(-0.02..0.02)).collect())
            .collect();
        assert!(elbow_k(&blob, 1..=6, 4, 100).unwrap().k <= 2);

        assert_eq!(elbow_k(&points, 5..=5, 0, 100).unwrap().k, 5);
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert_eq!(elbow_k(&points, empty, 0, 100), Err(AnalysisError::EmptyRange));
    }

    #[test]
    fn max_spider_examples() {
        let up = trace_with((0..5).map(|i| step(1, 0, i, 3, cfg(i as usize))).collect());
        assert_eq!(max_anxiety_spider(&up).unwrap(), cfg(4));
        let flat = trace_with((0..5).map(|i| step(1, 0, 4, 3, cfg(i))).collect());
        assert_eq!(max_anxiety_spider(&flat).unwrap(), cfg(0));
        let mid = trace_with(vec![step(1, 0, 2, 3, cfg(10)), step(1, 0, 9, 3, cfg(11)), step(1, 0, 5, 3, cfg(12))]);
        assert_eq!(max_anxiety_spider(&mid).unwrap(), cfg(11));
        assert_eq!(max_anxiety_spider(&trace_with(vec![])), Err(AnalysisError::NoAnxiousSteps));
    }

    #[test]
    fn cross_matrix_examples() {
        let t = trace_with(vec![step(1, 0, 6, 3, cfg(0)), step(1, 0, 8, 3, cfg(1))]);
        let model = ClusterModel {
            k: 1,
            centroids: vec![cfg(0).normalized_vector().to_vec()],
            assignments: vec![0],
            inertia: 0.0,
        };
        assert_eq!(cross_cluster_matrix(&[&t], &model), vec![vec![Some(8.0)]]);

        let model = ClusterModel {
            k: 2,
            centroids: vec![SpiderConfig::MIN.normalized_vector().to_vec(), SpiderConfig::MAX.normalized_vector().to_vec()],
            assignments: vec![0, 0],
            inertia: 0.0,
        };
        let t2 = trace_with(vec![step(1, 0, 4, 3, SpiderConfig::MIN), step(1, 0, 2, 3, SpiderConfig::MAX)]);
        let m = cross_cluster_matrix(&[&t, &t2], &model);
        assert_eq!(m[0][0], Some(6.0));
        assert_eq!(m[0][1], Some(2.0));
        assert_eq!(m[1], vec![None, None]);
        assert_eq!(diagonal_dominant_rows(&m), 1);
    }

    #[test]
    fn report_skips_clustering_for_one_trace() {
        let t = trace_with(vec![step(1, 0, 3, 3, cfg(0))]);
        let report = build_report(&[("solo".into(), t)], &ReportParams::default());
        assert!(report.clustering.is_none());
        assert!(report.notices.iter().any(|n| n.contains("clustering skipped")));
        assert_eq!(report.participants[0].segments.len(), 1);
        assert!(report.to_markdown().contains("clustering skipped"));
    }
}
