//! CSV ingestion and exact per-bucket recalibration.
//!
//! Raw scores are grouped into buckets (their own value, a decile column, or
//! custom edges); recalibration replaces each row's score with its (group,
//! bucket) empirical positive rate, so groupwise calibration holds exactly
//! on the loaded data. Calibrated supports then differ across groups, so
//! operations that need a shared support work on the bucket axis with the
//! per-group calibrated values attached ([`BucketView`]).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::LabeledScore;
use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily};
use crate::score::{Score, ScoreGrid};
use crate::thresholding::{
    equalize_ppv_npv_deferring_pmfs, scan_npv_params, scan_ppv_params, DeferringParams,
    DeferringThresholdRule, SearchPmf, SearchPoint, ThresholdError,
    ThresholdRule,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("{count} unparsable row(s), first: {first}")]
    UnparsableRows { count: usize, first: String },
    #[error("row {line}: group value is missing")]
    MissingGroup { line: usize },
    #[error("no rows left after filtering")]
    EmptyAfterFilter,
    #[error("group {0} has no rows")]
    EmptyGroup(GroupId),
    #[error("bucket edges must be strictly increasing")]
    BadBucketEdges,
    #[error("{count} bucket(s) under the minimum count, first: group {group} bucket {bucket} has {rows} row(s)")]
    BucketTooSmall {
        count: usize,
        group: GroupId,
        bucket: Score,
        rows: usize,
    },
    #[error("dataset has not been recalibrated")]
    NotRecalibrated,
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
}

/// How raw scores map to buckets on the shared `[0, 1]` axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucketing {
    /// Raw scores are already in `[0, 1]`; each grid-snapped value is its
    /// own bucket.
    Identity,
    /// Raw scores are decile ranks 1..=10; bucket `d` sits at `d / 10`.
    Decile,
    /// Half-open intervals between edges; bucket `j` of `k` sits at
    /// `(j + 1/2) / k`.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub score_col: String,
    pub label_col: String,
    pub group_col: String,
    /// Keep only these groups; `None` keeps everything.
    pub groups: Option<Vec<String>>,
    pub bucketing: Bucketing,
    pub min_bucket_count: usize,
    /// Unparsable rows tolerated before the load fails.
    pub max_bad_rows: usize,
    #[serde(skip, default)]
    pub grid: ScoreGrid,
}

impl IngestConfig {
    pub fn new(
        score_col: impl Into<String>,
        label_col: impl Into<String>,
        group_col: impl Into<String>,
    ) -> Self {
        Self {
            score_col: score_col.into(),
            label_col: label_col.into(),
            group_col: group_col.into(),
            groups: None,
            bucketing: Bucketing::Identity,
            min_bucket_count: 1,
            max_bad_rows: 0,
            grid: ScoreGrid::default(),
        }
    }

    /// Column mapping for the ProPublica two-year recidivism file.
    pub fn compas() -> Self {
        let mut config = Self::new("decile_score", "two_year_recid", "race");
        config.bucketing = Bucketing::Decile;
        config.groups = Some(vec![
            "African-American".to_owned(),
            "Caucasian".to_owned(),
        ]);
        config
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataRow {
    pub line: usize,
    pub raw_score: f64,
    /// Shared bucket-axis position of this row's bucket.
    pub axis: Score,
    pub group: GroupId,
    pub label: bool,
    /// Per-(group, bucket) empirical positive rate; set by recalibration.
    pub calibrated: Option<Score>,
}

/// Rows in file order plus bookkeeping from the load.
#[derive(Debug, Clone)]
pub struct ScoredDataset {
    rows: Vec<DataRow>,
    group_counts: BTreeMap<GroupId, usize>,
    dropped_missing_label: usize,
    bad_rows: Vec<(usize, String)>,
}

impl ScoredDataset {
    pub fn rows(&self) -> &[DataRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn group_counts(&self) -> &BTreeMap<GroupId, usize> {
        &self.group_counts
    }

    pub fn dropped_missing_label(&self) -> usize {
        self.dropped_missing_label
    }

    pub fn bad_rows(&self) -> &[(usize, String)] {
        &self.bad_rows
    }

    pub fn is_recalibrated(&self) -> bool {
        self.rows.iter().all(|r| r.calibrated.is_some())
    }

    /// Rows as the metrics module sees them, scored on the chosen axis.
    pub fn labeled_scores(&self, axis: ScoreAxis) -> Result<Vec<LabeledScore>, IngestError> {
        self.rows
            .iter()
            .map(|row| {
                let score = match axis {
                    ScoreAxis::Bucket => row.axis,
                    ScoreAxis::Calibrated => row.calibrated.ok_or(IngestError::NotRecalibrated)?,
                };
                Ok(LabeledScore {
                    group: row.group.clone(),
                    score,
                    label: row.label,
                })
            })
            .collect()
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

/// Which per-row score a rule is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAxis {
    Calibrated,
    Bucket,
}

fn bucket_axis(
    raw: f64,
    bucketing: &Bucketing,
    grid: &ScoreGrid,
) -> Result<Score, String> {
    match bucketing {
        Bucketing::Identity => grid.snap(raw).map_err(|e| e.to_string()),
        Bucketing::Decile => {
            let d = raw.round();
            if (raw - d).abs() > 1e-9 || !(1.0..=10.0).contains(&d) {
                return Err(format!("decile score {raw} is not an integer in 1..=10"));
            }
            grid.snap(d / 10.0).map_err(|e| e.to_string())
        }
        Bucketing::Custom(edges) => {
            let k = edges.len() - 1;
            let j = edges
                .windows(2)
                .position(|w| raw >= w[0] && (raw < w[1] || raw == *edges.last().unwrap()))
                .ok_or_else(|| format!("score {raw} outside the bucket edges"))?;
            grid.snap((j as f64 + 0.5) / k as f64).map_err(|e| e.to_string())
        }
    }
}

fn parse_label(text: &str) -> Result<Option<bool>, String> {
    match text.trim() {
        "" => Ok(None),
        "0" | "false" | "False" | "FALSE" => Ok(Some(false)),
        "1" | "true" | "True" | "TRUE" => Ok(Some(true)),
        other => Err(format!("label {other:?} is not binary")),
    }
}

/// Load and filter a CSV file of (score, group, label) rows.
///
/// Rows that fail to parse are collected with their line numbers; more than
/// `max_bad_rows` of them fails the load. Rows with an empty label cell are
/// dropped and counted. Row order is file order.
pub fn load_csv(path: impl AsRef<Path>, config: &IngestConfig) -> Result<ScoredDataset, IngestError> {
    if let Bucketing::Custom(edges) = &config.bucketing {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IngestError::BadBucketEdges);
        }
    }
    let file = std::fs::File::open(path.as_ref()).map_err(|source| IngestError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);

    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
    };
    let score_idx = col(&config.score_col)?;
    let label_idx = col(&config.label_col)?;
    let group_idx = col(&config.group_col)?;

    let keep: Option<Vec<GroupId>> = config
        .groups
        .as_ref()
        .map(|gs| gs.iter().map(|g| GroupId::from(g.as_str())).collect());

    let mut rows = Vec::new();
    let mut group_counts: BTreeMap<GroupId, usize> = BTreeMap::new();
    let mut dropped_missing_label = 0usize;
    let mut bad_rows: Vec<(usize, String)> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record?;
        let field = |idx: usize| record.get(idx).unwrap_or("").trim().to_owned();

        let group_text = field(group_idx);
        if group_text.is_empty() {
            return Err(IngestError::MissingGroup { line });
        }
        let group = GroupId::from(group_text.as_str());
        if let Some(keep) = &keep {
            if !keep.contains(&group) {
                continue;
            }
        }

        let mut bad = |reason: String| bad_rows.push((line, reason));
        let label = match parse_label(&field(label_idx)) {
            Ok(Some(label)) => label,
            Ok(None) => {
                dropped_missing_label += 1;
                continue;
            }
            Err(reason) => {
                bad(reason);
                continue;
            }
        };
        let raw_score: f64 = match field(score_idx).parse() {
            Ok(v) => v,
            Err(_) => {
                bad(format!("score {:?} is not a number", field(score_idx)));
                continue;
            }
        };
        let axis = match bucket_axis(raw_score, &config.bucketing, &config.grid) {
            Ok(axis) => axis,
            Err(reason) => {
                bad(reason);
                continue;
            }
        };

        *group_counts.entry(group.clone()).or_insert(0) += 1;
        rows.push(DataRow {
            line,
            raw_score,
            axis,
            group,
            label,
            calibrated: None,
        });
    }

    if bad_rows.len() > config.max_bad_rows {
        let (line, reason) = &bad_rows[0];
        return Err(IngestError::UnparsableRows {
            count: bad_rows.len(),
            first: format!("line {line}: {reason}"),
        });
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyAfterFilter);
    }
    if let Some(keep) = &keep {
        for group in keep {
            if !group_counts.contains_key(group) {
                return Err(IngestError::EmptyGroup(group.clone()));
            }
        }
    }

    Ok(ScoredDataset {
        rows,
        group_counts,
        dropped_missing_label,
        bad_rows,
    })
}

/// Bucket-axis view of a recalibrated dataset: a nice family over bucket
/// positions with each group's calibrated value attached per bucket.
#[derive(Debug, Clone)]
pub struct BucketView {
    axis_family: ProfileFamily,
    values: BTreeMap<GroupId, BTreeMap<Score, Score>>,
    group_counts: BTreeMap<GroupId, usize>,
}

/// Recalibrated dataset plus both distribution views.
#[derive(Debug, Clone)]
pub struct RecalibratedData {
    pub dataset: ScoredDataset,
    /// Per-group PMFs over calibrated scores (exactly calibrated).
    pub family: ProfileFamily,
    pub buckets: BucketView,
}

/// Replace every row's score with its (group, bucket) positive rate.
///
/// The emitted family is the per-group PMF of calibrated scores; on it,
/// groupwise calibration and the base-rate identity hold exactly.
pub fn recalibrate(
    dataset: &ScoredDataset,
    config: &IngestConfig,
) -> Result<RecalibratedData, IngestError> {
    #[derive(Default)]
    struct Bucket {
        count: usize,
        positives: usize,
    }
    let mut buckets: BTreeMap<(GroupId, Score), Bucket> = BTreeMap::new();
    for row in &dataset.rows {
        let bucket = buckets.entry((row.group.clone(), row.axis)).or_default();
        bucket.count += 1;
        if row.label {
            bucket.positives += 1;
        }
    }

    let too_small: Vec<(&(GroupId, Score), usize)> = buckets
        .iter()
        .filter(|(_, b)| b.count < config.min_bucket_count)
        .map(|(key, b)| (key, b.count))
        .collect();
    if let Some(((group, bucket), rows)) = too_small.first().map(|(k, c)| ((*k).clone(), *c)) {
        return Err(IngestError::BucketTooSmall {
            count: too_small.len(),
            group,
            bucket,
            rows,
        });
    }

    // Calibrated rates are kept at full precision; rounding them to the
    // score grid would break the exact-calibration identity the rest of the
    // pipeline leans on.
    let calibrated: BTreeMap<(GroupId, Score), Score> = buckets
        .iter()
        .map(|((g, axis), b)| {
            let rate = b.positives as f64 / b.count as f64;
            ((g.clone(), *axis), Score::exact(rate).expect("rate in [0, 1]"))
        })
        .collect();

    let mut rows = dataset.rows.clone();
    for row in &mut rows {
        row.calibrated = Some(calibrated[&(row.group.clone(), row.axis)]);
    }

    let mut calibrated_mass: BTreeMap<GroupId, BTreeMap<Score, f64>> = BTreeMap::new();
    let mut axis_mass: BTreeMap<GroupId, BTreeMap<Score, f64>> = BTreeMap::new();
    let mut values: BTreeMap<GroupId, BTreeMap<Score, Score>> = BTreeMap::new();
    for ((g, axis), bucket) in &buckets {
        let n = dataset.group_counts[g] as f64;
        let mass = bucket.count as f64 / n;
        let value = calibrated[&(g.clone(), *axis)];
        *calibrated_mass
            .entry(g.clone())
            .or_default()
            .entry(value)
            .or_insert(0.0) += mass;
        axis_mass
            .entry(g.clone())
            .or_default()
            .insert(*axis, mass);
        values.entry(g.clone()).or_default().insert(*axis, value);
    }

    let family = ProfileFamily::new(
        calibrated_mass
            .into_iter()
            .map(|(g, mass)| AccuracyProfile::new(g, mass).expect("bucket masses form a PMF"))
            .collect::<Vec<_>>(),
    )
    .expect("dataset has groups");
    let axis_family = ProfileFamily::new(
        axis_mass
            .into_iter()
            .map(|(g, mass)| AccuracyProfile::new(g, mass).expect("bucket masses form a PMF"))
            .collect::<Vec<_>>(),
    )
    .expect("dataset has groups");

    Ok(RecalibratedData {
        dataset: ScoredDataset {
            rows,
            group_counts: dataset.group_counts.clone(),
            dropped_missing_label: dataset.dropped_missing_label,
            bad_rows: dataset.bad_rows.clone(),
        },
        family,
        buckets: BucketView {
            axis_family,
            values,
            group_counts: dataset.group_counts.clone(),
        },
    })
}

impl BucketView {
    /// PMFs over the bucket axis (a nice family when every group populates
    /// every bucket).
    pub fn axis_family(&self) -> &ProfileFamily {
        &self.axis_family
    }

    /// Calibrated value of a group's bucket.
    pub fn value(&self, group: &GroupId, axis: Score) -> Option<Score> {
        self.values.get(group).and_then(|m| m.get(&axis)).copied()
    }

    pub fn group_counts(&self) -> &BTreeMap<GroupId, usize> {
        &self.group_counts
    }

    fn search_pmfs(&self) -> BTreeMap<GroupId, SearchPmf> {
        self.axis_family
            .iter()
            .map(|(g, ap)| {
                let points = ap
                    .iter()
                    .map(|(axis, mass)| SearchPoint {
                        at: axis,
                        value: self.values[g][&axis].value(),
                        mass,
                    })
                    .collect();
                (g.clone(), SearchPmf::new(points))
            })
            .collect()
    }

    /// Feasible PPV targets shared by every group.
    pub fn ppv_target_range(&self) -> (f64, f64) {
        let pmfs = self.search_pmfs();
        let lo = pmfs
            .values()
            .map(SearchPmf::mean_value)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = pmfs
            .values()
            .map(SearchPmf::max_suffix_mean)
            .fold(f64::INFINITY, f64::min);
        (lo, hi)
    }

    /// Feasible NPV targets shared by every group.
    pub fn npv_target_range(&self) -> (f64, f64) {
        let pmfs = self.search_pmfs();
        let lo = 1.0
            - pmfs
                .values()
                .map(SearchPmf::mean_value)
                .fold(f64::INFINITY, f64::min);
        let hi = 1.0
            - pmfs
                .values()
                .map(SearchPmf::min_prefix_mean)
                .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Bucket-axis thresholds equalizing the empirical PPV at `target`.
    pub fn equalize_ppv(&self, target: f64) -> Result<ThresholdRule, IngestError> {
        let pmfs = self.search_pmfs();
        let (lo, hi) = self.ppv_target_range();
        if !(target > lo && target < hi) {
            return Err(ThresholdError::TargetOutOfRange { target, lo, hi }.into());
        }
        Ok(ThresholdRule::new(scan_ppv_params(&pmfs, target)?)?)
    }

    /// Bucket-axis thresholds equalizing the empirical NPV at `target`.
    pub fn equalize_npv(&self, target: f64) -> Result<ThresholdRule, IngestError> {
        let pmfs = self.search_pmfs();
        let (lo, hi) = self.npv_target_range();
        if !(target > lo && target < hi) {
            return Err(ThresholdError::TargetOutOfRange { target, lo, hi }.into());
        }
        Ok(ThresholdRule::new(scan_npv_params(&pmfs, target)?)?)
    }

    /// Bucket-axis deferring rule equalizing empirical PPV and NPV at the
    /// given targets.
    pub fn equalize_ppv_npv_deferring(
        &self,
        ppv_target: f64,
        npv_target: f64,
    ) -> Result<DeferringThresholdRule, IngestError> {
        let (lo, hi) = self.ppv_target_range();
        if !(ppv_target > lo && ppv_target < hi) {
            return Err(ThresholdError::TargetOutOfRange {
                target: ppv_target,
                lo,
                hi,
            }
            .into());
        }
        let (lo, hi) = self.npv_target_range();
        if !(npv_target > lo && npv_target < hi) {
            return Err(ThresholdError::TargetOutOfRange {
                target: npv_target,
                lo,
                hi,
            }
            .into());
        }
        let pmfs = self.search_pmfs();
        let params = equalize_ppv_npv_deferring_pmfs(&pmfs, ppv_target, npv_target)?;
        Ok(DeferringThresholdRule::new(params.into_iter().map(
            |(g, p)| {
                let pmf = &pmfs[&g];
                (
                    g,
                    DeferringParams {
                        tau0: pmf.points()[p.tau0_idx].at,
                        tau1: pmf.points()[p.tau1_idx].at,
                        r0: p.r0,
                        r1: p.r1,
                    },
                )
            },
        ))?)
    }

    /// Exhaustive two-group search over deterministic two-threshold rules
    /// (no randomization at the thresholds): minimize the worst PPV/NPV gap
    /// quantized by `tolerance`, breaking ties by total deferral fraction.
    pub fn search_deferring_thresholds(
        &self,
        tolerance: f64,
    ) -> Option<(DeferringThresholdRule, f64, f64)> {
        let pmfs = self.search_pmfs();
        if pmfs.len() != 2 {
            return None;
        }
        let groups: Vec<GroupId> = pmfs.keys().cloned().collect();
        let total: usize = self.group_counts.values().sum();
        let weight: BTreeMap<GroupId, f64> = self
            .group_counts
            .iter()
            .map(|(g, n)| (g.clone(), *n as f64 / total as f64))
            .collect();

        // Candidate per-group rules: negative at or below i0, positive at or
        // above i1, defer strictly between.
        struct Candidate {
            i0: usize,
            i1: usize,
            ppv: f64,
            npv: f64,
            defer_mass: f64,
        }
        let candidates: BTreeMap<GroupId, Vec<Candidate>> = pmfs
            .iter()
            .map(|(g, pmf)| {
                let n = pmf.len();
                let mut out = Vec::new();
                for i0 in 0..n {
                    for i1 in i0 + 1..n {
                        let (Some(ppv), Some(npv)) = (pmf.ppv_at(i1, 1.0), pmf.npv_at(i0, 1.0))
                        else {
                            continue;
                        };
                        let defer_mass: f64 = pmf.points()[i0 + 1..i1]
                            .iter()
                            .map(|p| p.mass)
                            .sum();
                        out.push(Candidate {
                            i0,
                            i1,
                            ppv,
                            npv,
                            defer_mass,
                        });
                    }
                }
                (g.clone(), out)
            })
            .collect();

        let mut best: Option<(usize, usize, f64, f64)> = None; // (ia, ib, gap, defer)
        let (ca, cb) = (&candidates[&groups[0]], &candidates[&groups[1]]);
        for (ia, a) in ca.iter().enumerate() {
            for (ib, b) in cb.iter().enumerate() {
                let gap = (a.ppv - b.ppv).abs().max((a.npv - b.npv).abs());
                let defer =
                    weight[&groups[0]] * a.defer_mass + weight[&groups[1]] * b.defer_mass;
                let better = match &best {
                    None => true,
                    Some((_, _, best_gap, best_defer)) => {
                        let bucket = (gap / tolerance).ceil();
                        let best_bucket = (best_gap / tolerance).ceil();
                        bucket < best_bucket
                            || (bucket == best_bucket && defer < best_defer - 1e-15)
                    }
                };
                if better {
                    best = Some((ia, ib, gap, defer));
                }
            }
        }

        let (ia, ib, gap, defer) = best?;
        let picks = [(groups[0].clone(), &ca[ia]), (groups[1].clone(), &cb[ib])];
        let rule = DeferringThresholdRule::new(picks.iter().map(|(g, c)| {
            let pmf = &pmfs[g];
            (
                g.clone(),
                DeferringParams {
                    tau0: pmf.points()[c.i0].at,
                    tau1: pmf.points()[c.i1].at,
                    r0: 1.0,
                    r1: 1.0,
                },
            )
        }))
        .expect("search candidates satisfy the ordering invariants");
        Some((rule, gap, defer))
    }
}

/// Per-(group, score) calibration audit entry.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationEntry {
    pub group: GroupId,
    pub score: f64,
    pub rows: usize,
    pub positives: usize,
    pub empirical_rate: f64,
    pub deviation: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub tolerance: f64,
    pub entries: Vec<CalibrationEntry>,
    pub max_deviation: f64,
}

impl CalibrationReport {
    pub fn flagged(&self) -> impl Iterator<Item = &CalibrationEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Compare each (group, score) bucket's empirical positive rate against the
/// score itself.
pub fn validate_calibration(
    dataset: &ScoredDataset,
    axis: ScoreAxis,
    tolerance: f64,
) -> Result<CalibrationReport, IngestError> {
    let rows = dataset.labeled_scores(axis)?;
    if rows.is_empty() {
        return Err(IngestError::EmptyAfterFilter);
    }
    let mut buckets: BTreeMap<(GroupId, Score), (usize, usize)> = BTreeMap::new();
    for row in rows {
        let bucket = buckets.entry((row.group, row.score)).or_insert((0, 0));
        bucket.0 += 1;
        if row.label {
            bucket.1 += 1;
        }
    }
    let mut entries = Vec::new();
    let mut max_deviation = 0.0f64;
    for ((group, score), (rows, positives)) in buckets {
        let empirical_rate = positives as f64 / rows as f64;
        let deviation = (empirical_rate - score.value()).abs();
        max_deviation = max_deviation.max(deviation);
        entries.push(CalibrationEntry {
            group,
            score: score.value(),
            rows,
            positives,
            empirical_rate,
            deviation,
            flagged: deviation > tolerance,
        });
    }
    Ok(CalibrationReport {
        tolerance,
        entries,
        max_deviation,
    })
}
