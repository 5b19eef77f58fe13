//! Threshold post-processors and the searches that equalize predictive
//! values across groups.
//!
//! A single randomized threshold (tau, R) sends scores above tau to positive,
//! below to negative, and the threshold score itself to positive with
//! probability R. The deferring variant keeps two thresholds per group and
//! defers strictly between them. PPV is monotone along the (tau, R) sweep and
//! piecewise a ratio of linear functions of R, so instead of deforming rules
//! by epsilon steps the searches solve for R in closed form at each candidate
//! threshold and take the largest feasible one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{DecisionRule, HardRule};
use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily, PROB_TOL};
use crate::score::{Score, ScoreGrid};

/// Slack for feasibility of solved randomization probabilities.
const R_TOL: f64 = 1e-12;

/// Window for treating a target as equal to a support value. The closed-form
/// randomization degenerates there; targets re-derived from achieved
/// statistics (as the overlap repair does) land within a few ulps of the
/// value, never exactly on it.
const DEGEN_TOL: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("family is not nice: supports differ across groups")]
    NotNice,
    #[error("group {0}: support has {1} point(s), need at least 2")]
    SupportTooSmall(GroupId, usize),
    #[error("target {target} outside the feasible interval ({lo}, {hi})")]
    TargetOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("score {0} is not in the profile support")]
    ScoreNotInSupport(Score),
    #[error("threshold equals the target value but the tail mean differs; no randomization attains it")]
    DivisionDegenerate,
    #[error("invalid deferring rule for group {group}: {reason}")]
    InvalidRule { group: GroupId, reason: String },
    #[error("rule must be group blind")]
    NotGroupBlind,
    #[error("no feasible threshold for group {group} at target {target}")]
    NoFeasibleThreshold { group: GroupId, target: f64 },
    #[error("overlap repair exceeded {0} rounds")]
    RepairLimitExceeded(usize),
}

// --- rule types --------------------------------------------------------------

/// Per-group parameters of a single randomized threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub tau: Score,
    /// Probability of predicting positive when the score equals `tau`.
    pub r: f64,
}

/// Single-threshold rule with per-group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRule {
    per_group: BTreeMap<GroupId, ThresholdParams>,
}

impl ThresholdRule {
    pub fn new(
        per_group: impl IntoIterator<Item = (GroupId, ThresholdParams)>,
    ) -> Result<Self, ThresholdError> {
        let per_group: BTreeMap<GroupId, ThresholdParams> = per_group.into_iter().collect();
        for params in per_group.values() {
            if !(0.0..=1.0).contains(&params.r) {
                return Err(ThresholdError::BadProbability(params.r));
            }
        }
        Ok(Self { per_group })
    }

    pub fn group_blind<'a>(
        groups: impl IntoIterator<Item = &'a GroupId>,
        tau: Score,
        r: f64,
    ) -> Result<Self, ThresholdError> {
        Self::new(
            groups
                .into_iter()
                .map(|g| (g.clone(), ThresholdParams { tau, r })),
        )
    }

    pub fn params(&self, group: &GroupId) -> Option<ThresholdParams> {
        self.per_group.get(group).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &ThresholdParams)> {
        self.per_group.iter()
    }

    pub fn is_group_blind(&self) -> bool {
        let mut values = self.per_group.values();
        match values.next() {
            Some(first) => values.all(|p| p == first),
            None => true,
        }
    }

    pub fn to_hard_rule(&self) -> HardRule {
        HardRule::per_group(
            self.per_group
                .iter()
                .map(|(g, p)| {
                    (
                        g.clone(),
                        DecisionRule::Threshold {
                            tau: p.tau,
                            r: p.r,
                        },
                    )
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.per_group
                .iter()
                .map(|(g, p)| {
                    serde_json::json!({
                        "group": g.as_str(),
                        "tau1": p.tau.value(),
                        "r1": p.r,
                    })
                })
                .collect(),
        )
    }
}

/// Per-group parameters of a two-threshold deferring rule.
///
/// `r0` is the probability of predicting negative at `tau0`; `r1` the
/// probability of predicting positive at `tau1`; scores strictly between the
/// thresholds defer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeferringParams {
    pub tau0: Score,
    pub tau1: Score,
    pub r0: f64,
    pub r1: f64,
}

/// Two-threshold deferring rule with per-group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferringThresholdRule {
    per_group: BTreeMap<GroupId, DeferringParams>,
}

impl DeferringThresholdRule {
    pub fn new(
        per_group: impl IntoIterator<Item = (GroupId, DeferringParams)>,
    ) -> Result<Self, ThresholdError> {
        let per_group: BTreeMap<GroupId, DeferringParams> = per_group.into_iter().collect();
        for (group, p) in &per_group {
            let invalid = |reason: String| ThresholdError::InvalidRule {
                group: group.clone(),
                reason,
            };
            if !(0.0..=1.0).contains(&p.r0) || !(0.0..=1.0).contains(&p.r1) {
                return Err(invalid(format!(
                    "randomization probabilities ({}, {}) outside [0, 1]",
                    p.r0, p.r1
                )));
            }
            if p.tau0 > p.tau1 {
                return Err(invalid(format!(
                    "thresholds overlap: tau0 {} > tau1 {}",
                    p.tau0, p.tau1
                )));
            }
            if p.tau0 == p.tau1 && p.r0 + p.r1 > 1.0 + PROB_TOL {
                return Err(invalid(format!(
                    "merged threshold needs r0 + r1 <= 1, got {}",
                    p.r0 + p.r1
                )));
            }
        }
        Ok(Self { per_group })
    }

    pub fn params(&self, group: &GroupId) -> Option<DeferringParams> {
        self.per_group.get(group).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &DeferringParams)> {
        self.per_group.iter()
    }

    pub fn to_hard_rule(&self) -> HardRule {
        HardRule::per_group(
            self.per_group
                .iter()
                .map(|(g, p)| {
                    (
                        g.clone(),
                        DecisionRule::DeferBand {
                            tau0: p.tau0,
                            tau1: p.tau1,
                            r0: p.r0,
                            r1: p.r1,
                        },
                    )
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.per_group
                .iter()
                .map(|(g, p)| {
                    serde_json::json!({
                        "group": g.as_str(),
                        "tau0": p.tau0.value(),
                        "tau1": p.tau1.value(),
                        "r0": p.r0,
                        "r1": p.r1,
                    })
                })
                .collect(),
        )
    }
}

/// Expectation-valued hard rule of a single-threshold post-processor.
pub fn apply_threshold(rule: &ThresholdRule) -> HardRule {
    rule.to_hard_rule()
}

/// Expectation-valued hard rule of a deferring threshold post-processor.
pub fn apply_deferring_threshold(
    rule: &DeferringThresholdRule,
) -> Result<HardRule, ThresholdError> {
    // Invariants were validated at construction; revalidate so rules built
    // through deserialization paths cannot smuggle in an overlap.
    DeferringThresholdRule::new(rule.per_group.clone()).map(|r| r.to_hard_rule())
}

// --- search engine -----------------------------------------------------------

/// A point the threshold search sees: position on the decision axis, the
/// positive rate attached to it, and its probability mass.
///
/// For calibrated profiles the value *is* the axis position; bucketed
/// empirical data attaches per-bucket positive rates to a shared bucket axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SearchPoint {
    pub at: Score,
    pub value: f64,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SearchPmf {
    points: Vec<SearchPoint>,
}

impl SearchPmf {
    pub(crate) fn new(mut points: Vec<SearchPoint>) -> Self {
        points.sort_by(|a, b| a.at.cmp(&b.at));
        Self { points }
    }

    pub(crate) fn from_profile(ap: &AccuracyProfile) -> Self {
        Self::new(
            ap.iter()
                .map(|(s, p)| SearchPoint {
                    at: s,
                    value: s.value(),
                    mass: p,
                })
                .collect(),
        )
    }

    pub(crate) fn points(&self) -> &[SearchPoint] {
        &self.points
    }

    pub(crate) fn len(&self) -> usize {
        self.points.len()
    }

    /// Mean positive rate; the PPV of the always-positive rule.
    pub(crate) fn mean_value(&self) -> f64 {
        self.points.iter().map(|p| p.value * p.mass).sum()
    }

    /// Largest suffix mean: the supremum of achievable PPVs.
    pub(crate) fn max_suffix_mean(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut t = 0.0;
        let mut w = 0.0;
        for p in self.points.iter().rev() {
            t += p.mass;
            w += p.value * p.mass;
            best = best.max(w / t);
        }
        best
    }

    /// Smallest prefix mean; `1 - min_prefix_mean` is the supremum of
    /// achievable NPVs.
    pub(crate) fn min_prefix_mean(&self) -> f64 {
        let mut best = f64::INFINITY;
        let mut b = 0.0;
        let mut v = 0.0;
        for p in &self.points {
            b += p.mass;
            v += p.value * p.mass;
            best = best.min(v / b);
        }
        best
    }

    fn tail_above(&self, idx: usize) -> (f64, f64) {
        let mut t = 0.0;
        let mut w = 0.0;
        for p in &self.points[idx + 1..] {
            t += p.mass;
            w += p.value * p.mass;
        }
        (t, w)
    }

    fn head_below(&self, idx: usize) -> (f64, f64) {
        let mut b = 0.0;
        let mut v = 0.0;
        for p in &self.points[..idx] {
            b += p.mass;
            v += p.value * p.mass;
        }
        (b, v)
    }

    /// PPV of the rule that sends everything above index `idx` to positive
    /// and the point at `idx` to positive with probability `r`.
    pub(crate) fn ppv_at(&self, idx: usize, r: f64) -> Option<f64> {
        let (t, w) = self.tail_above(idx);
        let p = self.points[idx];
        let den = t + r * p.mass;
        (den > 0.0).then(|| (w + r * p.value * p.mass) / den)
    }

    /// NPV of the rule that sends everything below index `idx` to negative
    /// and the point at `idx` to negative with probability `q`.
    pub(crate) fn npv_at(&self, idx: usize, q: f64) -> Option<f64> {
        let (b, v) = self.head_below(idx);
        let p = self.points[idx];
        let den = b + q * p.mass;
        (den > 0.0).then(|| 1.0 - (v + q * p.value * p.mass) / den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feasibility {
    Feasible(f64),
    Infeasible,
}

fn clamp_prob(r: f64) -> Option<f64> {
    if (-R_TOL..=1.0 + R_TOL).contains(&r) {
        Some(r.clamp(0.0, 1.0))
    } else {
        None
    }
}

/// Closed-form randomization at one candidate threshold so the tail PPV hits
/// `target`: with `T, W` the mass and value-mass strictly above the point,
/// solve `(W + R v m) / (T + R m) = target`.
fn solve_ppv_at(pmf: &SearchPmf, idx: usize, target: f64) -> Result<Feasibility, ThresholdError> {
    let point = pmf.points[idx];
    let (t, w) = pmf.tail_above(idx);
    if (point.value - target).abs() <= DEGEN_TOL {
        return if (w - target * t).abs() <= PROB_TOL {
            // Any randomization attains the target; keep the positive set
            // as large as possible.
            Ok(Feasibility::Feasible(1.0))
        } else {
            Err(ThresholdError::DivisionDegenerate)
        };
    }
    let r = (target * t - w) / (point.mass * (point.value - target));
    match clamp_prob(r) {
        // A positive decision must remain possible.
        Some(r) if t > 0.0 || r > 0.0 => Ok(Feasibility::Feasible(r)),
        _ => Ok(Feasibility::Infeasible),
    }
}

/// Mirror image for NPV; `q` is the probability of predicting negative at
/// the candidate threshold.
fn solve_npv_at(pmf: &SearchPmf, idx: usize, target: f64) -> Result<Feasibility, ThresholdError> {
    let point = pmf.points[idx];
    let (b, v) = pmf.head_below(idx);
    let head_target = 1.0 - target;
    if (point.value - head_target).abs() <= DEGEN_TOL {
        return if (v - head_target * b).abs() <= PROB_TOL {
            Ok(Feasibility::Feasible(1.0))
        } else {
            Err(ThresholdError::DivisionDegenerate)
        };
    }
    let q = (head_target * b - v) / (point.mass * (point.value - head_target));
    match clamp_prob(q) {
        Some(q) if b > 0.0 || q > 0.0 => Ok(Feasibility::Feasible(q)),
        _ => Ok(Feasibility::Infeasible),
    }
}

/// Scan candidate thresholds downward from the top of the support; the first
/// feasible solve is the largest feasible threshold.
pub(crate) fn scan_ppv(pmf: &SearchPmf, target: f64) -> Option<(usize, f64)> {
    for idx in (0..pmf.len()).rev() {
        if let Ok(Feasibility::Feasible(r)) = solve_ppv_at(pmf, idx, target) {
            return Some((idx, r));
        }
    }
    None
}

/// Mirror scan upward from the bottom of the support.
pub(crate) fn scan_npv(pmf: &SearchPmf, target: f64) -> Option<(usize, f64)> {
    for idx in 0..pmf.len() {
        if let Ok(Feasibility::Feasible(q)) = solve_npv_at(pmf, idx, target) {
            return Some((idx, q));
        }
    }
    None
}

/// Solve for the randomization probability making the threshold rule's PPV
/// equal `target` at threshold `tau`.
pub fn solve_tail_randomization(
    ap: &AccuracyProfile,
    tau: Score,
    target: f64,
) -> Result<Feasibility, ThresholdError> {
    let pmf = SearchPmf::from_profile(ap);
    let idx = pmf
        .points
        .iter()
        .position(|p| p.at == tau)
        .ok_or(ThresholdError::ScoreNotInSupport(tau))?;
    solve_ppv_at(&pmf, idx, target)
}

// --- family-level validation --------------------------------------------------

fn require_nice(family: &ProfileFamily) -> Result<(), ThresholdError> {
    if family.is_nice() {
        Ok(())
    } else {
        Err(ThresholdError::NotNice)
    }
}

fn require_support(family: &ProfileFamily, min_len: usize) -> Result<(), ThresholdError> {
    for (g, ap) in family.iter() {
        if ap.support_len() < min_len {
            return Err(ThresholdError::SupportTooSmall(g.clone(), ap.support_len()));
        }
    }
    Ok(())
}

// --- trivial equalizers --------------------------------------------------------

/// Group-blind threshold at the top of the shared support. Every non-trivial
/// group's PPV equals the largest score.
pub fn trivial_ppv_equalizer(family: &ProfileFamily, r: f64) -> Result<ThresholdRule, ThresholdError> {
    require_nice(family)?;
    if !(r > 0.0 && r <= 1.0) {
        return Err(ThresholdError::BadProbability(r));
    }
    ThresholdRule::new(family.iter().map(|(g, ap)| {
        (
            g.clone(),
            ThresholdParams {
                tau: ap.max_support(),
                r,
            },
        )
    }))
}

/// Group-blind threshold at the bottom of the shared support. Every
/// non-trivial group's NPV equals one minus the smallest score.
pub fn trivial_npv_equalizer(family: &ProfileFamily, r: f64) -> Result<ThresholdRule, ThresholdError> {
    require_nice(family)?;
    if !(0.0..1.0).contains(&r) {
        return Err(ThresholdError::BadProbability(r));
    }
    ThresholdRule::new(family.iter().map(|(g, ap)| {
        (
            g.clone(),
            ThresholdParams {
                tau: ap.min_support(),
                r,
            },
        )
    }))
}

/// Deferring rule with thresholds at both ends of the shared support,
/// equalizing PPV at the largest score and NPV at one minus the smallest.
pub fn trivial_deferring_equalizer(
    family: &ProfileFamily,
    r0: f64,
    r1: f64,
) -> Result<DeferringThresholdRule, ThresholdError> {
    require_nice(family)?;
    if !(r0 > 0.0 && r0 <= 1.0) {
        return Err(ThresholdError::BadProbability(r0));
    }
    if !(r1 > 0.0 && r1 <= 1.0) {
        return Err(ThresholdError::BadProbability(r1));
    }
    DeferringThresholdRule::new(family.iter().map(|(g, ap)| {
        (
            g.clone(),
            DeferringParams {
                tau0: ap.min_support(),
                tau1: ap.max_support(),
                r0,
                r1,
            },
        )
    }))
}

// --- target equalization --------------------------------------------------------

fn family_pmfs(family: &ProfileFamily) -> BTreeMap<GroupId, SearchPmf> {
    family
        .iter()
        .map(|(g, ap)| (g.clone(), SearchPmf::from_profile(ap)))
        .collect()
}

pub(crate) fn scan_ppv_params(
    pmfs: &BTreeMap<GroupId, SearchPmf>,
    target: f64,
) -> Result<BTreeMap<GroupId, ThresholdParams>, ThresholdError> {
    pmfs.iter()
        .map(|(g, pmf)| {
            let (idx, r) = scan_ppv(pmf, target).ok_or(ThresholdError::NoFeasibleThreshold {
                group: g.clone(),
                target,
            })?;
            Ok((
                g.clone(),
                ThresholdParams {
                    tau: pmf.points[idx].at,
                    r,
                },
            ))
        })
        .collect()
}

pub(crate) fn scan_npv_params(
    pmfs: &BTreeMap<GroupId, SearchPmf>,
    target: f64,
) -> Result<BTreeMap<GroupId, ThresholdParams>, ThresholdError> {
    pmfs.iter()
        .map(|(g, pmf)| {
            let (idx, q) = scan_npv(pmf, target).ok_or(ThresholdError::NoFeasibleThreshold {
                group: g.clone(),
                target,
            })?;
            Ok((
                g.clone(),
                ThresholdParams {
                    tau: pmf.points[idx].at,
                    // Def 3.5 parameter: probability of positive at the
                    // threshold.
                    r: 1.0 - q,
                },
            ))
        })
        .collect()
}

/// Per-group thresholds making every group's PPV equal `target`.
///
/// Valid targets lie strictly between the largest base rate and the top of
/// the shared support.
pub fn equalize_ppv(family: &ProfileFamily, target: f64) -> Result<ThresholdRule, ThresholdError> {
    require_nice(family)?;
    require_support(family, 2)?;
    let pmfs = family_pmfs(family);
    let lo = pmfs
        .values()
        .map(SearchPmf::mean_value)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = family.iter().next().expect("nonempty").1.max_support().value();
    if !(target > lo && target < hi) {
        return Err(ThresholdError::TargetOutOfRange { target, lo, hi });
    }
    ThresholdRule::new(scan_ppv_params(&pmfs, target)?)
}

/// Per-group thresholds making every group's NPV equal `target`.
///
/// Valid targets lie strictly between `1 - min base rate` and
/// `1 - min support score`.
pub fn equalize_npv(family: &ProfileFamily, target: f64) -> Result<ThresholdRule, ThresholdError> {
    require_nice(family)?;
    require_support(family, 2)?;
    let pmfs = family_pmfs(family);
    let lo = 1.0
        - pmfs
            .values()
            .map(SearchPmf::mean_value)
            .fold(f64::INFINITY, f64::min);
    let hi = 1.0 - family.iter().next().expect("nonempty").1.min_support().value();
    if !(target > lo && target < hi) {
        return Err(ThresholdError::TargetOutOfRange { target, lo, hi });
    }
    ThresholdRule::new(scan_npv_params(&pmfs, target)?)
}

// --- deferring equalization (two thresholds per group) --------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct DeferSearchParams {
    pub tau0_idx: usize,
    pub tau1_idx: usize,
    pub r0: f64,
    pub r1: f64,
}

impl DeferSearchParams {
    fn violates(&self) -> bool {
        self.tau0_idx > self.tau1_idx
            || (self.tau0_idx == self.tau1_idx && self.r0 + self.r1 > 1.0 + PROB_TOL)
    }

    fn ppv(&self, pmf: &SearchPmf) -> Option<f64> {
        pmf.ppv_at(self.tau1_idx, self.r1)
    }

    fn npv(&self, pmf: &SearchPmf) -> Option<f64> {
        pmf.npv_at(self.tau0_idx, self.r0)
    }
}

/// Two-threshold equalization engine shared by the analytic and bucketed
/// entry points.
///
/// Phase 1 solves the PPV and NPV thresholds independently. Phase 2 repairs
/// groups whose thresholds overlap: merge at the support point nearest the
/// midpoint (ties toward the lower score), renormalize the randomization if
/// it oversubscribes the merged point, then re-target every other group to
/// the repaired group's (weakly higher) PPV and NPV. Each round fixes one
/// group, and the monotone re-targeting only widens valid bands, so the loop
/// ends within `2 * |groups|` rounds.
pub(crate) fn equalize_ppv_npv_deferring_pmfs(
    pmfs: &BTreeMap<GroupId, SearchPmf>,
    ppv_target: f64,
    npv_target: f64,
) -> Result<BTreeMap<GroupId, DeferSearchParams>, ThresholdError> {
    let mut params: BTreeMap<GroupId, DeferSearchParams> = BTreeMap::new();
    for (g, pmf) in pmfs {
        let (tau1_idx, r1) =
            scan_ppv(pmf, ppv_target).ok_or(ThresholdError::NoFeasibleThreshold {
                group: g.clone(),
                target: ppv_target,
            })?;
        let (tau0_idx, r0) =
            scan_npv(pmf, npv_target).ok_or(ThresholdError::NoFeasibleThreshold {
                group: g.clone(),
                target: npv_target,
            })?;
        params.insert(
            g.clone(),
            DeferSearchParams {
                tau0_idx,
                tau1_idx,
                r0,
                r1,
            },
        );
    }

    let limit = 2 * pmfs.len();
    let mut rounds = 0;
    loop {
        let Some(group) = params
            .iter()
            .find(|(_, p)| p.violates())
            .map(|(g, _)| g.clone())
        else {
            break;
        };
        rounds += 1;
        if rounds > limit {
            return Err(ThresholdError::RepairLimitExceeded(limit));
        }

        let pmf = &pmfs[&group];
        let p = params.get_mut(&group).expect("group present");
        let old0 = p.tau0_idx;
        let old1 = p.tau1_idx;

        if p.tau0_idx > p.tau1_idx {
            let mid = (pmf.points[p.tau0_idx].at.value() + pmf.points[p.tau1_idx].at.value()) / 2.0;
            let mut best = p.tau1_idx;
            let mut best_dist = (pmf.points[best].at.value() - mid).abs();
            for idx in p.tau1_idx + 1..=p.tau0_idx {
                let dist = (pmf.points[idx].at.value() - mid).abs();
                // Requiring a clear improvement keeps ties (up to rounding
                // of the midpoint) on the lower score.
                if dist < best_dist - PROB_TOL {
                    best = idx;
                    best_dist = dist;
                }
            }
            p.tau0_idx = best;
            p.tau1_idx = best;
        }

        if p.r0 + p.r1 > 1.0 + PROB_TOL {
            if p.tau0_idx == old0 {
                p.r1 = 1.0 - p.r0;
            } else if p.tau1_idx == old1 {
                p.r0 = 1.0 - p.r1;
            } else {
                let share = p.r0 / (p.r0 + p.r1);
                p.r0 = share;
                p.r1 = 1.0 - share;
            }
        }

        // Keep both prediction events possible at the merged point; the
        // adjustments below only push PPV and NPV further up.
        let (tail, _) = pmf.tail_above(p.tau1_idx);
        if tail == 0.0 && p.r1 <= 0.0 {
            if p.r0 >= 1.0 {
                p.r0 = 0.5;
            }
            p.r1 = 1.0 - p.r0;
        }
        let (head, _) = pmf.head_below(p.tau0_idx);
        if head == 0.0 && p.r0 <= 0.0 {
            if p.r1 >= 1.0 {
                p.r1 = 0.5;
            }
            p.r0 = 1.0 - p.r1;
        }

        let new_ppv = p.ppv(pmf).ok_or(ThresholdError::NoFeasibleThreshold {
            group: group.clone(),
            target: ppv_target,
        })?;
        let new_npv = p.npv(pmf).ok_or(ThresholdError::NoFeasibleThreshold {
            group: group.clone(),
            target: npv_target,
        })?;

        for (other, other_pmf) in pmfs {
            if *other == group {
                continue;
            }
            let (tau1_idx, mut r1) =
                scan_ppv(other_pmf, new_ppv).ok_or(ThresholdError::NoFeasibleThreshold {
                    group: other.clone(),
                    target: new_ppv,
                })?;
            let (tau0_idx, mut r0) =
                scan_npv(other_pmf, new_npv).ok_or(ThresholdError::NoFeasibleThreshold {
                    group: other.clone(),
                    target: new_npv,
                })?;
            // The independent scans may oversubscribe a shared threshold
            // even though one side's statistic does not depend on its
            // randomization there (empty tail or head). Shrink that side;
            // anything left over is a genuine overlap for the next round.
            if tau0_idx == tau1_idx && r0 + r1 > 1.0 + PROB_TOL {
                let (tail, _) = other_pmf.tail_above(tau1_idx);
                let (head, _) = other_pmf.head_below(tau0_idx);
                if tail == 0.0 && r0 < 1.0 {
                    r1 = 1.0 - r0;
                } else if head == 0.0 && r1 < 1.0 {
                    r0 = 1.0 - r1;
                }
            }
            let entry = params.get_mut(other).expect("group present");
            entry.tau0_idx = tau0_idx;
            entry.tau1_idx = tau1_idx;
            entry.r0 = r0;
            entry.r1 = r1;
        }
    }

    Ok(params)
}

/// Deferring rule equalizing PPV at `ppv_target` and NPV at `npv_target`
/// across all groups (both may end up weakly higher if thresholds had to be
/// merged).
pub fn equalize_ppv_npv_deferring(
    family: &ProfileFamily,
    ppv_target: f64,
    npv_target: f64,
) -> Result<DeferringThresholdRule, ThresholdError> {
    // Phase 1 preconditions and range checks come from the single-statistic
    // searches.
    equalize_ppv(family, ppv_target)?;
    equalize_npv(family, npv_target)?;
    let pmfs = family_pmfs(family);
    let params = equalize_ppv_npv_deferring_pmfs(&pmfs, ppv_target, npv_target)?;
    DeferringThresholdRule::new(params.into_iter().map(|(g, p)| {
        let pmf = &pmfs[&g];
        (
            g,
            DeferringParams {
                tau0: pmf.points[p.tau0_idx].at,
                tau1: pmf.points[p.tau1_idx].at,
                r0: p.r0,
                r1: p.r1,
            },
        )
    }))
}

// --- stochastic dominance report -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominancePair {
    pub dominant: GroupId,
    pub dominated: GroupId,
    pub ppv_dominant: f64,
    pub ppv_dominated: f64,
    /// Whether the dominated group's PPV is strictly smaller, as stochastic
    /// dominance of the positive-conditioned distributions requires.
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceReport {
    pub pairs: Vec<DominancePair>,
    pub all_consistent: bool,
}

/// Positive-conditioned score distribution under a (tau, r) threshold.
fn positive_conditioned(ap: &AccuracyProfile, params: ThresholdParams) -> Option<Vec<(Score, f64)>> {
    let rule = DecisionRule::Threshold {
        tau: params.tau,
        r: params.r,
    };
    let mut out = Vec::new();
    let mut total = 0.0;
    for (s, p) in ap.iter() {
        let w = p * rule.outcome(s).pos;
        if w > 0.0 {
            out.push((s, w));
            total += w;
        }
    }
    if total == 0.0 {
        return None;
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    Some(out)
}

/// `a` strictly stochastically dominates `b`: its CDF is weakly below
/// everywhere and strictly below somewhere.
fn strictly_dominates(a: &[(Score, f64)], b: &[(Score, f64)]) -> bool {
    let mut grid: Vec<Score> = a.iter().chain(b).map(|(s, _)| *s).collect();
    grid.sort_unstable();
    grid.dedup();
    let mut cdf_a = 0.0;
    let mut cdf_b = 0.0;
    let mut strict = false;
    // Skip the last point, where both CDFs are 1.
    for s in &grid[..grid.len().saturating_sub(1)] {
        cdf_a += a.iter().find(|(x, _)| x == s).map_or(0.0, |(_, p)| *p);
        cdf_b += b.iter().find(|(x, _)| x == s).map_or(0.0, |(_, p)| *p);
        if cdf_a > cdf_b + PROB_TOL {
            return false;
        }
        if cdf_a < cdf_b - PROB_TOL {
            strict = true;
        }
    }
    strict
}

/// For every ordered group pair whose positive-conditioned score
/// distributions are strictly ordered by stochastic dominance, check that the
/// dominated group has the strictly smaller PPV.
pub fn check_dominance_gap(
    family: &ProfileFamily,
    rule: &ThresholdRule,
) -> Result<DominanceReport, ThresholdError> {
    if !rule.is_group_blind() {
        return Err(ThresholdError::NotGroupBlind);
    }
    let groups: Vec<&GroupId> = family.groups().collect();
    let mut pairs = Vec::new();
    for (i, ga) in groups.iter().enumerate() {
        for gb in groups.iter().skip(i + 1) {
            let pa = rule.params(ga).ok_or(ThresholdError::NoFeasibleThreshold {
                group: (*ga).clone(),
                target: f64::NAN,
            })?;
            let ap_a = family.get(ga).expect("group in family");
            let ap_b = family.get(gb).expect("group in family");
            let (Some(cond_a), Some(cond_b)) = (
                positive_conditioned(ap_a, pa),
                positive_conditioned(ap_b, pa),
            ) else {
                continue;
            };
            let ppv_a: f64 = cond_a.iter().map(|(s, p)| s.value() * p).sum();
            let ppv_b: f64 = cond_b.iter().map(|(s, p)| s.value() * p).sum();
            let (dominant, dominated, ppv_dom, ppv_sub) = if strictly_dominates(&cond_a, &cond_b) {
                ((*ga).clone(), (*gb).clone(), ppv_a, ppv_b)
            } else if strictly_dominates(&cond_b, &cond_a) {
                ((*gb).clone(), (*ga).clone(), ppv_b, ppv_a)
            } else {
                continue;
            };
            pairs.push(DominancePair {
                dominant,
                dominated,
                ppv_dominant: ppv_dom,
                ppv_dominated: ppv_sub,
                consistent: ppv_sub < ppv_dom,
            });
        }
    }
    let all_consistent = pairs.iter().all(|p| p.consistent);
    Ok(DominanceReport {
        pairs,
        all_consistent,
    })
}

// --- JSON loading -----------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RuleEntryJson {
    group: String,
    #[serde(default)]
    tau0: Option<f64>,
    #[serde(default)]
    tau1: Option<f64>,
    #[serde(default)]
    r0: Option<f64>,
    #[serde(default)]
    r1: Option<f64>,
}

impl ThresholdRule {
    pub fn from_json(value: &serde_json::Value, grid: &ScoreGrid) -> Result<Self, ThresholdError> {
        let entries: Vec<RuleEntryJson> = serde_json::from_value(value.clone())
            .map_err(|e| ThresholdError::InvalidRule {
                group: GroupId::from("?"),
                reason: e.to_string(),
            })?;
        let mut per_group = BTreeMap::new();
        for entry in entries {
            let invalid = |reason: &str| ThresholdError::InvalidRule {
                group: GroupId::from(entry.group.as_str()),
                reason: reason.to_owned(),
            };
            let tau = entry.tau1.ok_or_else(|| invalid("missing tau1"))?;
            let r = entry.r1.ok_or_else(|| invalid("missing r1"))?;
            let tau = grid.snap(tau).map_err(|e| invalid(&e.to_string()))?;
            per_group.insert(GroupId::from(entry.group.as_str()), ThresholdParams { tau, r });
        }
        ThresholdRule::new(per_group)
    }
}

impl DeferringThresholdRule {
    pub fn from_json(value: &serde_json::Value, grid: &ScoreGrid) -> Result<Self, ThresholdError> {
        let entries: Vec<RuleEntryJson> = serde_json::from_value(value.clone())
            .map_err(|e| ThresholdError::InvalidRule {
                group: GroupId::from("?"),
                reason: e.to_string(),
            })?;
        let mut per_group = BTreeMap::new();
        for entry in entries {
            let invalid = |reason: &str| ThresholdError::InvalidRule {
                group: GroupId::from(entry.group.as_str()),
                reason: reason.to_owned(),
            };
            let tau0 = entry.tau0.ok_or_else(|| invalid("missing tau0"))?;
            let tau1 = entry.tau1.ok_or_else(|| invalid("missing tau1"))?;
            let r0 = entry.r0.ok_or_else(|| invalid("missing r0"))?;
            let r1 = entry.r1.ok_or_else(|| invalid("missing r1"))?;
            per_group.insert(
                GroupId::from(entry.group.as_str()),
                DeferringParams {
                    tau0: grid.snap(tau0).map_err(|e| invalid(&e.to_string()))?,
                    tau1: grid.snap(tau1).map_err(|e| invalid(&e.to_string()))?,
                    r0,
                    r1,
                },
            );
        }
        DeferringThresholdRule::new(per_group)
    }
}
