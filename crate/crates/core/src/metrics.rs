//! Group statistics of hard (optionally deferring) classifiers.
//!
//! Statistics are computed in expectation over both the score distribution
//! and the rule's randomization. Predictive values use the conditional
//! expectation characterization (PPV = E[S | predicted positive]); error
//! rates use the Bayes identity FPR = Pr[positive] * (1 - E[S | positive]) /
//! (1 - E[S]). Undefined statistics (conditioning event of probability zero)
//! are absent rather than NaN or an error.
//!
//! The computation is generic over the probability field so the same code
//! path runs in `f64` and in exact rational arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Sub};

use num::rational::BigRational;
use num::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily, PROB_TOL};
use crate::score::Score;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("rule does not cover group {0}")]
    UnknownGroup(GroupId),
    #[error("no rows to evaluate")]
    EmptyData,
    #[error("outcome probabilities ({neg}, {pos}, {defer}) do not form a distribution")]
    InvalidOutcome { neg: f64, pos: f64, defer: f64 },
    #[error("statistic unavailable: {0}")]
    MissingStatistic(String),
}

/// Output of a deferring hard classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Negative,
    Positive,
    Defer,
}

/// Distribution over predictions for one (score, group) input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbs {
    pub neg: f64,
    pub pos: f64,
    pub defer: f64,
}

impl OutcomeProbs {
    pub const NEGATIVE: Self = Self {
        neg: 1.0,
        pos: 0.0,
        defer: 0.0,
    };
    pub const POSITIVE: Self = Self {
        neg: 0.0,
        pos: 1.0,
        defer: 0.0,
    };
    pub const DEFER: Self = Self {
        neg: 0.0,
        pos: 0.0,
        defer: 1.0,
    };

    pub fn new(neg: f64, pos: f64, defer: f64) -> Result<Self, MetricsError> {
        let ok = [neg, pos, defer]
            .iter()
            .all(|p| p.is_finite() && (-PROB_TOL..=1.0 + PROB_TOL).contains(p))
            && ((neg + pos + defer) - 1.0).abs() <= PROB_TOL;
        if !ok {
            return Err(MetricsError::InvalidOutcome { neg, pos, defer });
        }
        Ok(Self { neg, pos, defer })
    }

    pub fn certain(prediction: Prediction) -> Self {
        match prediction {
            Prediction::Negative => Self::NEGATIVE,
            Prediction::Positive => Self::POSITIVE,
            Prediction::Defer => Self::DEFER,
        }
    }
}

/// How one group's scores map to prediction distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionRule {
    /// Same outcome distribution for every score.
    Constant(OutcomeProbs),
    /// Single randomized threshold: positive above, negative below,
    /// positive with probability `r` at the threshold.
    Threshold { tau: Score, r: f64 },
    /// Two thresholds with a deferral band between them. At a merged
    /// threshold (`tau0 == tau1`) the score splits three ways.
    DeferBand {
        tau0: Score,
        tau1: Score,
        r0: f64,
        r1: f64,
    },
    /// Explicit per-score table; scores absent from the table get
    /// `otherwise`.
    Table {
        map: BTreeMap<Score, OutcomeProbs>,
        otherwise: OutcomeProbs,
    },
    /// Defer with probability `q(score)` first, otherwise apply the inner
    /// rule.
    WithDeferral {
        q: BTreeMap<Score, f64>,
        inner: Box<DecisionRule>,
    },
}

impl DecisionRule {
    pub fn table(map: BTreeMap<Score, OutcomeProbs>) -> Self {
        DecisionRule::Table {
            map,
            otherwise: OutcomeProbs::DEFER,
        }
    }

    pub fn outcome(&self, score: Score) -> OutcomeProbs {
        match self {
            DecisionRule::Constant(probs) => *probs,
            DecisionRule::Threshold { tau, r } => {
                if score > *tau {
                    OutcomeProbs::POSITIVE
                } else if score < *tau {
                    OutcomeProbs::NEGATIVE
                } else {
                    OutcomeProbs {
                        neg: 1.0 - r,
                        pos: *r,
                        defer: 0.0,
                    }
                }
            }
            DecisionRule::DeferBand { tau0, tau1, r0, r1 } => {
                if score > *tau1 {
                    OutcomeProbs::POSITIVE
                } else if score < *tau0 {
                    OutcomeProbs::NEGATIVE
                } else if tau0 == tau1 {
                    OutcomeProbs {
                        neg: *r0,
                        pos: *r1,
                        defer: 1.0 - r0 - r1,
                    }
                } else if score == *tau1 {
                    OutcomeProbs {
                        neg: 0.0,
                        pos: *r1,
                        defer: 1.0 - r1,
                    }
                } else if score == *tau0 {
                    OutcomeProbs {
                        neg: *r0,
                        pos: 0.0,
                        defer: 1.0 - r0,
                    }
                } else {
                    OutcomeProbs::DEFER
                }
            }
            DecisionRule::Table { map, otherwise } => {
                map.get(&score).copied().unwrap_or(*otherwise)
            }
            DecisionRule::WithDeferral { q, inner } => {
                let qd = q.get(&score).copied().unwrap_or(0.0);
                let base = inner.outcome(score);
                OutcomeProbs {
                    neg: (1.0 - qd) * base.neg,
                    pos: (1.0 - qd) * base.pos,
                    defer: qd + (1.0 - qd) * base.defer,
                }
            }
        }
    }
}

/// A hard (possibly deferring) post-processing rule.
///
/// Standard constructors map an incoming deferral to a deferral with
/// probability 1; [`HardRule::with_defer_override`] exists to express rules
/// that violate this, which some verification suites need as counterexamples.
#[derive(Debug, Clone, PartialEq)]
pub struct HardRule {
    scope: RuleScope,
    on_defer: OutcomeProbs,
}

#[derive(Debug, Clone, PartialEq)]
enum RuleScope {
    Blind(DecisionRule),
    PerGroup(BTreeMap<GroupId, DecisionRule>),
}

impl HardRule {
    pub fn blind(rule: DecisionRule) -> Self {
        Self {
            scope: RuleScope::Blind(rule),
            on_defer: OutcomeProbs::DEFER,
        }
    }

    pub fn per_group(rules: BTreeMap<GroupId, DecisionRule>) -> Self {
        Self {
            scope: RuleScope::PerGroup(rules),
            on_defer: OutcomeProbs::DEFER,
        }
    }

    pub fn with_defer_override(mut self, on_defer: OutcomeProbs) -> Self {
        self.on_defer = on_defer;
        self
    }

    /// Behavior independent of group identity.
    pub fn is_group_blind(&self) -> bool {
        match &self.scope {
            RuleScope::Blind(_) => true,
            RuleScope::PerGroup(map) => {
                let mut values = map.values();
                match values.next() {
                    Some(first) => values.all(|r| r == first),
                    None => true,
                }
            }
        }
    }

    /// Maps an incoming deferral to a deferral with probability 1.
    pub fn propagates_defer(&self) -> bool {
        self.on_defer == OutcomeProbs::DEFER
    }

    pub fn on_defer(&self) -> OutcomeProbs {
        self.on_defer
    }

    pub fn decision_for(&self, group: &GroupId) -> Option<&DecisionRule> {
        match &self.scope {
            RuleScope::Blind(rule) => Some(rule),
            RuleScope::PerGroup(map) => map.get(group),
        }
    }

    pub fn outcome(&self, group: &GroupId, score: Score) -> Option<OutcomeProbs> {
        self.decision_for(group).map(|r| r.outcome(score))
    }
}

// --- generic probability arithmetic ----------------------------------------

/// Field the statistics are computed in: `f64` or exact rationals.
pub trait Probability:
    Clone
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Zero
    + One
{
    /// Exact embedding of an `f64` (every finite `f64` is a rational).
    fn from_f64_exact(x: f64) -> Self;
    fn approx_f64(&self) -> f64;
}

impl Probability for f64 {
    fn from_f64_exact(x: f64) -> Self {
        x
    }
    fn approx_f64(&self) -> f64 {
        *self
    }
}

impl Probability for BigRational {
    fn from_f64_exact(x: f64) -> Self {
        BigRational::from_float(x).expect("finite probability")
    }
    fn approx_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Joint-law accumulator: one row per (conditional positive rate, weight,
/// outcome distribution).
#[derive(Debug, Clone)]
pub(crate) struct StatsAccumulator<T> {
    base_rate: T,
    theta_pos: T,
    theta_neg: T,
    theta_defer: T,
    w_pos: T,
    w_neg: T,
    w_defer: T,
}

impl<T: Probability> StatsAccumulator<T> {
    pub(crate) fn new() -> Self {
        Self {
            base_rate: T::zero(),
            theta_pos: T::zero(),
            theta_neg: T::zero(),
            theta_defer: T::zero(),
            w_pos: T::zero(),
            w_neg: T::zero(),
            w_defer: T::zero(),
        }
    }

    /// Add a row with `Pr[Y = 1 | row] = positive_rate` and mass `weight`.
    pub(crate) fn add(&mut self, positive_rate: T, weight: T, outcome: OutcomeProbs) {
        let pos = T::from_f64_exact(outcome.pos);
        let neg = T::from_f64_exact(outcome.neg);
        let defer = T::from_f64_exact(outcome.defer);
        let wy = weight.clone() * positive_rate;
        self.base_rate = self.base_rate.clone() + wy.clone();
        self.theta_pos = self.theta_pos.clone() + weight.clone() * pos.clone();
        self.theta_neg = self.theta_neg.clone() + weight.clone() * neg.clone();
        self.theta_defer = self.theta_defer.clone() + weight * defer.clone();
        self.w_pos = self.w_pos.clone() + wy.clone() * pos;
        self.w_neg = self.w_neg.clone() + wy.clone() * neg;
        self.w_defer = self.w_defer.clone() + wy * defer;
    }

    pub(crate) fn finish(self) -> Stats<T> {
        let one = T::one;
        let zero = T::zero;
        let br = self.base_rate.clone();

        // E[S | predicted positive] and E[S | predicted negative].
        let esy1 = (!self.theta_pos.is_zero())
            .then(|| self.w_pos.clone() / self.theta_pos.clone());
        let esy0 = (!self.theta_neg.is_zero())
            .then(|| self.w_neg.clone() / self.theta_neg.clone());

        let ppv = esy1.clone();
        let npv = esy0.clone().map(|e| one() - e);

        let y0 = one() - br.clone();
        let y1 = br.clone();
        let y0_defer = self.theta_defer.clone() - self.w_defer.clone();
        let y1_defer = self.w_defer.clone();

        // FPR and cFPR share the numerator so they coincide bit-for-bit when
        // nothing defers.
        let fpr_num = esy1
            .as_ref()
            .map(|e| self.theta_pos.clone() * (one() - e.clone()))
            .unwrap_or_else(zero);
        let fpr = (y0 > zero()).then(|| fpr_num.clone() / y0.clone());
        let cfpr_den = y0.clone() - y0_defer;
        let cfpr = (cfpr_den > zero()).then(|| fpr_num / cfpr_den);

        let fnr_num = esy0
            .as_ref()
            .map(|e| self.theta_neg.clone() * e.clone())
            .unwrap_or_else(zero);
        let fnr = (y1 > zero()).then(|| fnr_num.clone() / y1.clone());
        let cfnr_den = y1.clone() - y1_defer;
        let cfnr = (cfnr_den > zero()).then(|| fnr_num / cfnr_den);

        let ufpr = (y0 > zero())
            .then(|| (self.theta_pos.clone() - self.w_pos.clone()) / y0.clone());
        let ufnr = (y1 > zero()).then(|| self.w_neg.clone() / y1.clone());
        let tn_based_error = (y0 > zero())
            .then(|| one() - (self.theta_neg.clone() - self.w_neg.clone()) / y0);

        Stats {
            base_rate: br,
            positive_rate: self.theta_pos,
            negative_rate: self.theta_neg,
            defer_rate: self.theta_defer,
            ppv,
            npv,
            fpr,
            fnr,
            cfpr,
            cfnr,
            ufpr,
            ufnr,
            tn_based_error,
        }
    }
}

/// The full statistic vector in an arbitrary probability field.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats<T> {
    pub base_rate: T,
    pub positive_rate: T,
    pub negative_rate: T,
    pub defer_rate: T,
    pub ppv: Option<T>,
    pub npv: Option<T>,
    pub fpr: Option<T>,
    pub fnr: Option<T>,
    pub cfpr: Option<T>,
    pub cfnr: Option<T>,
    pub ufpr: Option<T>,
    pub ufnr: Option<T>,
    pub tn_based_error: Option<T>,
}

/// Exact-rational statistics.
pub type ExactGroupStats = Stats<BigRational>;

/// Group statistic vector with undefined entries absent.
///
/// `positive_rate` (the theta of the base-rate convex combination) and the
/// defer mass ride along so the identities they appear in stay testable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub base_rate: f64,
    pub positive_rate: f64,
    pub negative_rate: f64,
    pub defer_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub npv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cfpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cfnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ufpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ufnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tn_based_error: Option<f64>,
}

impl From<Stats<f64>> for GroupStats {
    fn from(core: Stats<f64>) -> Self {
        GroupStats {
            base_rate: core.base_rate,
            positive_rate: core.positive_rate,
            negative_rate: core.negative_rate,
            defer_rate: core.defer_rate,
            ppv: core.ppv,
            npv: core.npv,
            fpr: core.fpr,
            fnr: core.fnr,
            cfpr: core.cfpr,
            cfnr: core.cfnr,
            ufpr: core.ufpr,
            ufnr: core.ufnr,
            tn_based_error: core.tn_based_error,
        }
    }
}

impl GroupStats {
    pub fn field(&self, field: StatField) -> Option<f64> {
        match field {
            StatField::BaseRate => Some(self.base_rate),
            StatField::PositiveRate => Some(self.positive_rate),
            StatField::DeferRate => Some(self.defer_rate),
            StatField::Ppv => self.ppv,
            StatField::Npv => self.npv,
            StatField::Fpr => self.fpr,
            StatField::Fnr => self.fnr,
            StatField::Cfpr => self.cfpr,
            StatField::Cfnr => self.cfnr,
            StatField::Ufpr => self.ufpr,
            StatField::Ufnr => self.ufnr,
            StatField::TnBasedError => self.tn_based_error,
        }
    }
}

fn stats_core<T: Probability>(ap: &AccuracyProfile, rule: &DecisionRule) -> Stats<T> {
    let mut acc = StatsAccumulator::new();
    for (score, mass) in ap.iter() {
        acc.add(
            T::from_f64_exact(score.value()),
            T::from_f64_exact(mass),
            rule.outcome(score),
        );
    }
    acc.finish()
}

/// Exact statistics of `rule` on a calibrated profile.
pub fn stats_analytic(ap: &AccuracyProfile, rule: &HardRule) -> Result<GroupStats, MetricsError> {
    let decision = rule
        .decision_for(ap.group())
        .ok_or_else(|| MetricsError::UnknownGroup(ap.group().clone()))?;
    Ok(stats_core::<f64>(ap, decision).into())
}

/// Same computation in exact rational arithmetic.
pub fn stats_analytic_exact(
    ap: &AccuracyProfile,
    rule: &HardRule,
) -> Result<ExactGroupStats, MetricsError> {
    let decision = rule
        .decision_for(ap.group())
        .ok_or_else(|| MetricsError::UnknownGroup(ap.group().clone()))?;
    Ok(stats_core::<BigRational>(ap, decision))
}

pub fn stats_analytic_family(
    family: &ProfileFamily,
    rule: &HardRule,
) -> Result<BTreeMap<GroupId, GroupStats>, MetricsError> {
    family
        .iter()
        .map(|(g, ap)| Ok((g.clone(), stats_analytic(ap, rule)?)))
        .collect()
}

// --- empirical evaluation ---------------------------------------------------

/// One dataset row as the metrics see it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub group: GroupId,
    pub score: Score,
    pub label: bool,
}

/// How randomized rules are evaluated on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Weight each row by the rule's outcome probabilities.
    Expectation,
    /// Draw one outcome per row from a seeded generator.
    Sampled { seed: u64 },
}

/// Per-group statistics of `rule` on labeled rows.
pub fn stats_empirical(
    rows: &[LabeledScore],
    rule: &HardRule,
    mode: EvalMode,
) -> Result<BTreeMap<GroupId, GroupStats>, MetricsError> {
    use rand::Rng;
    use rand::SeedableRng;

    if rows.is_empty() {
        return Err(MetricsError::EmptyData);
    }
    let mut counts: BTreeMap<GroupId, usize> = BTreeMap::new();
    for row in rows {
        *counts.entry(row.group.clone()).or_insert(0) += 1;
    }
    let mut rng = match mode {
        EvalMode::Sampled { seed } => Some(rand_chacha::ChaCha12Rng::seed_from_u64(seed)),
        EvalMode::Expectation => None,
    };
    let mut accs: BTreeMap<GroupId, StatsAccumulator<f64>> = BTreeMap::new();
    for row in rows {
        let outcome = rule
            .outcome(&row.group, row.score)
            .ok_or_else(|| MetricsError::UnknownGroup(row.group.clone()))?;
        let outcome = match rng.as_mut() {
            None => outcome,
            Some(rng) => {
                let u: f64 = rng.gen();
                if u < outcome.neg {
                    OutcomeProbs::NEGATIVE
                } else if u < outcome.neg + outcome.pos {
                    OutcomeProbs::POSITIVE
                } else {
                    OutcomeProbs::DEFER
                }
            }
        };
        let weight = 1.0 / counts[&row.group] as f64;
        accs.entry(row.group.clone())
            .or_insert_with(StatsAccumulator::new)
            .add(if row.label { 1.0 } else { 0.0 }, weight, outcome);
    }
    Ok(accs
        .into_iter()
        .map(|(g, acc)| (g, acc.finish().into()))
        .collect())
}

// --- identities and equalization checks --------------------------------------

/// Residual of the base-rate convex combination
/// `BR = PPV * theta + (1 - NPV) * (1 - theta)` with `theta = Pr[positive]`.
pub fn check_convex_combination(stats: &GroupStats) -> Result<f64, MetricsError> {
    if stats.defer_rate.abs() > PROB_TOL {
        return Err(MetricsError::MissingStatistic(
            "identity requires defer rate 0".into(),
        ));
    }
    let ppv = stats
        .ppv
        .ok_or_else(|| MetricsError::MissingStatistic("ppv".into()))?;
    let npv = stats
        .npv
        .ok_or_else(|| MetricsError::MissingStatistic("npv".into()))?;
    let theta = stats.positive_rate;
    Ok((stats.base_rate - (ppv * theta + (1.0 - npv) * (1.0 - theta))).abs())
}

/// Statistic selector for equalization checks and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatField {
    BaseRate,
    PositiveRate,
    DeferRate,
    Ppv,
    Npv,
    Fpr,
    Fnr,
    Cfpr,
    Cfnr,
    Ufpr,
    Ufnr,
    TnBasedError,
}

impl fmt::Display for StatField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StatField::BaseRate => "base_rate",
            StatField::PositiveRate => "positive_rate",
            StatField::DeferRate => "defer_rate",
            StatField::Ppv => "ppv",
            StatField::Npv => "npv",
            StatField::Fpr => "fpr",
            StatField::Fnr => "fnr",
            StatField::Cfpr => "cfpr",
            StatField::Cfnr => "cfnr",
            StatField::Ufpr => "ufpr",
            StatField::Ufnr => "ufnr",
            StatField::TnBasedError => "tn_based_error",
        };
        f.write_str(name)
    }
}

/// Per-field outcome of an equalization check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "gap")]
pub enum FieldGap {
    /// Defined in every group; carries the max pairwise gap.
    Gap(f64),
    /// Undefined in every group, which counts as equalized.
    SimultaneouslyUndefined,
    /// Defined in some groups but not others; never equalized.
    Mixed,
}

#[derive(Debug, Clone, Serialize)]
pub struct EqualizationReport {
    pub equalized: bool,
    pub tolerance: f64,
    pub gaps: BTreeMap<StatField, FieldGap>,
}

/// Check that each requested field has max pairwise gap at most `tolerance`
/// across groups, treating simultaneously undefined fields as equalized.
pub fn assert_equalized(
    stats_by_group: &BTreeMap<GroupId, GroupStats>,
    fields: &[StatField],
    tolerance: f64,
) -> EqualizationReport {
    let mut gaps = BTreeMap::new();
    let mut equalized = true;
    for &field in fields {
        let values: Vec<Option<f64>> = stats_by_group
            .values()
            .map(|stats| stats.field(field))
            .collect();
        let gap = if values.iter().all(Option::is_none) {
            FieldGap::SimultaneouslyUndefined
        } else if values.iter().any(Option::is_none) {
            equalized = false;
            FieldGap::Mixed
        } else {
            let defined: Vec<f64> = values.into_iter().flatten().collect();
            let min = defined.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gap = max - min;
            if gap > tolerance {
                equalized = false;
            }
            FieldGap::Gap(gap)
        };
        gaps.insert(field, gap);
    }
    EqualizationReport {
        equalized,
        tolerance,
        gaps,
    }
}

/// Serialize per-group stats as CSV, one row per group, empty cells for
/// absent statistics.
pub fn stats_to_csv(stats_by_group: &BTreeMap<GroupId, GroupStats>) -> String {
    let mut out = String::from(
        "group,base_rate,positive_rate,negative_rate,defer_rate,ppv,npv,fpr,fnr,cfpr,cfnr,ufpr,ufnr,tn_based_error\n",
    );
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (group, s) in stats_by_group {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            group,
            s.base_rate,
            s.positive_rate,
            s.negative_rate,
            s.defer_rate,
            cell(s.ppv),
            cell(s.npv),
            cell(s.fpr),
            cell(s.fnr),
            cell(s.cfpr),
            cell(s.cfnr),
            cell(s.ufpr),
            cell(s.ufnr),
            cell(s.tn_based_error),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{profile, score};

    fn always(prediction: Prediction) -> HardRule {
        HardRule::blind(DecisionRule::Constant(OutcomeProbs::certain(prediction)))
    }

    #[test]
    fn always_positive_ppv_is_base_rate() {
        let ap = profile("g", &[(0.2, 0.25), (0.8, 0.75)]);
        let stats = stats_analytic(&ap, &always(Prediction::Positive)).unwrap();
        assert!((stats.ppv.unwrap() - 0.65).abs() < 1e-12);
        assert!(stats.npv.is_none());
        assert_eq!(stats.defer_rate, 0.0);
    }

    #[test]
    fn uniform_grid_threshold_at_half() {
        let n = 1000;
        let points: Vec<(f64, f64)> = (0..=n)
            .map(|i| (i as f64 / n as f64, 1.0 / (n + 1) as f64))
            .collect();
        let ap = profile("g", &points);
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.5),
            r: 1.0,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        assert!((stats.ppv.unwrap() - 0.75).abs() < 1e-3);
        assert!((stats.npv.unwrap() - 0.75).abs() < 1e-3);
        assert!((stats.cfpr.unwrap() - 0.25).abs() < 1e-3);
        assert!((stats.cfnr.unwrap() - 0.25).abs() < 1e-3);
    }

    #[test]
    fn defer_everything_leaves_conditionals_undefined() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let stats = stats_analytic(&ap, &always(Prediction::Defer)).unwrap();
        assert!(stats.ppv.is_none());
        assert!(stats.npv.is_none());
        assert!(stats.cfpr.is_none());
        assert!(stats.cfnr.is_none());
        assert_eq!(stats.defer_rate, 1.0);
        // Unconditional variants stay defined: deferrals are not errors...
        assert_eq!(stats.ufpr.unwrap(), 0.0);
        assert_eq!(stats.ufnr.unwrap(), 0.0);
        // ...while the true-negative-based measure counts them as errors.
        assert!((stats.tn_based_error.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_rates_match_plain_rates_without_deferrals() {
        let ap = profile("g", &[(0.1, 0.3), (0.4, 0.4), (0.9, 0.3)]);
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.4),
            r: 0.3,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        assert_eq!(stats.fpr, stats.cfpr);
        assert_eq!(stats.fnr, stats.cfnr);
    }

    #[test]
    fn deferral_accounting_ordering() {
        let ap = profile("g", &[(0.1, 0.3), (0.4, 0.4), (0.9, 0.3)]);
        let rule = HardRule::blind(DecisionRule::DeferBand {
            tau0: score(0.3),
            tau1: score(0.6),
            r0: 0.7,
            r1: 0.2,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        assert!(stats.ufpr.unwrap() <= stats.cfpr.unwrap() + 1e-15);
        assert!(stats.ufpr.unwrap() <= stats.tn_based_error.unwrap() + 1e-15);
    }

    #[test]
    fn convex_combination_identity() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.2),
            r: 0.4,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        assert!(check_convex_combination(&stats).unwrap() <= 1e-12);
    }

    #[test]
    fn convex_combination_requires_both_predictive_values() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let stats = stats_analytic(&ap, &always(Prediction::Positive)).unwrap();
        assert!(check_convex_combination(&stats).is_err());
    }

    #[test]
    fn convex_combination_rejects_deferring_rules() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let rule = HardRule::blind(DecisionRule::DeferBand {
            tau0: score(0.2),
            tau1: score(0.8),
            r0: 0.9,
            r1: 0.9,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        assert!(check_convex_combination(&stats).is_err());
    }

    #[test]
    fn empirical_ppv_from_counts() {
        let rows: Vec<LabeledScore> = (0..4)
            .map(|i| LabeledScore {
                group: "g".into(),
                score: score(0.75),
                label: i < 3,
            })
            .collect();
        let stats = stats_empirical(
            &rows,
            &always(Prediction::Positive),
            EvalMode::Expectation,
        )
        .unwrap();
        assert!((stats[&GroupId::from("g")].ppv.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn expectation_mode_is_row_order_invariant() {
        let mut rows = vec![
            LabeledScore {
                group: "g".into(),
                score: score(0.3),
                label: false,
            },
            LabeledScore {
                group: "g".into(),
                score: score(0.7),
                label: true,
            },
            LabeledScore {
                group: "g".into(),
                score: score(0.9),
                label: true,
            },
        ];
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.5),
            r: 0.5,
        });
        let a = stats_empirical(&rows, &rule, EvalMode::Expectation).unwrap();
        rows.reverse();
        let b = stats_empirical(&rows, &rule, EvalMode::Expectation).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_mode_is_reproducible() {
        let rows: Vec<LabeledScore> = (0..50)
            .map(|i| LabeledScore {
                group: "g".into(),
                score: score(if i % 2 == 0 { 0.3 } else { 0.7 }),
                label: i % 3 == 0,
            })
            .collect();
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.5),
            r: 0.5,
        });
        let a = stats_empirical(&rows, &rule, EvalMode::Sampled { seed: 7 }).unwrap();
        let b = stats_empirical(&rows, &rule, EvalMode::Sampled { seed: 7 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equalized_report_identical_stats() {
        let ap = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.2),
            r: 0.5,
        });
        let mut by_group = BTreeMap::new();
        by_group.insert(GroupId::from("a"), stats_analytic(&ap, &rule).unwrap());
        by_group.insert(
            GroupId::from("b"),
            stats_analytic(&ap.with_group("b"), &rule).unwrap(),
        );
        let report = assert_equalized(&by_group, &[StatField::Ppv, StatField::Npv], 1e-12);
        assert!(report.equalized);
        assert_eq!(report.gaps[&StatField::Ppv], FieldGap::Gap(0.0));
    }

    #[test]
    fn equalized_tolerance_semantics() {
        let mut by_group: BTreeMap<GroupId, GroupStats> = BTreeMap::new();
        let mk = |ppv: f64| GroupStats {
            base_rate: 0.5,
            positive_rate: 0.5,
            negative_rate: 0.5,
            defer_rate: 0.0,
            ppv: Some(ppv),
            npv: None,
            fpr: None,
            fnr: None,
            cfpr: None,
            cfnr: None,
            ufpr: None,
            ufnr: None,
            tn_based_error: None,
        };
        by_group.insert("a".into(), mk(0.70));
        by_group.insert("b".into(), mk(0.70 + 1e-10));
        let report = assert_equalized(&by_group, &[StatField::Ppv], 1e-9);
        assert!(report.equalized);
        // npv is undefined in both groups: simultaneously undefined is fine.
        let report = assert_equalized(&by_group, &[StatField::Npv], 1e-9);
        assert!(report.equalized);
    }

    #[test]
    fn constant_score_groups_cannot_equalize_ppv() {
        // Two one-point profiles at different base rates: any rule that
        // predicts positive in both groups pins each PPV to its base rate.
        let a = profile("a", &[(0.3, 1.0)]);
        let b = profile("b", &[(0.6, 1.0)]);
        let rule = always(Prediction::Positive);
        let mut by_group = BTreeMap::new();
        by_group.insert(GroupId::from("a"), stats_analytic(&a, &rule).unwrap());
        by_group.insert(GroupId::from("b"), stats_analytic(&b, &rule).unwrap());
        let report = assert_equalized(&by_group, &[StatField::Ppv], 1e-9);
        assert!(!report.equalized);
        assert_eq!(report.gaps[&StatField::Ppv], FieldGap::Gap(0.3));
    }

    #[test]
    fn defer_band_case_table() {
        let rule = DecisionRule::DeferBand {
            tau0: score(0.3),
            tau1: score(0.7),
            r0: 0.6,
            r1: 0.4,
        };
        assert_eq!(rule.outcome(score(0.1)), OutcomeProbs::NEGATIVE);
        assert_eq!(rule.outcome(score(0.9)), OutcomeProbs::POSITIVE);
        assert_eq!(rule.outcome(score(0.5)), OutcomeProbs::DEFER);
        let at0 = rule.outcome(score(0.3));
        assert!((at0.neg - 0.6).abs() < 1e-15 && at0.pos == 0.0);
        let at1 = rule.outcome(score(0.7));
        assert!((at1.pos - 0.4).abs() < 1e-15 && at1.neg == 0.0);

        let merged = DecisionRule::DeferBand {
            tau0: score(0.5),
            tau1: score(0.5),
            r0: 0.5,
            r1: 0.5,
        };
        let at = merged.outcome(score(0.5));
        assert!((at.pos - 0.5).abs() < 1e-15);
        assert!((at.neg - 0.5).abs() < 1e-15);
        assert!(at.defer.abs() < 1e-15);
    }

    #[test]
    fn group_blindness_detection() {
        let rule = DecisionRule::Threshold {
            tau: score(0.5),
            r: 1.0,
        };
        let mut map = BTreeMap::new();
        map.insert(GroupId::from("a"), rule.clone());
        map.insert(GroupId::from("b"), rule.clone());
        assert!(HardRule::per_group(map.clone()).is_group_blind());
        map.insert(
            GroupId::from("b"),
            DecisionRule::Threshold {
                tau: score(0.6),
                r: 1.0,
            },
        );
        assert!(!HardRule::per_group(map).is_group_blind());
        assert!(HardRule::blind(rule).is_group_blind());
    }

    #[test]
    fn defer_override_detected() {
        let rule = always(Prediction::Positive);
        assert!(rule.propagates_defer());
        let bad = rule.with_defer_override(OutcomeProbs::POSITIVE);
        assert!(!bad.propagates_defer());
    }
}
