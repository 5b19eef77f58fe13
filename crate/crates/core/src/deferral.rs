//! Deferral policies that reshape score distributions.
//!
//! A policy defers on score `s` in group `g` with probability `Q(s, g)`,
//! independently of the true type. Conditioned on not deferring, the group's
//! score PMF becomes `P(s) (1 - Q(s)) / (1 - delta)` with
//! `delta = sum_s P(s) Q(s)`, and any PMF supported inside the original
//! support is reachable this way. Equalizing conditional PMFs across groups
//! makes every group-blind, defer-propagating hard rule equalize PPV, NPV,
//! and the conditional error rates.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use crate::metrics::{DecisionRule, HardRule};
use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily, PROB_TOL};
use crate::score::Score;

#[derive(Debug, Error)]
pub enum DeferralError {
    #[error("deferral probability {0} at score {1} outside [0, 1]")]
    BadProbability(f64, Score),
    #[error("group {0}: policy defers on everything; conditional distribution undefined")]
    AllDeferred(GroupId),
    #[error("target support is not contained in the profile support (missing {0})")]
    SupportViolation(Score),
    #[error("group {0} is missing from the family")]
    UnknownGroup(GroupId),
    #[error("common support of the profile family is empty")]
    EmptyCommonSupport,
    #[error("rule must be group blind")]
    NotGroupBlind,
    #[error("rule must defer on an incoming deferral")]
    DoesNotPropagateDefer,
    #[error("malformed policy JSON: {0}")]
    Json(String),
}

/// Score-level deferral probabilities for one group, with the total deferral
/// mass they induce on that group's profile.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferralPolicy {
    group: GroupId,
    q: BTreeMap<Score, f64>,
    delta: f64,
}

impl DeferralPolicy {
    /// Validate `q` against the profile and compute the deferral mass.
    pub fn new(
        ap: &AccuracyProfile,
        q: impl IntoIterator<Item = (Score, f64)>,
    ) -> Result<Self, DeferralError> {
        let q: BTreeMap<Score, f64> = q.into_iter().collect();
        for (&s, &p) in &q {
            if !p.is_finite() || !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
                return Err(DeferralError::BadProbability(p, s));
            }
        }
        let delta = ap
            .iter()
            .map(|(s, mass)| mass * q.get(&s).copied().unwrap_or(0.0))
            .sum();
        Ok(Self {
            group: ap.group().clone(),
            q,
            delta,
        })
    }

    /// The identity policy: never defer.
    pub fn zero(ap: &AccuracyProfile) -> Self {
        Self {
            group: ap.group().clone(),
            q: BTreeMap::new(),
            delta: 0.0,
        }
    }

    pub fn group(&self) -> &GroupId {
        &self.group
    }

    /// Deferral probability at a score (zero off the map).
    pub fn q(&self, score: Score) -> f64 {
        self.q.get(&score).copied().unwrap_or(0.0).clamp(0.0, 1.0)
    }

    /// Total deferral mass on the profile the policy was built against.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn iter(&self) -> impl Iterator<Item = (Score, f64)> + '_ {
        self.q.iter().map(|(s, p)| (*s, *p))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "group": self.group.as_str(),
            "delta": self.delta,
            "q": self
                .q
                .iter()
                .map(|(s, p)| serde_json::json!({"score": s.value(), "p": p}))
                .collect::<Vec<_>>(),
        })
    }
}

/// Score PMF conditioned on the policy not deferring.
pub fn conditional_ap(
    ap: &AccuracyProfile,
    policy: &DeferralPolicy,
) -> Result<AccuracyProfile, DeferralError> {
    let delta = policy.delta();
    if 1.0 - delta <= PROB_TOL {
        return Err(DeferralError::AllDeferred(ap.group().clone()));
    }
    let retained = ap
        .iter()
        .map(|(s, mass)| (s, mass * (1.0 - policy.q(s)) / (1.0 - delta)));
    AccuracyProfile::new(ap.group().clone(), retained)
        .map_err(|_| DeferralError::AllDeferred(ap.group().clone()))
}

/// The policy whose conditional PMF equals `target` exactly, with the least
/// possible deferral mass:
/// `delta = 1 - min_s P(s) / target(s)` over the target support, and
/// `Q(s) = 1 - (target(s) / P(s)) (1 - delta)` there, `Q = 1` elsewhere.
pub fn build_policy_to_target(
    ap: &AccuracyProfile,
    target: &AccuracyProfile,
) -> Result<DeferralPolicy, DeferralError> {
    let mut min_ratio = f64::INFINITY;
    for (s, t_mass) in target.iter() {
        let p_mass = ap.mass(s);
        if p_mass == 0.0 {
            return Err(DeferralError::SupportViolation(s));
        }
        min_ratio = min_ratio.min(p_mass / t_mass);
    }
    let q = ap.iter().map(|(s, p_mass)| {
        let t_mass = target.mass(s);
        let q = if t_mass == 0.0 {
            1.0
        } else {
            (1.0 - (t_mass / p_mass) * min_ratio).clamp(0.0, 1.0)
        };
        (s, q)
    });
    DeferralPolicy::new(ap, q)
}

/// Per-group deferral policies over a family.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFamily {
    policies: BTreeMap<GroupId, DeferralPolicy>,
}

impl PolicyFamily {
    pub fn new(policies: impl IntoIterator<Item = DeferralPolicy>) -> Self {
        Self {
            policies: policies
                .into_iter()
                .map(|p| (p.group().clone(), p))
                .collect(),
        }
    }

    pub fn get(&self, group: &GroupId) -> Option<&DeferralPolicy> {
        self.policies.get(group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &DeferralPolicy)> {
        self.policies.iter()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(self.policies.values().map(|p| p.to_json()).collect())
    }

    /// Conditional profiles of the whole family under these policies.
    pub fn conditional_family(&self, family: &ProfileFamily) -> Result<ProfileFamily, DeferralError> {
        let profiles = family
            .iter()
            .map(|(g, ap)| {
                let policy = self
                    .policies
                    .get(g)
                    .ok_or_else(|| DeferralError::UnknownGroup(g.clone()))?;
                conditional_ap(ap, policy)
            })
            .collect::<Result<Vec<_>, _>>()?;
        ProfileFamily::new(profiles).map_err(|_| DeferralError::EmptyCommonSupport)
    }

    /// Rows of (score, original mass, deferred mass, retained mass) per group
    /// for plotting.
    pub fn to_plot_csv(&self, family: &ProfileFamily) -> String {
        let mut out = String::from("group,score,mass,deferred_mass,retained_mass\n");
        for (g, ap) in family.iter() {
            if let Some(policy) = self.policies.get(g) {
                for (s, mass) in ap.iter() {
                    let deferred = mass * policy.q(s);
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        g,
                        s,
                        mass,
                        deferred,
                        mass - deferred
                    ));
                }
            }
        }
        out
    }
}

/// Defer only on non-anchor groups so every conditional profile matches the
/// anchor's.
pub fn strategy_match_group(
    family: &ProfileFamily,
    anchor: &GroupId,
) -> Result<PolicyFamily, DeferralError> {
    let anchor_ap = family
        .get(anchor)
        .ok_or_else(|| DeferralError::UnknownGroup(anchor.clone()))?;
    let mut policies = Vec::new();
    for (g, ap) in family.iter() {
        if g == anchor {
            policies.push(DeferralPolicy::zero(ap));
        } else {
            policies.push(build_policy_to_target(ap, anchor_ap)?);
        }
    }
    Ok(PolicyFamily::new(policies))
}

/// Defer every group toward the normalized pointwise minimum of the family.
/// For two groups this costs each group a deferral mass equal to their total
/// variation distance.
pub fn strategy_pointwise_min(family: &ProfileFamily) -> Result<PolicyFamily, DeferralError> {
    let target = family
        .pointwise_min_normalized()
        .map_err(|_| DeferralError::EmptyCommonSupport)?;
    let mut policies = Vec::new();
    for (_, ap) in family.iter() {
        policies.push(build_policy_to_target(ap, &target)?);
    }
    Ok(PolicyFamily::new(policies))
}

/// Compose per-group deferral policies with a group-blind hard rule: defer
/// with probability `Q(s, g)`, otherwise decide by the blind rule.
pub fn compose_with_blind_rule(
    policies: &PolicyFamily,
    blind_rule: &HardRule,
) -> Result<HardRule, DeferralError> {
    if !blind_rule.is_group_blind() {
        return Err(DeferralError::NotGroupBlind);
    }
    if !blind_rule.propagates_defer() {
        return Err(DeferralError::DoesNotPropagateDefer);
    }
    let decisions = policies
        .iter()
        .map(|(g, policy)| {
            let inner = blind_rule
                .decision_for(g)
                .expect("blind rule covers every group")
                .clone();
            (
                g.clone(),
                DecisionRule::WithDeferral {
                    q: policy.iter().collect(),
                    inner: Box::new(inner),
                },
            )
        })
        .collect();
    Ok(HardRule::per_group(decisions))
}

#[derive(Debug, Deserialize)]
struct PolicyJson {
    group: String,
    q: Vec<PolicyPointJson>,
}

#[derive(Debug, Deserialize)]
struct PolicyPointJson {
    score: f64,
    p: f64,
}

impl DeferralPolicy {
    /// Parse `{"group", "delta", "q": [{"score", "p"}]}`, recomputing delta
    /// against the profile.
    pub fn from_json(
        value: &serde_json::Value,
        ap: &AccuracyProfile,
        grid: &crate::score::ScoreGrid,
    ) -> Result<Self, DeferralError> {
        let doc: PolicyJson = serde_json::from_value(value.clone())
            .map_err(|e| DeferralError::Json(e.to_string()))?;
        let mut q = Vec::with_capacity(doc.q.len());
        for point in doc.q {
            let s = grid
                .snap(point.score)
                .map_err(|e| DeferralError::Json(e.to_string()))?;
            q.push((s, point.p));
        }
        let policy = DeferralPolicy::new(ap, q)?;
        if policy.group() != &GroupId::from(doc.group.as_str()) {
            return Err(DeferralError::UnknownGroup(GroupId::from(doc.group.as_str())));
        }
        Ok(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{
        assert_equalized, stats_analytic_family, OutcomeProbs, StatField,
    };
    use crate::profiles::tv_distance;
    use crate::testutil::{family, profile, score};

    #[test]
    fn identity_policy_is_a_fixed_point() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let policy = DeferralPolicy::zero(&ap);
        assert_eq!(policy.delta(), 0.0);
        assert_eq!(conditional_ap(&ap, &policy).unwrap(), ap);
    }

    #[test]
    fn conditional_ap_drops_the_deferred_point() {
        let third = 1.0 / 3.0;
        let ap = profile("g", &[(0.0, third), (0.5, third), (1.0, third)]);
        let policy = DeferralPolicy::new(
            &ap,
            [(score(0.0), 0.0), (score(0.5), 1.0), (score(1.0), 0.0)],
        )
        .unwrap();
        assert!((policy.delta() - third).abs() < 1e-12);
        let cond = conditional_ap(&ap, &policy).unwrap();
        assert_eq!(cond.support_len(), 2);
        assert!((cond.mass(score(0.0)) - 0.5).abs() < 1e-12);
        assert!((cond.mass(score(1.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deferring_everything_is_an_error() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let policy =
            DeferralPolicy::new(&ap, [(score(0.2), 1.0), (score(0.8), 1.0)]).unwrap();
        assert!(matches!(
            conditional_ap(&ap, &policy),
            Err(DeferralError::AllDeferred(_))
        ));
    }

    #[test]
    fn policy_to_identical_target_never_defers() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let policy = build_policy_to_target(&ap, &ap).unwrap();
        assert_eq!(policy.delta(), 0.0);
        for (_, q) in policy.iter() {
            assert_eq!(q, 0.0);
        }
    }

    #[test]
    fn policy_to_smaller_support_target() {
        let third = 1.0 / 3.0;
        let ap = profile("g", &[(0.0, third), (0.5, third), (1.0, third)]);
        let target = profile("t", &[(0.0, 0.5), (1.0, 0.5)]);
        let policy = build_policy_to_target(&ap, &target).unwrap();
        assert!((policy.delta() - third).abs() < 1e-12);
        assert!(policy.q(score(0.0)).abs() < 1e-12);
        assert!((policy.q(score(0.5)) - 1.0).abs() < 1e-12);
        assert!(policy.q(score(1.0)).abs() < 1e-12);
        let cond = conditional_ap(&ap, &policy).unwrap();
        for (s, p) in target.iter() {
            assert!((cond.mass(s) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_target_outside_support_is_rejected() {
        let ap = profile("g", &[(0.2, 0.5), (0.8, 0.5)]);
        let target = profile("t", &[(0.2, 0.5), (0.5, 0.5)]);
        assert!(matches!(
            build_policy_to_target(&ap, &target),
            Err(DeferralError::SupportViolation(_))
        ));
    }

    #[test]
    fn match_group_strategy_defers_only_off_anchor() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let b = profile("b", &[(0.2, 0.3), (0.8, 0.7)]);
        let fam = family(&[a.clone(), b.clone()]);
        let policies = strategy_match_group(&fam, &"b".into()).unwrap();
        assert_eq!(policies.get(&"b".into()).unwrap().delta(), 0.0);
        let delta_a = policies.get(&"a".into()).unwrap().delta();
        assert!((delta_a - 2.0 / 7.0).abs() < 1e-12);
        let cond = policies.conditional_family(&fam).unwrap();
        for (s, p) in b.iter() {
            assert!((cond.get(&"a".into()).unwrap().mass(s) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn match_group_equal_profiles_never_defers() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[a.clone(), a.with_group("b")]);
        let policies = strategy_match_group(&fam, &"a".into()).unwrap();
        for (_, p) in policies.iter() {
            assert_eq!(p.delta(), 0.0);
        }
    }

    #[test]
    fn match_group_support_violation() {
        // The anchor has support the other group lacks.
        let a = profile("a", &[(0.2, 1.0)]);
        let b = profile("b", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[a, b]);
        assert!(matches!(
            strategy_match_group(&fam, &"b".into()),
            Err(DeferralError::SupportViolation(_))
        ));
    }

    #[test]
    fn pointwise_min_strategy_equalizes_deferral_rate_at_tv_distance() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let b = profile("b", &[(0.2, 0.3), (0.8, 0.7)]);
        let tv = tv_distance(&a, &b);
        let fam = family(&[a, b]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        for (_, p) in policies.iter() {
            assert!((p.delta() - tv).abs() < 1e-12);
        }
        assert!((tv - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pointwise_min_equal_profiles_no_deferrals() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[a.clone(), a.with_group("b")]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        for (_, p) in policies.iter() {
            assert_eq!(p.delta(), 0.0);
        }
    }

    #[test]
    fn pointwise_min_disjoint_supports() {
        let fam = family(&[profile("a", &[(0.0, 1.0)]), profile("b", &[(1.0, 1.0)])]);
        assert!(matches!(
            strategy_pointwise_min(&fam),
            Err(DeferralError::EmptyCommonSupport)
        ));
    }

    #[test]
    fn composed_always_positive_equalizes_ppv_at_conditional_mean() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let b = profile("b", &[(0.2, 0.3), (0.8, 0.7)]);
        let fam = family(&[a, b]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        let blind = HardRule::blind(DecisionRule::Constant(OutcomeProbs::POSITIVE));
        let composed = compose_with_blind_rule(&policies, &blind).unwrap();
        let stats = stats_analytic_family(&fam, &composed).unwrap();
        let report = assert_equalized(&stats, &[StatField::Ppv], 1e-12);
        assert!(report.equalized);
        let shared = policies
            .conditional_family(&fam)
            .unwrap()
            .get(&"a".into())
            .unwrap()
            .base_rate();
        for s in stats.values() {
            assert!((s.ppv.unwrap() - shared).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_threshold_equalizes_all_conditional_stats() {
        let a = profile("a", &[(0.1, 0.3), (0.5, 0.4), (0.9, 0.3)]);
        let b = profile("b", &[(0.1, 0.5), (0.5, 0.2), (0.9, 0.3)]);
        let fam = family(&[a, b]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        let blind = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.5),
            r: 0.5,
        });
        let composed = compose_with_blind_rule(&policies, &blind).unwrap();
        let stats = stats_analytic_family(&fam, &composed).unwrap();
        let report = assert_equalized(
            &stats,
            &[StatField::Ppv, StatField::Npv, StatField::Cfpr, StatField::Cfnr],
            1e-12,
        );
        assert!(report.equalized, "gaps: {:?}", report.gaps);
    }

    #[test]
    fn compose_rejects_group_aware_rules() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[a.clone(), a.with_group("b")]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        let mut per_group = std::collections::BTreeMap::new();
        per_group.insert(
            GroupId::from("a"),
            DecisionRule::Constant(OutcomeProbs::POSITIVE),
        );
        per_group.insert(
            GroupId::from("b"),
            DecisionRule::Constant(OutcomeProbs::NEGATIVE),
        );
        let aware = HardRule::per_group(per_group);
        assert!(matches!(
            compose_with_blind_rule(&policies, &aware),
            Err(DeferralError::NotGroupBlind)
        ));
    }

    #[test]
    fn compose_rejects_rules_that_decide_on_deferrals() {
        let a = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[a.clone(), a.with_group("b")]);
        let policies = strategy_pointwise_min(&fam).unwrap();
        let bad = HardRule::blind(DecisionRule::Constant(OutcomeProbs::POSITIVE))
            .with_defer_override(OutcomeProbs::POSITIVE);
        assert!(matches!(
            compose_with_blind_rule(&policies, &bad),
            Err(DeferralError::DoesNotPropagateDefer)
        ));
    }

    #[test]
    fn calibration_is_preserved_on_retained_mass() {
        // Deferral is independent of the true type given the score, so the
        // retained buckets stay calibrated: the conditional profile is still
        // a valid profile whose mean is the conditional base rate.
        let ap = profile("g", &[(0.1, 0.25), (0.4, 0.5), (0.9, 0.25)]);
        let policy = DeferralPolicy::new(
            &ap,
            [(score(0.1), 0.5), (score(0.4), 0.2), (score(0.9), 0.0)],
        )
        .unwrap();
        let cond = conditional_ap(&ap, &policy).unwrap();
        // Retained joint positive mass at s is s * P(s) (1 - Q(s)); dividing
        // by retained total mass leaves Pr[Y = 1 | s, kept] = s.
        for (s, _) in cond.iter() {
            let kept = ap.mass(s) * (1.0 - policy.q(s));
            let kept_pos = s.value() * ap.mass(s) * (1.0 - policy.q(s));
            assert!((kept_pos / kept - s.value()).abs() < 1e-12);
        }
    }
}
