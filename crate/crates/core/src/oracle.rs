//! Brute-force ground truth.
//!
//! Everything here recomputes statistics from first principles (the explicit
//! joint law over score, true type, and prediction) or sweeps exhaustive
//! parameter grids, so the constructions in the other modules have an
//! independent check. Enumeration runs in `f64` or, when callers need
//! rounding ruled out, in exact rational arithmetic; random generators
//! produce dyadic masses so the rational path applies to them verbatim.

use std::collections::BTreeMap;

use num::rational::BigRational;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::{
    DecisionRule, ExactGroupStats, GroupStats, HardRule, MetricsError, OutcomeProbs, Probability,
    Stats,
};
use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily, PROB_TOL};
use crate::score::Score;
use crate::thresholding::SearchPmf;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("support size {0} too large for exhaustive search (limit {1})")]
    SupportTooLarge(usize, usize),
    #[error("base rates must differ")]
    EqualBaseRates,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Exhaustive-search resolution settings.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    /// Step size for randomization probabilities.
    pub r_resolution: f64,
    /// Candidate thresholds; `None` means every support point.
    pub taus: Option<Vec<Score>>,
    /// Whether rule grids include deferring outcomes.
    pub deferring: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            r_resolution: 1e-3,
            taus: None,
            deferring: false,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(r_resolution: f64) -> Self {
        Self {
            r_resolution,
            ..Self::default()
        }
    }

    fn steps(&self) -> usize {
        (1.0 / self.r_resolution).round() as usize
    }

    fn r_values(&self) -> Vec<f64> {
        let steps = self.steps();
        (0..=steps).map(|k| k as f64 / steps as f64).collect()
    }
}

// --- joint enumeration -------------------------------------------------------

fn enumerate_core<T: Probability>(ap: &AccuracyProfile, rule: &DecisionRule) -> Stats<T> {
    let zero = T::zero;
    let one = T::one;
    // Joint buckets Pr[Y = y, prediction = o].
    let mut joint = [[zero(), zero(), zero()], [zero(), zero(), zero()]];
    for (score, mass) in ap.iter() {
        let outcome = rule.outcome(score);
        let m = T::from_f64_exact(mass);
        let s = T::from_f64_exact(score.value());
        let label_probs = [one() - s.clone(), s];
        let outcome_probs = [
            T::from_f64_exact(outcome.neg),
            T::from_f64_exact(outcome.pos),
            T::from_f64_exact(outcome.defer),
        ];
        for (y, label_p) in label_probs.iter().enumerate() {
            for (o, outcome_p) in outcome_probs.iter().enumerate() {
                joint[y][o] =
                    joint[y][o].clone() + m.clone() * label_p.clone() * outcome_p.clone();
            }
        }
    }

    let (neg, pos, defer) = (0usize, 1usize, 2usize);
    let y0 = joint[0][neg].clone() + joint[0][pos].clone() + joint[0][defer].clone();
    let y1 = joint[1][neg].clone() + joint[1][pos].clone() + joint[1][defer].clone();
    let theta_pos = joint[0][pos].clone() + joint[1][pos].clone();
    let theta_neg = joint[0][neg].clone() + joint[1][neg].clone();
    let theta_defer = joint[0][defer].clone() + joint[1][defer].clone();

    let ratio = |num: T, den: T| (!den.is_zero()).then(|| num / den);
    let y0_decided = joint[0][neg].clone() + joint[0][pos].clone();
    let y1_decided = joint[1][neg].clone() + joint[1][pos].clone();

    Stats {
        base_rate: y1.clone(),
        positive_rate: theta_pos.clone(),
        negative_rate: theta_neg.clone(),
        defer_rate: theta_defer,
        ppv: ratio(joint[1][pos].clone(), theta_pos),
        npv: ratio(joint[0][neg].clone(), theta_neg),
        fpr: ratio(joint[0][pos].clone(), y0.clone()),
        fnr: ratio(joint[1][neg].clone(), y1.clone()),
        cfpr: ratio(joint[0][pos].clone(), y0_decided),
        cfnr: ratio(joint[1][neg].clone(), y1_decided),
        ufpr: ratio(joint[0][pos].clone(), y0.clone()),
        ufnr: ratio(joint[1][neg].clone(), y1.clone()),
        tn_based_error: (!y0.is_zero())
            .then(|| T::one() - joint[0][neg].clone() / y0),
    }
}

/// Statistics from the explicit joint law `Pr[S, Y, prediction]`.
pub fn joint_enumerate_stats(
    ap: &AccuracyProfile,
    rule: &HardRule,
) -> Result<GroupStats, MetricsError> {
    let decision = rule
        .decision_for(ap.group())
        .ok_or_else(|| MetricsError::UnknownGroup(ap.group().clone()))?;
    Ok(enumerate_core::<f64>(ap, decision).into())
}

/// The same enumeration in exact rational arithmetic.
pub fn joint_enumerate_stats_exact(
    ap: &AccuracyProfile,
    rule: &HardRule,
) -> Result<ExactGroupStats, MetricsError> {
    let decision = rule
        .decision_for(ap.group())
        .ok_or_else(|| MetricsError::UnknownGroup(ap.group().clone()))?;
    Ok(enumerate_core::<BigRational>(ap, decision))
}

// --- random instances ---------------------------------------------------------

/// Distinct random support points on the 1/1000 lattice, ascending.
pub fn random_scores(rng: &mut impl Rng, n: usize) -> Vec<Score> {
    assert!(n <= 1001, "at most 1001 lattice points");
    let mut lattice: Vec<u32> = (0..=1000).collect();
    lattice.shuffle(rng);
    let mut picked: Vec<u32> = lattice.into_iter().take(n).collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| Score::new(i as f64 / 1000.0).expect("lattice point in range"))
        .collect()
}

/// Random dyadic masses (denominator 4096) over the given support. Dyadic
/// masses sum to exactly 1 in both `f64` and rational arithmetic.
pub fn random_masses(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    const DENOM: u32 = 4096;
    assert!(n >= 1 && n < DENOM as usize);
    let mut cuts: Vec<u32> = Vec::with_capacity(n + 1);
    cuts.push(0);
    cuts.push(DENOM);
    while cuts.len() < n + 1 {
        let c = rng.gen_range(1..DENOM);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.windows(2)
        .map(|w| (w[1] - w[0]) as f64 / DENOM as f64)
        .collect()
}

pub fn random_profile(
    rng: &mut impl Rng,
    group: impl Into<GroupId>,
    support_size: usize,
) -> AccuracyProfile {
    let scores = random_scores(rng, support_size);
    let masses = random_masses(rng, support_size);
    AccuracyProfile::new(group, scores.into_iter().zip(masses))
        .expect("random profile is valid")
}

/// Random family in which every group shares one support.
pub fn random_nice_family(
    rng: &mut impl Rng,
    groups: usize,
    support_size: usize,
) -> ProfileFamily {
    let scores = random_scores(rng, support_size);
    let profiles = (0..groups).map(|i| {
        let masses = random_masses(rng, support_size);
        AccuracyProfile::new(
            format!("g{i}"),
            scores.iter().copied().zip(masses),
        )
        .expect("random profile is valid")
    });
    ProfileFamily::new(profiles).expect("nonempty family")
}

/// Random dyadic outcome distribution (denominator 1024).
pub fn random_outcome(rng: &mut impl Rng, deferring: bool) -> OutcomeProbs {
    const DENOM: u32 = 1024;
    let pos = rng.gen_range(0..=DENOM);
    let rest = DENOM - pos;
    let neg = if deferring { rng.gen_range(0..=rest) } else { rest };
    let defer = DENOM - pos - neg;
    OutcomeProbs::new(
        neg as f64 / DENOM as f64,
        pos as f64 / DENOM as f64,
        defer as f64 / DENOM as f64,
    )
    .expect("dyadic outcome is a distribution")
}

/// Random per-score decision table over a support.
pub fn random_table_rule(
    rng: &mut impl Rng,
    support: &[Score],
    deferring: bool,
) -> DecisionRule {
    let map: BTreeMap<Score, OutcomeProbs> = support
        .iter()
        .map(|&s| (s, random_outcome(rng, deferring)))
        .collect();
    DecisionRule::table(map)
}

pub fn random_blind_rule(rng: &mut impl Rng, support: &[Score], deferring: bool) -> HardRule {
    HardRule::blind(random_table_rule(rng, support, deferring))
}

pub fn random_per_group_rule(
    rng: &mut impl Rng,
    family: &ProfileFamily,
    deferring: bool,
) -> HardRule {
    HardRule::per_group(
        family
            .iter()
            .map(|(g, ap)| {
                let support: Vec<Score> = ap.support().collect();
                (g.clone(), random_table_rule(rng, &support, deferring))
            })
            .collect(),
    )
}

// --- fixed instances -----------------------------------------------------------

/// Ten shared scores with one uniform group and one linearly increasing
/// group; group-blind thresholds favor the increasing group everywhere
/// except when only the top score is ever predicted positive.
pub fn uniform_vs_increasing_family() -> ProfileFamily {
    let support: Vec<Score> = (1..=10)
        .map(|i| Score::new(i as f64 / 10.0).expect("in range"))
        .collect();
    let g1 = AccuracyProfile::from_weights("g1", support.iter().map(|&s| (s, 1.0)))
        .expect("uniform weights");
    let g2 = AccuracyProfile::from_weights("g2", support.iter().map(|&s| (s, s.value())))
        .expect("increasing weights");
    ProfileFamily::new([g1, g2]).expect("two groups")
}

/// Decreasing versus increasing profiles on a shared 100-point support.
/// The slope constant keeps the decreasing weights strictly positive; the
/// lattice starts at 0.01 so the increasing profile has full support too.
pub fn decreasing_vs_increasing_family(a: f64) -> ProfileFamily {
    let support: Vec<Score> = (1..=100)
        .map(|i| Score::new(i as f64 / 100.0).expect("in range"))
        .collect();
    let g1 = AccuracyProfile::from_weights("g1", support.iter().map(|&s| (s, a - s.value())))
        .expect("decreasing weights");
    let g2 = AccuracyProfile::from_weights("g2", support.iter().map(|&s| (s, s.value())))
        .expect("increasing weights");
    ProfileFamily::new([g1, g2]).expect("two groups")
}

/// Instance constants for the simultaneous PPV/NPV threshold impossibility:
/// a uniform group versus a symmetric concave group on {0.1, ..., 0.9}.
/// Symmetry makes both base rates exactly one half.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ParabolaInstance {
    pub a: f64,
    pub b: f64,
}

impl Default for ParabolaInstance {
    fn default() -> Self {
        Self { a: 1.0, b: 0.2 }
    }
}

pub fn uniform_vs_parabola_family(instance: ParabolaInstance) -> ProfileFamily {
    let support: Vec<Score> = (1..=9)
        .map(|i| Score::new(i as f64 / 10.0).expect("in range"))
        .collect();
    let g1 = AccuracyProfile::from_weights("g1", support.iter().map(|&s| (s, 1.0)))
        .expect("uniform weights");
    let g2 = AccuracyProfile::from_weights(
        "g2",
        support
            .iter()
            .map(|&s| (s, instance.b - instance.a * (s.value() - 0.5).powi(2))),
    )
    .expect("parabola weights are positive for the default constants");
    ProfileFamily::new([g1, g2]).expect("two groups")
}

// --- verification reports --------------------------------------------------------

/// One-point profiles pin PPV to the base rate, so the PPV gap of any rule
/// that can predict positive in both groups is exactly the base-rate gap
/// (and the NPV gap likewise for rules that can predict negative).
#[derive(Debug, Clone, Serialize)]
pub struct ConstantScoreReport {
    pub br1: f64,
    pub br2: f64,
    pub expected_gap: f64,
    pub grid_points: usize,
    pub min_ppv_gap: f64,
    pub max_ppv_gap: f64,
    pub min_npv_gap: f64,
    pub max_npv_gap: f64,
    pub holds: bool,
}

pub fn verify_constant_score_impossibility(
    br1: f64,
    br2: f64,
    grid: &GridSpec,
) -> Result<ConstantScoreReport, OracleError> {
    if br1 == br2 {
        return Err(OracleError::EqualBaseRates);
    }
    let expected_gap = (br1 - br2).abs();
    let profiles = [
        AccuracyProfile::new("g1", [(Score::new(br1).expect("base rate"), 1.0)])
            .expect("one-point profile"),
        AccuracyProfile::new("g2", [(Score::new(br2).expect("base rate"), 1.0)])
            .expect("one-point profile"),
    ];

    // PPV (resp. NPV) of a randomized one-point rule does not depend on the
    // positive probability, only on it being nonzero; sweep the grid anyway
    // and record the observed extremes.
    let mut ppvs = [Vec::new(), Vec::new()];
    let mut npvs = [Vec::new(), Vec::new()];
    let r_values = grid.r_values();
    for (i, ap) in profiles.iter().enumerate() {
        for &p in &r_values {
            let rule = HardRule::blind(DecisionRule::Constant(
                OutcomeProbs::new(1.0 - p, p, 0.0).expect("distribution"),
            ));
            let stats = joint_enumerate_stats(ap, &rule)?;
            if let Some(v) = stats.ppv {
                ppvs[i].push(v);
            }
            if let Some(v) = stats.npv {
                npvs[i].push(v);
            }
        }
    }

    let gaps = |a: &[f64], b: &[f64]| {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &x in a {
            for &y in b {
                let gap = (x - y).abs();
                min = min.min(gap);
                max = max.max(gap);
            }
        }
        (min, max)
    };
    let (min_ppv_gap, max_ppv_gap) = gaps(&ppvs[0], &ppvs[1]);
    let (min_npv_gap, max_npv_gap) = gaps(&npvs[0], &npvs[1]);
    let holds = (min_ppv_gap - expected_gap).abs() <= PROB_TOL
        && (max_ppv_gap - expected_gap).abs() <= PROB_TOL
        && (min_npv_gap - expected_gap).abs() <= PROB_TOL
        && (max_npv_gap - expected_gap).abs() <= PROB_TOL;
    Ok(ConstantScoreReport {
        br1,
        br2,
        expected_gap,
        grid_points: r_values.len(),
        min_ppv_gap,
        max_ppv_gap,
        min_npv_gap,
        max_npv_gap,
        holds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PpvNpvImpossibilityReport {
    pub instance: ParabolaInstance,
    pub r_resolution: f64,
    /// Grid points per group after excluding the trivializing families.
    pub grid_points_per_group: usize,
    /// Minimum over the grid of `max(|PPV gap|, |NPV gap|)`.
    pub delta_star: f64,
    pub witness: PpvNpvWitness,
    /// Best gap among rule pairs where some group's positive (negative) set
    /// is just the top (bottom) score. Those rules pin one statistic the
    /// trivializing way and can tune the other freely, so near-zero values
    /// here are expected and are not counterexamples.
    pub boundary_best_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PpvNpvWitness {
    pub tau1: f64,
    pub r1: f64,
    pub tau2: f64,
    pub r2: f64,
}

/// Exhaustive sweep over per-group (tau, R) pairs on the parabola instance:
/// no grid point equalizes PPV and NPV simultaneously, and `delta_star`
/// quantifies how far away the closest one stays.
///
/// Rules whose positive predictions live only on the top score, or whose
/// negative predictions live only on the bottom score, are excluded: they
/// pin PPV (respectively NPV) to the same value for both groups by
/// construction — the deferring analogue of the trivial equalizers — and the
/// impossibility argument's strict-dominance step needs at least two scores
/// on the conditioning side. Their best gap is still reported.
pub fn verify_ppv_npv_impossibility(
    instance: ParabolaInstance,
    grid: &GridSpec,
) -> PpvNpvImpossibilityReport {
    let family = uniform_vs_parabola_family(instance);
    let tables: Vec<Vec<(f64, f64, f64, f64)>> = family
        .iter()
        .map(|(_, ap)| threshold_value_table(ap, grid, true))
        .collect();
    let boundary_tables: Vec<Vec<(f64, f64, f64, f64)>> = family
        .iter()
        .map(|(_, ap)| threshold_value_table(ap, grid, false))
        .collect();

    let mut delta_star = f64::INFINITY;
    let mut witness = PpvNpvWitness {
        tau1: f64::NAN,
        r1: f64::NAN,
        tau2: f64::NAN,
        r2: f64::NAN,
    };
    for &(tau1, r1, ppv1, npv1) in &tables[0] {
        for &(tau2, r2, ppv2, npv2) in &tables[1] {
            let gap = (ppv1 - ppv2).abs().max((npv1 - npv2).abs());
            if gap < delta_star {
                delta_star = gap;
                witness = PpvNpvWitness { tau1, r1, tau2, r2 };
            }
        }
    }

    let mut boundary_best_gap = f64::INFINITY;
    for &(_, _, ppv1, npv1) in &boundary_tables[0] {
        for &(_, _, ppv2, npv2) in &boundary_tables[1] {
            let gap = (ppv1 - ppv2).abs().max((npv1 - npv2).abs());
            boundary_best_gap = boundary_best_gap.min(gap);
        }
    }

    PpvNpvImpossibilityReport {
        instance,
        r_resolution: grid.r_resolution,
        grid_points_per_group: tables[0].len(),
        delta_star,
        witness,
        boundary_best_gap,
    }
}

/// Non-trivial (tau, r) grid points with their PPV and NPV. With
/// `proper_only`, rules in the top-score-only or bottom-score-only families
/// are skipped; otherwise only those are kept.
fn threshold_value_table(
    ap: &AccuracyProfile,
    grid: &GridSpec,
    proper_only: bool,
) -> Vec<(f64, f64, f64, f64)> {
    let pmf = SearchPmf::from_profile(ap);
    let n = pmf.len();
    let taus: Vec<Score> = match &grid.taus {
        Some(taus) => taus.clone(),
        None => ap.support().collect(),
    };
    let mut out = Vec::new();
    for tau in taus {
        let Some(idx) = pmf.points().iter().position(|p| p.at == tau) else {
            continue;
        };
        for &r in &grid.r_values() {
            let top_only = idx == n - 1 || (idx == n - 2 && r == 0.0);
            let bottom_only = idx == 0 || (idx == 1 && r == 1.0);
            if (top_only || bottom_only) == proper_only {
                continue;
            }
            let (ppv, npv) = (pmf.ppv_at(idx, r), pmf.npv_at(idx, 1.0 - r));
            if let (Some(ppv), Some(npv)) = (ppv, npv) {
                out.push((tau.value(), r, ppv, npv));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupBlindThresholdReport {
    pub checked_ppv: usize,
    pub checked_npv: usize,
    /// Grid points whose positive predictions live only on the top score:
    /// the one family that does equalize PPV.
    pub skipped_top_only: usize,
    /// Grid points whose negative predictions live only on the bottom
    /// score: the one family that does equalize NPV.
    pub skipped_bottom_only: usize,
    /// Smallest strict PPV advantage of the increasing group.
    pub min_ppv_gap: f64,
    /// Smallest strict NPV advantage of the uniform group.
    pub min_npv_gap: f64,
    pub violations: usize,
    pub holds: bool,
}

/// On the uniform-versus-increasing instance, every group-blind threshold
/// that lets some score below the top be predicted positive gives the
/// increasing group strictly larger PPV, and every one that lets some score
/// above the bottom be predicted negative gives it strictly smaller NPV.
pub fn verify_group_blind_threshold_impossibility(grid: &GridSpec) -> GroupBlindThresholdReport {
    let family = uniform_vs_increasing_family();
    let pmfs: Vec<SearchPmf> = family
        .iter()
        .map(|(_, ap)| SearchPmf::from_profile(ap))
        .collect();
    let n = pmfs[0].len();

    let mut checked_ppv = 0usize;
    let mut checked_npv = 0usize;
    let mut skipped_top_only = 0usize;
    let mut skipped_bottom_only = 0usize;
    let mut min_ppv_gap = f64::INFINITY;
    let mut min_npv_gap = f64::INFINITY;
    let mut violations = 0usize;
    for idx in 0..n {
        for &r in &grid.r_values() {
            let top_only = idx == n - 1 || (idx == n - 2 && r == 0.0);
            if top_only {
                skipped_top_only += 1;
            } else if let (Some(ppv1), Some(ppv2)) =
                (pmfs[0].ppv_at(idx, r), pmfs[1].ppv_at(idx, r))
            {
                checked_ppv += 1;
                let gap = ppv2 - ppv1;
                if gap <= 0.0 {
                    violations += 1;
                }
                min_ppv_gap = min_ppv_gap.min(gap);
            }

            let bottom_only = idx == 0 || (idx == 1 && r == 1.0);
            if bottom_only {
                skipped_bottom_only += 1;
            } else if let (Some(npv1), Some(npv2)) =
                (pmfs[0].npv_at(idx, 1.0 - r), pmfs[1].npv_at(idx, 1.0 - r))
            {
                checked_npv += 1;
                let gap = npv1 - npv2;
                if gap <= 0.0 {
                    violations += 1;
                }
                min_npv_gap = min_npv_gap.min(gap);
            }
        }
    }
    GroupBlindThresholdReport {
        checked_ppv,
        checked_npv,
        skipped_top_only,
        skipped_bottom_only,
        min_ppv_gap,
        min_npv_gap,
        violations,
        holds: violations == 0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaMinimalityReport {
    pub closed_form_delta: f64,
    pub grid_resolution: f64,
    /// Smallest deferral mass among grid policies that reproduce the target.
    pub best_matching_delta: Option<f64>,
    pub support_violation: bool,
    pub holds: bool,
}

/// Grid-search deferral vectors on supports of size at most three and check
/// that nothing below the closed-form deferral mass (minus grid slack)
/// reproduces the target conditional distribution.
pub fn verify_delta_minimality(
    ap: &AccuracyProfile,
    target: &AccuracyProfile,
    q_resolution: f64,
) -> Result<DeltaMinimalityReport, OracleError> {
    const MAX_SUPPORT: usize = 3;
    if ap.support_len() > MAX_SUPPORT {
        return Err(OracleError::SupportTooLarge(ap.support_len(), MAX_SUPPORT));
    }
    let closed_form = match crate::deferral::build_policy_to_target(ap, target) {
        Ok(policy) => policy.delta(),
        Err(crate::deferral::DeferralError::SupportViolation(_)) => {
            return Ok(DeltaMinimalityReport {
                closed_form_delta: f64::NAN,
                grid_resolution: q_resolution,
                best_matching_delta: None,
                support_violation: true,
                holds: true,
            });
        }
        Err(_) => unreachable!("policy construction only fails on support violations"),
    };

    let support: Vec<(Score, f64)> = ap.iter().collect();
    let steps = (1.0 / q_resolution).round() as usize;
    let levels: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let slack = q_resolution;

    let mut best_matching: Option<f64> = None;
    let mut holds = true;
    let mut q = vec![0usize; support.len()];
    loop {
        let delta: f64 = support
            .iter()
            .zip(&q)
            .map(|((_, mass), &qi)| mass * levels[qi])
            .sum();
        if 1.0 - delta > PROB_TOL {
            let matches = support.iter().zip(&q).all(|((s, mass), &qi)| {
                let retained = mass * (1.0 - levels[qi]) / (1.0 - delta);
                (retained - target.mass(*s)).abs() <= 1e-9
            });
            if matches {
                if best_matching.map_or(true, |b| delta < b) {
                    best_matching = Some(delta);
                }
                if delta < closed_form - slack {
                    holds = false;
                }
            }
        }
        // Advance the mixed-radix counter over q vectors.
        let mut dim = 0;
        loop {
            if dim == q.len() {
                return Ok(DeltaMinimalityReport {
                    closed_form_delta: closed_form,
                    grid_resolution: q_resolution,
                    best_matching_delta: best_matching,
                    support_violation: false,
                    holds,
                });
            }
            q[dim] += 1;
            if q[dim] <= steps {
                break;
            }
            q[dim] = 0;
            dim += 1;
        }
    }
}
