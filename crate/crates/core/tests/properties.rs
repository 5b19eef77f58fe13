//! Property tests for the numerical invariants the constructions rest on.

use std::collections::BTreeMap;

use proptest::prelude::*;

use fairpost::deferral::{build_policy_to_target, compose_with_blind_rule, conditional_ap};
use fairpost::metrics::{
    assert_equalized, check_convex_combination, stats_analytic, stats_analytic_family,
    DecisionRule, HardRule, OutcomeProbs, StatField,
};
use fairpost::oracle;
use fairpost::profiles::{tv_distance, AccuracyProfile, GroupId, ProfileFamily};
use fairpost::score::Score;
use fairpost::thresholding::{equalize_ppv, ThresholdRule};

fn score(v: f64) -> Score {
    Score::new(v).unwrap()
}

fn arb_profile(max_points: usize) -> impl Strategy<Value = AccuracyProfile> {
    prop::collection::btree_set(0u32..=1000, 1..=max_points).prop_flat_map(|scores| {
        let n = scores.len();
        prop::collection::vec(1u32..=64, n).prop_map(move |weights| {
            AccuracyProfile::from_weights(
                "g",
                scores
                    .iter()
                    .zip(&weights)
                    .map(|(&s, &w)| (score(s as f64 / 1000.0), w as f64)),
            )
            .unwrap()
        })
    })
}

fn arb_outcome() -> impl Strategy<Value = OutcomeProbs> {
    (0u32..=1024, 0u32..=1024)
        .prop_filter("distribution", |(pos, neg)| pos + neg <= 1024)
        .prop_map(|(pos, neg)| {
            OutcomeProbs::new(
                neg as f64 / 1024.0,
                pos as f64 / 1024.0,
                (1024 - pos - neg) as f64 / 1024.0,
            )
            .unwrap()
        })
}

fn blind_table_rule(support: &[Score], outcomes: &[OutcomeProbs]) -> HardRule {
    let map: BTreeMap<Score, OutcomeProbs> = support
        .iter()
        .copied()
        .zip(outcomes.iter().copied())
        .collect();
    HardRule::blind(DecisionRule::table(map))
}

proptest! {
    #[test]
    fn base_rate_lies_in_the_support_hull(ap in arb_profile(12)) {
        let br = ap.base_rate();
        prop_assert!(br >= ap.min_support().value() - 1e-12);
        prop_assert!(br <= ap.max_support().value() + 1e-12);
    }

    #[test]
    fn tv_distance_is_a_metric(
        a in arb_profile(10),
        b in arb_profile(10),
        c in arb_profile(10),
    ) {
        let ab = tv_distance(&a, &b);
        let ba = tv_distance(&b, &a);
        prop_assert!((ab - ba).abs() <= 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!(tv_distance(&a, &a) == 0.0);
        // Identity of indiscernibles on the shared grid.
        if ab == 0.0 {
            let same = a.support().eq(b.support())
                && a.iter().zip(b.iter()).all(|((_, pa), (_, pb))| pa == pb);
            prop_assert!(same);
        }
        let ac = tv_distance(&a, &c);
        let cb = tv_distance(&c, &b);
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn pointwise_min_is_dominated_after_unnormalizing(
        a in arb_profile(8),
        b in arb_profile(8),
    ) {
        let fam = ProfileFamily::new([a.clone(), b.with_group("h")]).unwrap();
        if let Ok(min) = fam.pointwise_min_normalized() {
            let total: f64 = min.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let clipped = fam.pointwise_min_total();
            for (s, p) in min.iter() {
                for (_, ap) in fam.iter() {
                    prop_assert!(p * clipped <= ap.mass(s) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn predictive_values_match_conditional_expectations(
        ap in arb_profile(10),
        outcomes in prop::collection::vec(arb_outcome(), 10),
    ) {
        // The production formulas against the explicit joint law.
        let support: Vec<Score> = ap.support().collect();
        let rule = blind_table_rule(&support, &outcomes[..support.len()]);
        let fast = stats_analytic(&ap, &rule).unwrap();
        let slow = oracle::joint_enumerate_stats(&ap, &rule).unwrap();
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (None, None) => true,
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            _ => false,
        };
        prop_assert!(close(fast.ppv, slow.ppv));
        prop_assert!(close(fast.npv, slow.npv));
        prop_assert!(close(fast.fpr, slow.fpr));
        prop_assert!(close(fast.fnr, slow.fnr));
    }

    #[test]
    fn conditional_rates_equal_plain_rates_without_deferrals(
        ap in arb_profile(10),
        taus in prop::collection::vec(0u32..=1000, 1),
        r in 0u32..=100,
    ) {
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(taus[0] as f64 / 1000.0),
            r: r as f64 / 100.0,
        });
        let stats = stats_analytic(&ap, &rule).unwrap();
        prop_assert_eq!(stats.defer_rate, 0.0);
        prop_assert_eq!(stats.fpr, stats.cfpr);
        prop_assert_eq!(stats.fnr, stats.cfnr);
        if stats.ppv.is_some() && stats.npv.is_some() {
            prop_assert!(check_convex_combination(&stats).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn deferral_accounting_is_ordered(
        ap in arb_profile(10),
        outcomes in prop::collection::vec(arb_outcome(), 10),
    ) {
        let support: Vec<Score> = ap.support().collect();
        let rule = blind_table_rule(&support, &outcomes[..support.len()]);
        let stats = stats_analytic(&ap, &rule).unwrap();
        if let (Some(ufpr), Some(cfpr)) = (stats.ufpr, stats.cfpr) {
            prop_assert!(ufpr <= cfpr + 1e-12);
        }
        if let (Some(ufpr), Some(tn)) = (stats.ufpr, stats.tn_based_error) {
            prop_assert!(ufpr <= tn + 1e-12);
        }
        if let (Some(ufnr), Some(cfnr)) = (stats.ufnr, stats.cfnr) {
            prop_assert!(ufnr <= cfnr + 1e-12);
        }
    }

    #[test]
    fn ppv_and_npv_are_monotone_along_the_threshold_sweep(ap in arb_profile(8)) {
        // Walk (tau, R) rightward: tau ascending, R descending within each
        // tau. PPV never decreases along the walk and NPV never increases
        // (the mirror direction).
        let support: Vec<Score> = ap.support().collect();
        let r_grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let mut prev_ppv: Option<f64> = None;
        let mut prev_npv: Option<f64> = None;
        for &tau in &support {
            for &r in r_grid.iter().rev() {
                let rule = HardRule::blind(DecisionRule::Threshold { tau, r });
                let stats = stats_analytic(&ap, &rule).unwrap();
                if let Some(ppv) = stats.ppv {
                    if let Some(prev) = prev_ppv {
                        prop_assert!(ppv >= prev - 1e-12);
                    }
                    prev_ppv = Some(ppv);
                }
                if let Some(npv) = stats.npv {
                    if let Some(prev) = prev_npv {
                        prop_assert!(npv <= prev + 1e-12);
                    }
                    prev_npv = Some(npv);
                }
            }
        }
    }

    #[test]
    fn ppv_is_continuous_in_the_positive_conditioned_distribution(
        ap in arb_profile(10),
        tau1_raw in 0u32..=1000,
        tau2_raw in 0u32..=1000,
        r1 in 0u32..=100,
        r2 in 0u32..=100,
    ) {
        // If two rules' positive-conditioned score distributions are within
        // TV distance eps, their PPVs differ by at most 2 eps.
        let params = [
            (score(tau1_raw as f64 / 1000.0), r1 as f64 / 100.0),
            (score(tau2_raw as f64 / 1000.0), r2 as f64 / 100.0),
        ];
        let mut conds = Vec::new();
        let mut ppvs = Vec::new();
        for (tau, r) in params {
            let decision = DecisionRule::Threshold { tau, r };
            let weights: Vec<(Score, f64)> = ap
                .iter()
                .map(|(s, p)| (s, p * decision.outcome(s).pos))
                .filter(|(_, w)| *w > 0.0)
                .collect();
            if weights.is_empty() {
                return Ok(());
            }
            let cond = AccuracyProfile::from_weights("c", weights).unwrap();
            ppvs.push(cond.base_rate());
            conds.push(cond);
        }
        let eps = tv_distance(&conds[0], &conds[1]);
        prop_assert!((ppvs[0] - ppvs[1]).abs() <= 2.0 * eps + 1e-12);
    }

    #[test]
    fn equal_profiles_equalize_everything_under_blind_rules(
        ap in arb_profile(10),
        outcomes in prop::collection::vec(arb_outcome(), 10),
        groups in 2usize..=4,
    ) {
        // Equal score distributions + any group-blind rule: all four plain
        // statistics agree across groups (or are undefined everywhere).
        let family = ProfileFamily::new(
            (0..groups).map(|i| ap.with_group(format!("g{i}"))),
        )
        .unwrap();
        let support: Vec<Score> = ap.support().collect();
        let mut no_defer = outcomes[..support.len()].to_vec();
        for o in &mut no_defer {
            // Fold deferral mass into the negative side: the plain-statistic
            // claim is about non-deferring rules.
            *o = OutcomeProbs::new(o.neg + o.defer, o.pos, 0.0).unwrap();
        }
        let rule = blind_table_rule(&support, &no_defer);
        let stats = stats_analytic_family(&family, &rule).unwrap();
        let report = assert_equalized(
            &stats,
            &[StatField::Ppv, StatField::Npv, StatField::Fpr, StatField::Fnr],
            1e-12,
        );
        prop_assert!(report.equalized, "gaps: {:?}", report.gaps);
    }

    #[test]
    fn equal_conditional_profiles_equalize_conditional_stats(
        target in arb_profile(6),
        masses in prop::collection::vec(1u32..=64, 18),
        outcomes in prop::collection::vec(arb_outcome(), 6),
        groups in 2usize..=3,
    ) {
        // Per-group profiles sharing the target's support, deferral policies
        // reshaping each into the target, then any blind deferring rule:
        // PPV, NPV, cFPR, cFNR agree across groups.
        let support: Vec<Score> = target.support().collect();
        let mut profiles = Vec::new();
        for i in 0..groups {
            let weights = masses[i * support.len()..(i + 1) * support.len()].to_vec();
            profiles.push(
                AccuracyProfile::from_weights(
                    format!("g{i}"),
                    support.iter().zip(weights).map(|(&s, w)| (s, w as f64)),
                )
                .unwrap(),
            );
        }
        let family = ProfileFamily::new(profiles).unwrap();
        let policies = fairpost::deferral::PolicyFamily::new(
            family
                .iter()
                .map(|(_, ap)| build_policy_to_target(ap, &target).unwrap())
                .collect::<Vec<_>>(),
        );
        let blind = blind_table_rule(&support, &outcomes[..support.len()]);
        let composed = compose_with_blind_rule(&policies, &blind).unwrap();
        let stats = stats_analytic_family(&family, &composed).unwrap();
        let report = assert_equalized(
            &stats,
            &[StatField::Ppv, StatField::Npv, StatField::Cfpr, StatField::Cfnr],
            1e-12,
        );
        prop_assert!(report.equalized, "gaps: {:?}", report.gaps);
    }

    #[test]
    fn deferral_round_trip_reproduces_targets(
        ap in arb_profile(12),
        keep_bits in prop::collection::vec(any::<bool>(), 12),
        weights in prop::collection::vec(1u32..=64, 12),
    ) {
        let support: Vec<Score> = ap.support().collect();
        let kept: Vec<Score> = support
            .iter()
            .zip(&keep_bits)
            .filter(|(_, keep)| **keep)
            .map(|(s, _)| *s)
            .collect();
        let kept = if kept.is_empty() { vec![support[0]] } else { kept };
        let target = AccuracyProfile::from_weights(
            "t",
            kept.iter().zip(&weights).map(|(&s, &w)| (s, w as f64)),
        )
        .unwrap();
        let policy = build_policy_to_target(&ap, &target).unwrap();
        let cond = conditional_ap(&ap, &policy).unwrap();
        for (s, p) in target.iter() {
            prop_assert!((cond.mass(s) - p).abs() <= 1e-12);
        }
        // Delta matches the closed form.
        let min_ratio = target
            .iter()
            .map(|(s, t)| ap.mass(s) / t)
            .fold(f64::INFINITY, f64::min);
        prop_assert!((policy.delta() - (1.0 - min_ratio)).abs() <= 1e-12);
        // Retained buckets stay calibrated: deferral is independent of the
        // true type given the score.
        for (s, _) in cond.iter() {
            let kept_mass = ap.mass(s) * (1.0 - policy.q(s));
            let kept_pos = s.value() * ap.mass(s) * (1.0 - policy.q(s));
            prop_assert!((kept_pos / kept_mass - s.value()).abs() <= 1e-12);
        }
    }

    #[test]
    fn equalize_ppv_beats_any_grid_rule(
        seed_profile in arb_profile(8),
        other_weights in prop::collection::vec(1u32..=64, 8),
        target_frac in 0.1f64..0.9,
    ) {
        // The closed-form search hits the target at least as well as every
        // rule on a coarse exhaustive grid.
        let support: Vec<Score> = seed_profile.support().collect();
        if support.len() < 2 {
            return Ok(());
        }
        let other = AccuracyProfile::from_weights(
            "h",
            support.iter().zip(&other_weights).map(|(&s, &w)| (s, w as f64)),
        )
        .unwrap();
        let family = ProfileFamily::new([seed_profile, other]).unwrap();
        let max_br = family
            .iter()
            .map(|(_, ap)| ap.base_rate())
            .fold(f64::NEG_INFINITY, f64::max);
        let s_max = support.last().unwrap().value();
        let target = max_br + target_frac * (s_max - max_br);
        let rule = equalize_ppv(&family, target).unwrap();
        let closed_form_gap = worst_gap(&family, &rule, target);
        prop_assert!(closed_form_gap <= 1e-9);

        let mut best_grid = f64::INFINITY;
        let r_grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        for (_, ap) in family.iter() {
            let mut group_best = f64::INFINITY;
            for &tau in &support {
                for &r in &r_grid {
                    let rule = HardRule::blind(DecisionRule::Threshold { tau, r });
                    if let Some(ppv) = stats_analytic(ap, &rule).unwrap().ppv {
                        group_best = group_best.min((ppv - target).abs());
                    }
                }
            }
            best_grid = best_grid.min(group_best);
        }
        prop_assert!(closed_form_gap <= best_grid + 1e-9);
    }
}

fn worst_gap(family: &ProfileFamily, rule: &ThresholdRule, target: f64) -> f64 {
    let hard = rule.to_hard_rule();
    let mut worst: f64 = 0.0;
    for (_, ap) in family.iter() {
        let stats = stats_analytic(ap, &hard).unwrap();
        worst = worst.max((stats.ppv.expect("non-trivial") - target).abs());
    }
    worst
}

#[test]
fn group_id_is_irrelevant_to_tv_distance() {
    let a = AccuracyProfile::from_weights("a", [(score(0.2), 1.0), (score(0.8), 3.0)]).unwrap();
    let b = a.with_group("b");
    assert_eq!(tv_distance(&a, &b), 0.0);
    assert_eq!(a.group(), &GroupId::from("a"));
    assert_eq!(b.group(), &GroupId::from("b"));
}
