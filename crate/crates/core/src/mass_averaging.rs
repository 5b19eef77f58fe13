//! Score-mass averaging: a soft post-processor that redistributes score mass
//! through per-group transition kernels so every group ends up with the same
//! calibrated score distribution, without deferring on anyone.
//!
//! The kernels and the shared output PMF are found by a linear program whose
//! constraints are row-stochasticity, equal output distributions, and
//! calibration of the output scores. Equal output distributions force equal
//! base rates, so that is a precondition. The objective minimizes expected
//! transport distance, which makes the identity kernel optimal whenever the
//! inputs already agree.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::profiles::{AccuracyProfile, GroupId, ProfileFamily};
use crate::score::Score;
use crate::simplex::{solve_min_equality, LpResult};

/// Constraint residual tolerance for solved kernels.
pub const LP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MassAveragingError {
    #[error("base rates differ by {gap}, above the tolerance {tolerance}; equal output distributions force equal base rates")]
    UnequalBaseRates { gap: f64, tolerance: f64 },
    #[error("output support is empty")]
    EmptyOutputSupport,
    #[error("no kernel satisfies the constraints")]
    Infeasible,
    #[error("linear program failed numerically: {0}")]
    NumericalFailure(String),
    #[error("kernel row for score {0} is not a distribution (sums to {1})")]
    NotRowStochastic(Score, f64),
    #[error("group {0} is missing from the kernel")]
    UnknownGroup(GroupId),
}

/// Row-stochastic transition matrix for one group: entry `(i, j)` is the
/// probability of rewriting input score `i` as output score `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelMatrix {
    pub input_scores: Vec<Score>,
    pub output_scores: Vec<Score>,
    /// Row-major: `rows[i][j] = Pr[output j | input i]`.
    pub rows: Vec<Vec<f64>>,
}

impl KernelMatrix {
    pub fn identity(support: &[Score]) -> Self {
        let n = support.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            input_scores: support.to_vec(),
            output_scores: support.to_vec(),
            rows,
        }
    }

    fn validate_rows(&self) -> Result<(), MassAveragingError> {
        for (i, row) in self.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > LP_TOL || row.iter().any(|&v| v < -LP_TOL) {
                return Err(MassAveragingError::NotRowStochastic(
                    self.input_scores[i],
                    sum,
                ));
            }
        }
        Ok(())
    }
}

/// Per-group transition kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    per_group: BTreeMap<GroupId, KernelMatrix>,
}

impl TransitionKernel {
    pub fn new(per_group: BTreeMap<GroupId, KernelMatrix>) -> Self {
        Self { per_group }
    }

    pub fn get(&self, group: &GroupId) -> Option<&KernelMatrix> {
        self.per_group.get(group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupId, &KernelMatrix)> {
        self.per_group.iter()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.per_group
                .iter()
                .map(|(g, k)| {
                    serde_json::json!({
                        "group": g.as_str(),
                        "input_scores": k.input_scores.iter().map(Score::value).collect::<Vec<_>>(),
                        "output_scores": k.output_scores.iter().map(Score::value).collect::<Vec<_>>(),
                        "matrix": k.rows,
                    })
                })
                .collect(),
        )
    }
}

/// The linear program: kernel entries and the shared output PMF are the
/// variables; row-stochasticity, equal outputs, and output calibration are
/// equality constraints; expected transport distance is the objective.
#[derive(Debug, Clone)]
pub struct MassAveragingLp {
    family: ProfileFamily,
    output_support: Vec<Score>,
    objective: Vec<f64>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    kernel_offsets: BTreeMap<GroupId, usize>,
    target_offset: usize,
}

impl MassAveragingLp {
    pub fn variable_count(&self) -> usize {
        self.objective.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.rows.len()
    }

    pub fn output_support(&self) -> &[Score] {
        &self.output_support
    }
}

/// Union of the family's supports, ascending.
pub fn union_support(family: &ProfileFamily) -> Vec<Score> {
    let mut scores: Vec<Score> = family.iter().flat_map(|(_, ap)| ap.support()).collect();
    scores.sort_unstable();
    scores.dedup();
    scores
}

/// Assemble the LP. Requires base rates equal within `br_tolerance`.
pub fn build_lp(
    family: &ProfileFamily,
    output_support: &[Score],
    br_tolerance: f64,
) -> Result<MassAveragingLp, MassAveragingError> {
    if output_support.is_empty() {
        return Err(MassAveragingError::EmptyOutputSupport);
    }
    let rates: Vec<f64> = family.iter().map(|(_, ap)| ap.base_rate()).collect();
    let gap = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - rates.iter().cloned().fold(f64::INFINITY, f64::min);
    if gap > br_tolerance {
        return Err(MassAveragingError::UnequalBaseRates {
            gap,
            tolerance: br_tolerance,
        });
    }

    let k_out = output_support.len();
    let mut kernel_offsets = BTreeMap::new();
    let mut offset = 0usize;
    for (g, ap) in family.iter() {
        kernel_offsets.insert(g.clone(), offset);
        offset += ap.support_len() * k_out;
    }
    let target_offset = offset;
    let n_vars = offset + k_out;

    let mut objective = vec![0.0; n_vars];
    for (g, ap) in family.iter() {
        let base = kernel_offsets[g];
        for (i, (s, mass)) in ap.iter().enumerate() {
            for (j, out) in output_support.iter().enumerate() {
                objective[base + i * k_out + j] = mass * (s.value() - out.value()).abs();
            }
        }
    }

    let mut rows = Vec::new();
    let mut rhs = Vec::new();

    // Row-stochasticity: each input score's kernel row sums to one.
    for (g, ap) in family.iter() {
        let base = kernel_offsets[g];
        for i in 0..ap.support_len() {
            let mut row = vec![0.0; n_vars];
            for j in 0..k_out {
                row[base + i * k_out + j] = 1.0;
            }
            rows.push(row);
            rhs.push(1.0);
        }
    }

    // Equal outputs: pushed-forward mass at each output score matches the
    // shared target PMF.
    for (g, ap) in family.iter() {
        let base = kernel_offsets[g];
        for j in 0..k_out {
            let mut row = vec![0.0; n_vars];
            for (i, (_, mass)) in ap.iter().enumerate() {
                row[base + i * k_out + j] = mass;
            }
            row[target_offset + j] = -1.0;
            rows.push(row);
            rhs.push(0.0);
        }
    }

    // Calibration: positive mass arriving at each output score matches the
    // score times the target mass, so recalibrated outputs equal the axis.
    for (g, ap) in family.iter() {
        let base = kernel_offsets[g];
        for (j, out) in output_support.iter().enumerate() {
            let mut row = vec![0.0; n_vars];
            for (i, (s, mass)) in ap.iter().enumerate() {
                row[base + i * k_out + j] = s.value() * mass;
            }
            row[target_offset + j] = -out.value();
            rows.push(row);
            rhs.push(0.0);
        }
    }

    Ok(MassAveragingLp {
        family: family.clone(),
        output_support: output_support.to_vec(),
        objective,
        rows,
        rhs,
        kernel_offsets,
        target_offset,
    })
}

#[derive(Debug, Clone)]
pub struct MassAveragingSolution {
    pub kernel: TransitionKernel,
    pub target: AccuracyProfile,
    /// Expected transport distance of the solved kernels.
    pub objective: f64,
}

/// Solve the assembled program with the dense simplex.
pub fn solve_lp(lp: &MassAveragingLp) -> Result<MassAveragingSolution, MassAveragingError> {
    let max_iter = 50 * lp.variable_count();
    let x = match solve_min_equality(&lp.objective, &lp.rows, &lp.rhs, max_iter) {
        LpResult::Optimal { x, .. } => x,
        LpResult::Infeasible => return Err(MassAveragingError::Infeasible),
        LpResult::IterationLimit => {
            return Err(MassAveragingError::NumericalFailure(format!(
                "no optimum within {max_iter} pivots"
            )))
        }
    };

    let k_out = lp.output_support.len();
    let mut per_group = BTreeMap::new();
    for (g, ap) in lp.family.iter() {
        let base = lp.kernel_offsets[g];
        let input_scores: Vec<Score> = ap.support().collect();
        let rows: Vec<Vec<f64>> = (0..input_scores.len())
            .map(|i| x[base + i * k_out..base + (i + 1) * k_out].to_vec())
            .collect();
        let matrix = KernelMatrix {
            input_scores,
            output_scores: lp.output_support.clone(),
            rows,
        };
        matrix.validate_rows()?;
        per_group.insert(g.clone(), matrix);
    }

    let target_raw = &x[lp.target_offset..lp.target_offset + k_out];
    let total: f64 = target_raw.iter().sum();
    if (total - 1.0).abs() > LP_TOL {
        return Err(MassAveragingError::NumericalFailure(format!(
            "target PMF sums to {total}"
        )));
    }
    let target = AccuracyProfile::from_weights(
        "target",
        lp.output_support
            .iter()
            .zip(target_raw)
            .filter(|(_, &w)| w > LP_TOL)
            .map(|(s, &w)| (*s, w)),
    )
    .map_err(|e| MassAveragingError::NumericalFailure(e.to_string()))?;

    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum();

    Ok(MassAveragingSolution {
        kernel: TransitionKernel::new(per_group),
        target,
        objective,
    })
}

/// Push each group's PMF through its kernel.
pub fn apply_kernel(
    family: &ProfileFamily,
    kernel: &TransitionKernel,
) -> Result<ProfileFamily, MassAveragingError> {
    let mut out = Vec::new();
    for (g, ap) in family.iter() {
        let matrix = kernel
            .get(g)
            .ok_or_else(|| MassAveragingError::UnknownGroup(g.clone()))?;
        matrix.validate_rows()?;
        let mut pushed: BTreeMap<Score, f64> = BTreeMap::new();
        for (i, in_score) in matrix.input_scores.iter().enumerate() {
            let mass = ap.mass(*in_score);
            for (j, out_score) in matrix.output_scores.iter().enumerate() {
                *pushed.entry(*out_score).or_insert(0.0) += mass * matrix.rows[i][j];
            }
        }
        let profile = AccuracyProfile::from_weights(
            g.clone(),
            pushed.into_iter().filter(|(_, w)| *w > LP_TOL),
        )
        .map_err(|e| MassAveragingError::NumericalFailure(e.to_string()))?;
        out.push(profile);
    }
    ProfileFamily::new(out).map_err(|e| MassAveragingError::NumericalFailure(e.to_string()))
}

/// Expected transport distance recomputed from a kernel.
pub fn transport_cost(family: &ProfileFamily, kernel: &TransitionKernel) -> f64 {
    let mut cost = 0.0;
    for (g, ap) in family.iter() {
        if let Some(matrix) = kernel.get(g) {
            for (i, in_score) in matrix.input_scores.iter().enumerate() {
                let mass = ap.mass(*in_score);
                for (j, out_score) in matrix.output_scores.iter().enumerate() {
                    cost += mass * matrix.rows[i][j] * (in_score.value() - out_score.value()).abs();
                }
            }
        }
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{
        assert_equalized, stats_analytic_family, DecisionRule, HardRule, StatField,
    };
    use crate::testutil::{family, profile, score};

    #[test]
    fn variable_count_two_groups_three_by_three() {
        let third = 1.0 / 3.0;
        let fam = family(&[
            profile("a", &[(0.0, third), (0.5, third), (1.0, third)]),
            profile("b", &[(0.0, third), (0.5, third), (1.0, third)]),
        ]);
        let support = union_support(&fam);
        let lp = build_lp(&fam, &support, 1e-6).unwrap();
        assert_eq!(lp.variable_count(), 2 * 9 + 3);
    }

    #[test]
    fn unequal_base_rates_rejected() {
        let fam = family(&[
            profile("a", &[(0.2, 0.5), (0.8, 0.5)]),
            profile("b", &[(0.2, 0.3), (0.8, 0.7)]),
        ]);
        let support = union_support(&fam);
        assert!(matches!(
            build_lp(&fam, &support, 1e-6),
            Err(MassAveragingError::UnequalBaseRates { .. })
        ));
    }

    #[test]
    fn identical_profiles_solve_to_identity_kernels() {
        let ap = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[ap.clone(), ap.with_group("b")]);
        let support = union_support(&fam);
        let lp = build_lp(&fam, &support, 1e-6).unwrap();
        let solution = solve_lp(&lp).unwrap();
        assert!(solution.objective.abs() < LP_TOL);
        for (_, matrix) in solution.kernel.iter() {
            for (i, row) in matrix.rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let expected = if matrix.input_scores[i] == matrix.output_scores[j] {
                        1.0
                    } else {
                        0.0
                    };
                    assert!((v - expected).abs() < 1e-7, "kernel moved mass at zero cost");
                }
            }
        }
    }

    #[test]
    fn three_point_instance_recovers_the_averaging_kernel() {
        // Uniform on {0, 1/2, 1} versus uniform on {0, 1}: equal base rates,
        // and the cheapest repair moves one third of the two-point group's
        // end mass to the middle (or equivalently spreads the middle of the
        // other group outward; both cost 1/6).
        let third = 1.0 / 3.0;
        let fam = family(&[
            profile("g1", &[(0.0, third), (0.5, third), (1.0, third)]),
            profile("g2", &[(0.0, 0.5), (1.0, 0.5)]),
        ]);
        let support = union_support(&fam);
        let lp = build_lp(&fam, &support, 1e-9).unwrap();
        let solution = solve_lp(&lp).unwrap();
        assert!((solution.objective - 1.0 / 6.0).abs() < 1e-7);

        let pushed = apply_kernel(&fam, &solution.kernel).unwrap();
        let mut iter = pushed.iter();
        let (_, first) = iter.next().unwrap();
        for (_, ap) in iter {
            for (s, p) in first.iter() {
                assert!((ap.mass(s) - p).abs() < 1e-7);
            }
        }

        // Output calibration: mean positive mass at each output score is the
        // score itself.
        for (g, ap) in fam.iter() {
            let matrix = solution.kernel.get(g).unwrap();
            for (j, out) in matrix.output_scores.iter().enumerate() {
                let arrived: f64 = matrix
                    .input_scores
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ap.mass(*s) * matrix.rows[i][j])
                    .sum();
                let positives: f64 = matrix
                    .input_scores
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.value() * ap.mass(*s) * matrix.rows[i][j])
                    .sum();
                assert!((positives - out.value() * arrived).abs() < 1e-7);
            }
        }

        // If the optimum kept the three-point target, the two-point group's
        // kernel is the keep-2/3 / move-1/3 matrix.
        if solution.target.mass(score(0.5)) > 1e-7 {
            let g2 = solution.kernel.get(&"g2".into()).unwrap();
            for (i, in_score) in g2.input_scores.iter().enumerate() {
                for (j, out_score) in g2.output_scores.iter().enumerate() {
                    let expected = if in_score == out_score {
                        2.0 / 3.0
                    } else if *out_score == score(0.5) {
                        1.0 / 3.0
                    } else {
                        0.0
                    };
                    assert!((g2.rows[i][j] - expected).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn one_point_output_support_needs_base_rate_on_axis() {
        let fam = family(&[profile("a", &[(0.2, 0.5), (0.8, 0.5)])]);
        // Base rate 0.5: a single output score of 0.6 cannot stay calibrated.
        let lp = build_lp(&fam, &[score(0.6)], 1e-6).unwrap();
        assert!(matches!(solve_lp(&lp), Err(MassAveragingError::Infeasible)));
        // Putting the single output score at the base rate works: every
        // score collapses to the mean.
        let lp = build_lp(&fam, &[score(0.5)], 1e-6).unwrap();
        let solution = solve_lp(&lp).unwrap();
        assert_eq!(solution.target.support_len(), 1);
    }

    #[test]
    fn identity_kernel_preserves_family() {
        let ap = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[ap.clone()]);
        let support: Vec<Score> = ap.support().collect();
        let kernel = TransitionKernel::new(
            [( GroupId::from("a"), KernelMatrix::identity(&support))].into(),
        );
        let pushed = apply_kernel(&fam, &kernel).unwrap();
        assert_eq!(pushed.get(&"a".into()).unwrap(), &ap);
    }

    #[test]
    fn collapse_kernel_gives_degenerate_profile() {
        let ap = profile("a", &[(0.2, 0.5), (0.8, 0.5)]);
        let fam = family(&[ap.clone()]);
        let kernel = TransitionKernel::new(
            [(
                GroupId::from("a"),
                KernelMatrix {
                    input_scores: ap.support().collect(),
                    output_scores: vec![score(0.5)],
                    rows: vec![vec![1.0], vec![1.0]],
                },
            )]
            .into(),
        );
        let pushed = apply_kernel(&fam, &kernel).unwrap();
        assert_eq!(pushed.get(&"a".into()).unwrap().support_len(), 1);
        assert_eq!(
            pushed.get(&"a".into()).unwrap().min_support(),
            score(0.5)
        );
    }

    #[test]
    fn objective_matches_recomputed_transport_cost() {
        let third = 1.0 / 3.0;
        let fam = family(&[
            profile("g1", &[(0.0, third), (0.5, third), (1.0, third)]),
            profile("g2", &[(0.0, 0.5), (1.0, 0.5)]),
        ]);
        let support = union_support(&fam);
        let solution = solve_lp(&build_lp(&fam, &support, 1e-9).unwrap()).unwrap();
        let recomputed = transport_cost(&fam, &solution.kernel);
        assert!((solution.objective - recomputed).abs() < 1e-9);
    }

    #[test]
    fn averaged_family_equalizes_stats_under_blind_rules() {
        let third = 1.0 / 3.0;
        let fam = family(&[
            profile("g1", &[(0.0, third), (0.5, third), (1.0, third)]),
            profile("g2", &[(0.0, 0.5), (1.0, 0.5)]),
        ]);
        let support = union_support(&fam);
        let solution = solve_lp(&build_lp(&fam, &support, 1e-9).unwrap()).unwrap();
        let pushed = apply_kernel(&fam, &solution.kernel).unwrap();
        let rule = HardRule::blind(DecisionRule::Threshold {
            tau: score(0.5),
            r: 0.5,
        });
        let stats = stats_analytic_family(&pushed, &rule).unwrap();
        let report = assert_equalized(
            &stats,
            &[StatField::Ppv, StatField::Npv, StatField::Fpr, StatField::Fnr],
            1e-7,
        );
        assert!(report.equalized, "gaps: {:?}", report.gaps);
    }
}
