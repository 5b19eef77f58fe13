//! Small dense two-phase simplex for equality-form linear programs.
//!
//! Minimizes `c . x` subject to `A x = b`, `x >= 0`. Bland's rule picks the
//! entering column and breaks ratio ties, which rules out cycling; an
//! iteration cap guards against numerical stalls. The problems this solves
//! are a few hundred variables at most, so a plain tableau is fine.

const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpResult {
    Optimal { x: Vec<f64>, cost: f64 },
    Infeasible,
    IterationLimit,
}

pub(crate) fn solve_min_equality(
    c: &[f64],
    a: &[Vec<f64>],
    b: &[f64],
    max_iter: usize,
) -> LpResult {
    let m = a.len();
    let n = c.len();
    debug_assert!(a.iter().all(|row| row.len() == n));
    debug_assert_eq!(b.len(), m);

    // Tableau: m constraint rows over n structural + m artificial columns,
    // plus the right-hand side. Artificials form the initial basis.
    let width = n + m;
    let mut t = vec![vec![0.0; width + 1]; m];
    for (i, row) in a.iter().enumerate() {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in row.iter().enumerate() {
            t[i][j] = flip * v;
        }
        t[i][n + i] = 1.0;
        t[i][width] = flip * b[i];
    }
    let mut basis: Vec<usize> = (n..width).collect();

    // Phase 1: minimize the sum of artificials.
    let phase1_cost: Vec<f64> = (0..width).map(|j| if j >= n { 1.0 } else { 0.0 }).collect();
    let mut iterations = 0usize;
    if !run_phase(&mut t, &mut basis, &phase1_cost, width, &mut iterations, max_iter) {
        return LpResult::IterationLimit;
    }
    let infeasibility: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &var)| var >= n)
        .map(|(i, _)| t[i][width])
        .sum();
    if infeasibility > 1e-7 {
        return LpResult::Infeasible;
    }

    // Drive leftover artificials out of the basis; rows with no structural
    // pivot are redundant constraints and can stay (their rhs is ~0).
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > PIVOT_TOL) {
                pivot(&mut t, &mut basis, i, j, width);
            }
        }
    }

    // Phase 2: original costs; artificial columns are barred from entering
    // and any still basic sit at level zero, so they cost nothing.
    let phase2_cost: Vec<f64> = (0..width).map(|j| if j < n { c[j] } else { 0.0 }).collect();
    if !run_phase(&mut t, &mut basis, &phase2_cost, n, &mut iterations, max_iter) {
        return LpResult::IterationLimit;
    }

    let mut x = vec![0.0; n];
    for (i, &var) in basis.iter().enumerate() {
        if var < n {
            x[var] = t[i][width];
        }
    }
    let cost = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
    LpResult::Optimal { x, cost }
}

/// Run simplex iterations until optimal under `cost`; columns at or past
/// `enter_limit` never enter. Returns false when the iteration budget runs
/// out.
fn run_phase(
    t: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    enter_limit: usize,
    iterations: &mut usize,
    max_iter: usize,
) -> bool {
    let m = t.len();
    if m == 0 {
        return true;
    }
    let width = t[0].len() - 1;
    loop {
        // Reduced costs from the current basis: c_j - y . A_j with
        // y solving the basis system (read straight off the tableau).
        let mut entering = None;
        for j in 0..enter_limit.min(width) {
            if basis.contains(&j) {
                continue;
            }
            let mut reduced = cost[j];
            for i in 0..m {
                reduced -= cost[basis[i]] * t[i][j];
            }
            if reduced < -PIVOT_TOL {
                entering = Some(j); // Bland: smallest index wins
                break;
            }
        }
        let Some(j) = entering else {
            return true;
        };

        let mut leaving: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][j] > PIVOT_TOL {
                let ratio = t[i][width] / t[i][j];
                let better = match leaving {
                    None => true,
                    Some((best_i, best_ratio)) => {
                        ratio < best_ratio - PIVOT_TOL
                            || (ratio < best_ratio + PIVOT_TOL && basis[i] < basis[best_i])
                    }
                };
                if better {
                    leaving = Some((i, ratio));
                }
            }
        }
        let Some((i, _)) = leaving else {
            // Unbounded; with our bounded feasible sets this marks numerical
            // trouble rather than a real ray.
            return false;
        };

        pivot(t, basis, i, j, width);
        *iterations += 1;
        if *iterations > max_iter {
            return false;
        }
    }
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize, width: usize) {
    let scale = t[row][col];
    for v in t[row].iter_mut() {
        *v /= scale;
    }
    for i in 0..t.len() {
        if i != row {
            let factor = t[i][col];
            if factor != 0.0 {
                for j in 0..=width {
                    t[i][j] -= factor * t[row][j];
                }
            }
        }
    }
    basis[row] = col;
}
