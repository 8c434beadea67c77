//! Dense two-phase primal simplex. The solver sits behind [`solve`] so a
//! different backend can be swapped in without touching the formulation.
//!
//! Bland's rule keeps pivoting deterministic and cycle-free; tolerances are
//! fixed at 1e-9 (pivot) and 1e-7 (feasibility / optimality certificate).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    /// Sparse row: (variable index, coefficient).
    pub terms: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

/// Minimize `objective . x` subject to constraints, `x >= 0`.
#[derive(Debug, Clone, Default)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

impl LpProblem {
    pub fn new(num_vars: usize) -> Self {
        LpProblem { num_vars, objective: vec![0.0; num_vars], constraints: Vec::new() }
    }

    pub fn push(&mut self, terms: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.constraints.push(Constraint { terms, cmp, rhs });
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

const PIVOT_EPS: f64 = 1e-9;
pub const FEAS_EPS: f64 = 1e-7;

pub fn solve(p: &LpProblem) -> Result<LpSolution> {
    let n = p.num_vars;
    let m = p.constraints.len();

    // Column layout: [structural | slack/surplus | artificial].
    let mut n_slack = 0;
    for c in &p.constraints {
        if c.cmp != Cmp::Eq {
            n_slack += 1;
        }
    }
    let total = n + n_slack + m; // one artificial column reserved per row
    let mut a = vec![vec![0.0; total + 1]; m];
    let mut basis = vec![0usize; m];
    let mut art_cols: Vec<Option<usize>> = vec![None; m];

    let mut slack_at = n;
    for (i, c) in p.constraints.iter().enumerate() {
        let mut sign = 1.0;
        if c.rhs < 0.0 {
            sign = -1.0;
        }
        for &(j, v) in &c.terms {
            assert!(j < n, "term references variable {j} out of {n}");
            a[i][j] += sign * v;
        }
        a[i][total] = sign * c.rhs;
        let cmp = match (c.cmp, sign < 0.0) {
            (Cmp::Le, true) => Cmp::Ge,
            (Cmp::Ge, true) => Cmp::Le,
            (x, _) => x,
        };
        match cmp {
            Cmp::Le => {
                a[i][slack_at] = 1.0;
                basis[i] = slack_at;
                slack_at += 1;
            }
            Cmp::Ge => {
                a[i][slack_at] = -1.0;
                slack_at += 1;
                let art = n + n_slack + i;
                a[i][art] = 1.0;
                basis[i] = art;
                art_cols[i] = Some(art);
            }
            Cmp::Eq => {
                let art = n + n_slack + i;
                a[i][art] = 1.0;
                basis[i] = art;
                art_cols[i] = Some(art);
            }
        }
    }

    let art_start = n + n_slack;

    // Phase 1: minimize the sum of artificials.
    if art_cols.iter().any(|c| c.is_some()) {
        let mut cost = vec![0.0; total];
        for c in art_cols.iter().flatten() {
            cost[*c] = 1.0;
        }
        let z = run_simplex(&mut a, &mut basis, &cost, total, usize::MAX)?;
        if z > FEAS_EPS {
            return Err(Error::Infeasible(format!(
                "phase-1 residual {z:.3e}: constraints cannot all hold"
            )));
        }
        // Drive remaining artificials out of the basis.
        for i in 0..m {
            if basis[i] >= art_start {
                let col = (0..art_start).find(|&j| a[i][j].abs() > PIVOT_EPS);
                if let Some(j) = col {
                    pivot(&mut a, &mut basis, i, j, total);
                } // else: redundant row, leave the artificial at zero
            }
        }
    }

    // Phase 2: the real objective, artificial columns banned.
    let mut cost = vec![0.0; total];
    cost[..n].copy_from_slice(&p.objective);
    let z = run_simplex(&mut a, &mut basis, &cost, total, art_start)?;

    let mut x = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            x[b] = a[i][total];
        }
    }
    Ok(LpSolution { x, objective: z })
}

/// Bland-rule simplex over the tableau. Columns >= `banned_from` may not
/// enter the basis. Returns the objective value at optimality.
fn run_simplex(
    a: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    total: usize,
    banned_from: usize,
) -> Result<f64> {
    let m = a.len();
    // reduced cost row r_j = c_j - c_B . column_j
    let mut r = cost.to_vec();
    let mut z = 0.0;
    for i in 0..m {
        let cb = cost[basis[i]];
        if cb != 0.0 {
            z += cb * a[i][total];
            for j in 0..total {
                r[j] -= cb * a[i][j];
            }
        }
    }
    let max_iters = 50_000 + 200 * (m + total);
    for _ in 0..max_iters {
        // Bland: smallest improving column index.
        let entering = (0..total.min(banned_from)).find(|&j| r[j] < -FEAS_EPS);
        let Some(j) = entering else {
            return Ok(z);
        };
        // ratio test, ties broken by smallest basis variable (Bland).
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if a[i][j] > PIVOT_EPS {
                let ratio = a[i][total] / a[i][j];
                let better = ratio < best - PIVOT_EPS
                    || (ratio < best + PIVOT_EPS
                        && leave.map(|l| basis[i] < basis[l]).unwrap_or(true));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(i) = leave else {
            return Err(Error::Infeasible("objective is unbounded below".into()));
        };
        let delta = r[j] * best;
        z += delta;
        pivot_with_costs(a, basis, &mut r, i, j, total);
    }
    Err(Error::Infeasible("simplex iteration cap exceeded".into()))
}

fn pivot(a: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize, total: usize) {
    let piv = a[row][col];
    for v in a[row].iter_mut() {
        *v /= piv;
    }
    for i in 0..a.len() {
        if i != row {
            let f = a[i][col];
            if f.abs() > 0.0 {
                for j in 0..=total {
                    a[i][j] -= f * a[row][j];
                }
            }
        }
    }
    basis[row] = col;
}

fn pivot_with_costs(
    a: &mut [Vec<f64>],
    basis: &mut [usize],
    r: &mut [f64],
    row: usize,
    col: usize,
    total: usize,
) {
    pivot(a, basis, row, col, total);
    let f = r[col];
    if f.abs() > 0.0 {
        for j in 0..total {
            r[j] -= f * a[row][j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simple_max_as_min() {
        // max x + y st x <= 2, y <= 3, x + y <= 4  =>  min -(x+y) = -4
        let mut p = LpProblem::new(2);
        p.objective = vec![-1.0, -1.0];
        p.push(vec![(0, 1.0)], Cmp::Le, 2.0);
        p.push(vec![(1, 1.0)], Cmp::Le, 3.0);
        p.push(vec![(0, 1.0), (1, 1.0)], Cmp::Le, 4.0);
        let s = solve(&p).unwrap();
        assert_relative_eq!(s.objective, -4.0, epsilon = 1e-8);
        assert_relative_eq!(s.x[0] + s.x[1], 4.0, epsilon = 1e-8);
    }

    #[test]
    fn equality_and_ge() {
        // min 2x + 3y st x + y = 10, x >= 4  => x=10? no: y >= 0.
        // optimum: y = 0 is not allowed by x >= 4... x in [4,10];
        // cost 2x + 3(10 - x) = 30 - x -> maximize x -> x = 10, y = 0, z = 20
        let mut p = LpProblem::new(2);
        p.objective = vec![2.0, 3.0];
        p.push(vec![(0, 1.0), (1, 1.0)], Cmp::Eq, 10.0);
        p.push(vec![(0, 1.0)], Cmp::Ge, 4.0);
        let s = solve(&p).unwrap();
        assert_relative_eq!(s.objective, 20.0, epsilon = 1e-8);
        assert_relative_eq!(s.x[0], 10.0, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = LpProblem::new(1);
        p.objective = vec![1.0];
        p.push(vec![(0, 1.0)], Cmp::Le, 1.0);
        p.push(vec![(0, 1.0)], Cmp::Ge, 2.0);
        assert!(solve(&p).is_err());
    }

    #[test]
    fn unbounded_detected() {
        let mut p = LpProblem::new(1);
        p.objective = vec![-1.0];
        p.push(vec![(0, 1.0)], Cmp::Ge, 1.0);
        assert!(solve(&p).is_err());
    }

    #[test]
    fn min_max_form() {
        // min E st E >= 3x, E >= 4(1-x), x in [0,1]:
        // optimum at 3x = 4 - 4x -> x = 4/7, E = 12/7
        let mut p = LpProblem::new(2); // x, E
        p.objective = vec![0.0, 1.0];
        p.push(vec![(1, 1.0), (0, -3.0)], Cmp::Ge, 0.0);
        p.push(vec![(1, 1.0), (0, 4.0)], Cmp::Ge, 4.0);
        p.push(vec![(0, 1.0)], Cmp::Le, 1.0);
        let s = solve(&p).unwrap();
        assert_relative_eq!(s.objective, 12.0 / 7.0, epsilon = 1e-8);
        assert_relative_eq!(s.x[0], 4.0 / 7.0, epsilon = 1e-8);
    }

    #[test]
    fn random_lps_match_grid_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            // min c.x over the box [0,1]^2 with one extra <= constraint;
            // brute-force over a fine grid as the oracle.
            let c = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let g = [rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0)];
            let rhs = rng.gen_range(0.5..2.0);
            let mut p = LpProblem::new(2);
            p.objective = c.to_vec();
            p.push(vec![(0, 1.0)], Cmp::Le, 1.0);
            p.push(vec![(1, 1.0)], Cmp::Le, 1.0);
            p.push(vec![(0, g[0]), (1, g[1])], Cmp::Le, rhs);
            let s = solve(&p).unwrap();
            let mut best = f64::INFINITY;
            let steps = 200;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = i as f64 / steps as f64;
                    let y = j as f64 / steps as f64;
                    if g[0] * x + g[1] * y <= rhs + 1e-12 {
                        best = best.min(c[0] * x + c[1] * y);
                    }
                }
            }
            assert!(
                s.objective <= best + 1e-6,
                "simplex {:.6} worse than grid {:.6}",
                s.objective,
                best
            );
        }
    }
}
