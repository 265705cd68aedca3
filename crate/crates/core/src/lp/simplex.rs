//! Dense two-phase tableau simplex.
//!
//! Minimizes `c.x` subject to linear rows and `x >= 0`. Pricing uses the
//! most negative reduced cost and falls back to Bland's rule after a run of
//! degenerate pivots, which rules out cycling.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rel: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub num_vars: usize,
    /// Minimized.
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        LinearProgram {
            num_vars,
            objective: vec![0.0; num_vars],
            rows: Vec::new(),
        }
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rel: Relation, rhs: f64) {
        debug_assert!(coeffs.iter().all(|&(j, _)| j < self.num_vars));
        self.rows.push(Row { coeffs, rel, rhs });
    }

    /// Largest violation of any row or sign constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = x.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
        for row in &self.rows {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match row.rel {
                Relation::Le => lhs - row.rhs,
                Relation::Ge => row.rhs - lhs,
                Relation::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(v);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Pivot and feasibility tolerance.
    pub eps: f64,
    pub max_iterations: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degenerate_switch: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            eps: 1e-10,
            max_iterations: 50_000,
            degenerate_switch: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimplexError {
    Infeasible { phase_one_objective: f64 },
    Unbounded { column: usize },
    IterationLimit { iterations: usize, objective: f64 },
}

impl fmt::Display for SimplexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimplexError::Infeasible { phase_one_objective } => {
                write!(f, "infeasible (phase-one residual {phase_one_objective:e})")
            }
            SimplexError::Unbounded { column } => write!(f, "unbounded along column {column}"),
            SimplexError::IterationLimit {
                iterations,
                objective,
            } => write!(
                f,
                "iteration limit reached after {iterations} pivots (objective {objective})"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    t: Vec<Vec<f64>>,
    /// Reduced-cost row, same width; last entry is minus the objective.
    cost: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
    iterations: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let width = self.cols + 1;
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for k in 0..width {
                    row[k] -= f * pivot_row[k];
                }
                row[c] = 0.0;
            }
        }
        let f = self.cost[c];
        if f != 0.0 {
            for (cost, p) in self.cost[..width].iter_mut().zip(&pivot_row[..width]) {
                *cost -= f * p;
            }
            self.cost[c] = 0.0;
        }
        self.basis[r] = c;
        self.iterations += 1;
    }

    fn rhs(&self, r: usize) -> f64 {
        self.t[r][self.cols]
    }

    /// Runs pivots until optimal over the columns allowed by `allowed`.
    fn optimize(
        &mut self,
        allowed: &dyn Fn(usize) -> bool,
        opts: &SimplexOptions,
    ) -> Result<(), SimplexError> {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= opts.max_iterations {
                return Err(SimplexError::IterationLimit {
                    iterations: self.iterations,
                    objective: -self.cost[self.cols],
                });
            }
            let bland = degenerate_run >= opts.degenerate_switch;
            let mut entering = None;
            let mut best = -opts.eps;
            for j in 0..self.cols {
                if !allowed(j) {
                    continue;
                }
                let d = self.cost[j];
                if bland {
                    if d < -opts.eps {
                        entering = Some(j);
                        break;
                    }
                } else if d < best {
                    best = d;
                    entering = Some(j);
                }
            }
            let Some(c) = entering else {
                return Ok(());
            };

            let mut leaving: Option<(usize, f64)> = None;
            for r in 0..self.t.len() {
                let a = self.t[r][c];
                if a > opts.eps {
                    let ratio = self.rhs(r) / a;
                    leaving = match leaving {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - opts.eps
                                || (ratio <= lratio + opts.eps && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((r, ratio)) = leaving else {
                return Err(SimplexError::Unbounded { column: c });
            };
            if ratio.abs() <= opts.eps {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, c);
        }
    }
}

/// Minimizes `lp.objective . x` over the feasible region.
type NormalRow = (Vec<(usize, f64)>, Relation, f64);

pub fn minimize(lp: &LinearProgram, opts: &SimplexOptions) -> Result<SimplexSolution, SimplexError> {
    let n = lp.num_vars;
    let m = lp.rows.len();

    // Normalize to nonnegative right-hand sides.
    let rows: Vec<NormalRow> = lp
        .rows
        .iter()
        .map(|row| {
            if row.rhs < 0.0 {
                let rel = match row.rel {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                let coeffs = row.coeffs.iter().map(|&(j, a)| (j, -a)).collect();
                (coeffs, rel, -row.rhs)
            } else {
                (row.coeffs.clone(), row.rel, row.rhs)
            }
        })
        .collect();

    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let cols = n + n_slack + n_art;
    let art_start = n + n_slack;

    let mut t = vec![vec![0.0; cols + 1]; m];
    let mut basis = vec![0usize; m];
    let (mut next_slack, mut next_art) = (n, art_start);
    for (i, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        for &(j, a) in coeffs {
            t[i][j] += a;
        }
        t[i][cols] = *rhs;
        match rel {
            Relation::Le => {
                t[i][next_slack] = 1.0;
                basis[i] = next_slack;
                next_slack += 1;
            }
            Relation::Ge => {
                t[i][next_slack] = -1.0;
                next_slack += 1;
                t[i][next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            }
            Relation::Eq => {
                t[i][next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
            }
        }
    }

    let mut tab = Tableau {
        t,
        cost: vec![0.0; cols + 1],
        basis,
        cols,
        iterations: 0,
    };

    if n_art > 0 {
        // Phase one: minimize the sum of artificials.
        for j in art_start..cols {
            tab.cost[j] = 1.0;
        }
        for i in 0..m {
            if tab.basis[i] >= art_start {
                for k in 0..=cols {
                    tab.cost[k] -= tab.t[i][k];
                }
            }
        }
        tab.optimize(&|_| true, opts)?;
        let residual = -tab.cost[cols];
        if residual > opts.eps.max(1e-9) {
            return Err(SimplexError::Infeasible {
                phase_one_objective: residual,
            });
        }
        // Drive zero-valued artificials out of the basis where possible.
        for i in 0..m {
            if tab.basis[i] >= art_start {
                if let Some(j) = (0..art_start).find(|&j| tab.t[i][j].abs() > 1e-9) {
                    tab.pivot(i, j);
                }
            }
        }
    }

    // Phase two.
    tab.cost = vec![0.0; cols + 1];
    tab.cost[..n].copy_from_slice(&lp.objective);
    for i in 0..m {
        let cb = if tab.basis[i] < n { lp.objective[tab.basis[i]] } else { 0.0 };
        if cb != 0.0 {
            for k in 0..=cols {
                tab.cost[k] -= cb * tab.t[i][k];
            }
        }
    }
    tab.optimize(&|j| j < art_start, opts)?;

    let mut x = vec![0.0; n];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = tab.rhs(i);
        }
    }
    let objective = lp.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(SimplexSolution {
        x,
        objective,
        iterations: tab.iterations,
    })
}
