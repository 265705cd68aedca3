//! Freeze-ratio linear program over a pipeline DAG.
//!
//! Variables are a start time `P_i` and a duration `w_i` per node. Each DAG
//! edge gives `P_j >= P_i + w_i`, durations are boxed by the monitored
//! bounds, and every stage gets an average-freeze budget
//! `sum_i delta_i (w_i^max - w_i) <= r_max |B_s|` where
//! `delta_i = 1 / (w_i^max - w_i^min)`. The primary objective is the
//! destination start time; ties are broken toward less freezing.
//!
//! All times are divided by the unfrozen makespan before solving so the
//! tolerances mean the same thing for every profile.

pub mod grid;
pub mod simplex;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dag::{MakespanEvaluator, Node, PipelineDag};
use crate::error::{Error, Result};
use crate::schedule::{ActionId, ActionKind};
use crate::timing::{Bounds, TimingProfile};

use self::simplex::{LinearProgram, Relation, SimplexOptions};

/// Default feasibility tolerance, relative to the unfrozen makespan.
pub const DEFAULT_TOL: f64 = 1e-7;

/// Which nodes of a stage count toward `|V_s|` in the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    /// Only backward nodes whose duration can shrink.
    #[default]
    BackwardOnly,
    /// Every action of the stage, forwards included.
    AllStageNodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Minimize the makespan, then minimize freezing at that makespan.
    #[default]
    Lexicographic,
    /// Single solve of `P_d - lambda * sum delta_i w_i` in normalized units.
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageBudget {
    pub stage: usize,
    /// Node indices of the freezable backward actions of the stage.
    pub nodes: Vec<usize>,
    /// `|V_s|` under the chosen scope.
    pub count: usize,
    pub r_max: f64,
}

#[derive(Debug, Clone)]
pub struct LpProblem<'a> {
    dag: &'a PipelineDag,
    /// Per node, sentinels at `[0, 0]`.
    bounds: Vec<Bounds>,
    delta: Vec<f64>,
    budgets: Vec<StageBudget>,
    r_max: f64,
    scope: BudgetScope,
    makespan_max: f64,
    makespan_min: f64,
}

impl<'a> LpProblem<'a> {
    pub fn dag(&self) -> &'a PipelineDag {
        self.dag
    }

    /// One `P` and one `w` per node, sentinels included.
    pub fn num_variables(&self) -> usize {
        2 * self.dag.num_nodes()
    }

    pub fn num_precedence_constraints(&self) -> usize {
        self.dag.num_edges()
    }

    pub fn budgets(&self) -> &[StageBudget] {
        &self.budgets
    }

    pub fn delta(&self, node: usize) -> f64 {
        self.delta[node]
    }

    pub fn bounds(&self, node: usize) -> Bounds {
        self.bounds[node]
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn scope(&self) -> BudgetScope {
        self.scope
    }

    pub fn makespan_max(&self) -> f64 {
        self.makespan_max
    }

    pub fn makespan_min(&self) -> f64 {
        self.makespan_min
    }

    fn scale(&self) -> f64 {
        if self.makespan_max > 0.0 {
            self.makespan_max
        } else {
            1.0
        }
    }

    /// Plain-text dump of every constraint, one per line, in ms units.
    pub fn dump(&self) -> String {
        let d = self.dag;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# freeze-ratio LP: {} nodes, {} variables, r_max = {}",
            d.num_nodes(),
            self.num_variables(),
            self.r_max
        );
        let _ = writeln!(out, "minimize P[dst]  then  maximize sum delta_i * w_i");
        let _ = writeln!(out, "# delta");
        for i in 0..d.num_nodes() {
            if self.delta[i] > 0.0 {
                let _ = writeln!(out, "delta[{}] = {}", d.node(i), self.delta[i]);
            }
        }
        let _ = writeln!(out, "# precedence");
        for (a, b) in d.edges() {
            let _ = writeln!(out, "P[{b}] - P[{a}] - w[{a}] >= 0");
        }
        let _ = writeln!(out, "# bounds");
        for i in 0..d.num_nodes() {
            let b = self.bounds[i];
            let _ = writeln!(out, "{} <= w[{}] <= {}", b.w_min, d.node(i), b.w_max);
        }
        let _ = writeln!(out, "P[src] = 0");
        let _ = writeln!(out, "# stage budgets");
        for budget in &self.budgets {
            let terms: Vec<String> = budget
                .nodes
                .iter()
                .map(|&i| format!("{} * ({} - w[{}])", self.delta[i], self.bounds[i].w_max, d.node(i)))
                .collect();
            let _ = writeln!(
                out,
                "stage {}: {} <= {}",
                budget.stage,
                terms.join(" + "),
                budget.r_max * budget.count as f64
            );
        }
        out
    }
}

/// Builds the LP for `dag` with bounds from `profile`.
pub fn build_lp<'a>(
    dag: &'a PipelineDag,
    profile: &TimingProfile,
    r_max: f64,
    scope: BudgetScope,
) -> Result<LpProblem<'a>> {
    if !(0.0..=1.0).contains(&r_max) {
        return Err(Error::domain("r_max", r_max, "[0, 1]"));
    }
    let bounds: Vec<Bounds> = dag
        .nodes()
        .iter()
        .map(|n| match n {
            Node::Action(a) => profile.bounds(a),
            _ => Ok(Bounds::fixed(0.0)),
        })
        .collect::<Result<_>>()?;
    let delta: Vec<f64> = bounds
        .iter()
        .map(|b| if b.is_freezable() { 1.0 / b.range() } else { 0.0 })
        .collect();

    let mut by_stage: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for (i, a) in dag.action_nodes() {
        let entry = by_stage.entry(a.stage).or_default();
        let freezable = a.kind == ActionKind::Backward && bounds[i].is_freezable();
        if freezable {
            entry.0.push(i);
        }
        if freezable || scope == BudgetScope::AllStageNodes {
            entry.1 += 1;
        }
    }
    let budgets = by_stage
        .into_iter()
        .filter(|(_, (nodes, _))| !nodes.is_empty())
        .map(|(stage, (nodes, count))| StageBudget {
            stage,
            nodes,
            count,
            r_max,
        })
        .collect();

    let eval = MakespanEvaluator::new(dag)?;
    let w_max: Vec<f64> = bounds.iter().map(|b| b.w_max).collect();
    let w_min: Vec<f64> = bounds.iter().map(|b| b.w_min).collect();
    Ok(LpProblem {
        dag,
        makespan_max: eval.eval(&w_max).makespan,
        makespan_min: eval.eval(&w_min).makespan,
        bounds,
        delta,
        budgets,
        r_max,
        scope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    /// Start time per node, ms.
    pub start: Vec<f64>,
    /// Duration per node, ms.
    pub duration: Vec<f64>,
    /// Optimal destination start time from the primary solve, ms.
    pub makespan: f64,
    pub iterations: usize,
}

/// Column layout: `P` for every node but the source (pinned at 0), then the
/// normalized slack `x_i = (w_i - w_i^min) / scale` for every node that can
/// shrink. Fixed durations are constants.
struct Columns {
    p: Vec<Option<usize>>,
    x: Vec<Option<usize>>,
    count: usize,
}

impl Columns {
    fn new(problem: &LpProblem<'_>) -> Self {
        let n = problem.dag.num_nodes();
        let mut count = 0;
        let p = (0..n)
            .map(|i| {
                (i != problem.dag.source()).then(|| {
                    count += 1;
                    count - 1
                })
            })
            .collect();
        let x = (0..n)
            .map(|i| {
                problem.bounds[i].is_freezable().then(|| {
                    count += 1;
                    count - 1
                })
            })
            .collect();
        Columns { p, x, count }
    }
}

fn base_program(problem: &LpProblem<'_>, cols: &Columns) -> LinearProgram {
    let scale = problem.scale();
    let dag = problem.dag;
    let mut lp = LinearProgram::new(cols.count);

    // [1] P_i - P_j + x_i <= -w_min_i
    for &(i, j) in dag.edge_indices() {
        let mut coeffs = Vec::with_capacity(3);
        if let Some(c) = cols.p[i] {
            coeffs.push((c, 1.0));
        }
        if let Some(c) = cols.p[j] {
            coeffs.push((c, -1.0));
        }
        if let Some(c) = cols.x[i] {
            coeffs.push((c, 1.0));
        }
        lp.add_row(coeffs, Relation::Le, -problem.bounds[i].w_min / scale);
    }
    // [2] x_i <= range_i
    for i in 0..dag.num_nodes() {
        if let Some(c) = cols.x[i] {
            lp.add_row(vec![(c, 1.0)], Relation::Le, problem.bounds[i].range() / scale);
        }
    }
    // [4] sum (1 - x_i / range_i) <= r_max |V_s|
    for budget in &problem.budgets {
        let coeffs = budget
            .nodes
            .iter()
            .map(|&i| (cols.x[i].expect("freezable"), -scale / problem.bounds[i].range()))
            .collect();
        let rhs = budget.r_max * budget.count as f64 - budget.nodes.len() as f64;
        lp.add_row(coeffs, Relation::Le, rhs);
    }
    lp
}

/// Tie-break objective: minimize `-sum delta_i w_i` (constants dropped).
fn freezing_objective(problem: &LpProblem<'_>, cols: &Columns, weight: f64) -> Vec<(usize, f64)> {
    let scale = problem.scale();
    (0..problem.dag.num_nodes())
        .filter_map(|i| cols.x[i].map(|c| (c, -weight * scale / problem.bounds[i].range())))
        .collect()
}

fn numerical(e: simplex::SimplexError, pass: &str) -> Error {
    Error::Numerical(format!("{pass}: {e}"))
}

/// Solves the LP; `tol` is relative to the unfrozen makespan.
pub fn solve_lp(problem: &LpProblem<'_>, mode: LambdaMode, tol: f64) -> Result<LpSolution> {
    let cols = Columns::new(problem);
    let scale = problem.scale();
    let dst = cols.p[problem.dag.destination()].expect("destination column");
    let opts = SimplexOptions::default();

    let mut lp = base_program(problem, &cols);
    let (x, makespan_norm, iterations) = match mode {
        LambdaMode::Lexicographic => {
            lp.objective[dst] = 1.0;
            let first = simplex::minimize(&lp, &opts).map_err(|e| numerical(e, "makespan pass"))?;
            let best = first.x[dst];
            lp.add_row(vec![(dst, 1.0)], Relation::Le, best + 0.1 * tol);
            lp.objective = vec![0.0; cols.count];
            for (c, v) in freezing_objective(problem, &cols, 1.0) {
                lp.objective[c] = v;
            }
            let second = simplex::minimize(&lp, &opts).map_err(|e| numerical(e, "tie-break pass"))?;
            (second.x, best, first.iterations + second.iterations)
        }
        LambdaMode::Explicit(lambda) => {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::domain("lambda", lambda, ">= 0"));
            }
            lp.objective[dst] = 1.0;
            for (c, v) in freezing_objective(problem, &cols, lambda) {
                lp.objective[c] = v;
            }
            let sol = simplex::minimize(&lp, &opts).map_err(|e| numerical(e, "weighted pass"))?;
            let p = sol.x[dst];
            (sol.x, p, sol.iterations)
        }
    };

    let violation = lp.max_violation(&x);
    if violation > tol {
        return Err(Error::Numerical(format!(
            "solution violates constraints by {violation:e} (tolerance {tol:e})"
        )));
    }

    let n = problem.dag.num_nodes();
    let start = (0..n)
        .map(|i| cols.p[i].map_or(0.0, |c| x[c] * scale))
        .collect();
    let duration = (0..n)
        .map(|i| problem.bounds[i].w_min + cols.x[i].map_or(0.0, |c| x[c] * scale))
        .collect();
    Ok(LpSolution {
        start,
        duration,
        makespan: makespan_norm * scale,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRatio {
    pub m: usize,
    pub s: usize,
    pub r: f64,
}

/// Expected freeze ratio per backward action and the resulting makespans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub makespan_opt: f64,
    pub makespan_base: f64,
    pub makespan_floor: f64,
    pub ratios: Vec<ActionRatio>,
    pub r_max: f64,
    pub num_stages: usize,
    pub num_microbatches: usize,
}

impl FreezePlan {
    pub fn ratio_map(&self) -> BTreeMap<ActionId, f64> {
        self.ratios
            .iter()
            .map(|r| (ActionId::backward(r.m, r.s), r.r))
            .collect()
    }

    /// Ratio of an action; forwards and unknown actions are 0.
    pub fn ratio(&self, a: &ActionId) -> f64 {
        if !a.is_backward() {
            return 0.0;
        }
        self.ratios
            .iter()
            .find(|r| r.m == a.microbatch && r.s == a.stage)
            .map_or(0.0, |r| r.r)
    }

    /// Mean ratio over each stage's backward actions, indexed by stage - 1.
    pub fn stage_averages(&self) -> Vec<f64> {
        let mut sums = vec![(0.0, 0usize); self.num_stages];
        for r in &self.ratios {
            if let Some(e) = sums.get_mut(r.s.wrapping_sub(1)) {
                e.0 += r.r;
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }

    /// Average over all backward actions.
    pub fn mean_ratio(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().map(|r| r.r).sum::<f64>() / self.ratios.len() as f64
    }

    /// Plan with the same ratio on every backward action.
    pub fn uniform(dag: &PipelineDag, profile: &TimingProfile, ratio: f64, r_max: f64) -> Result<Self> {
        let ratios: BTreeMap<ActionId, f64> = dag
            .action_nodes()
            .filter(|(_, a)| a.is_backward())
            .map(|(_, a)| (a, ratio))
            .collect();
        Self::from_ratios(dag, profile, &ratios, r_max)
    }

    /// Plan for given per-action ratios; `makespan_opt` is their longest path.
    pub fn from_ratios(
        dag: &PipelineDag,
        profile: &TimingProfile,
        ratios: &BTreeMap<ActionId, f64>,
        r_max: f64,
    ) -> Result<Self> {
        let eval = MakespanEvaluator::new(dag)?;
        let makespan = |d| -> Result<f64> { Ok(eval.eval(&eval.weights_from(&d)?).makespan) };
        let mut list: Vec<ActionRatio> = dag
            .action_nodes()
            .filter(|(_, a)| a.is_backward())
            .map(|(_, a)| ActionRatio {
                m: a.microbatch,
                s: a.stage,
                r: ratios.get(&a).copied().unwrap_or(0.0),
            })
            .collect();
        list.sort_by_key(|r| (r.s, r.m));
        Ok(FreezePlan {
            makespan_opt: makespan(profile.durations_at(ratios))?,
            makespan_base: makespan(profile.max_durations())?,
            makespan_floor: makespan(profile.min_durations())?,
            ratios: list,
            r_max,
            num_stages: dag.num_stages(),
            num_microbatches: dag.num_microbatches(),
        })
    }
}

/// Converts solved durations into freeze ratios.
pub fn extract_freeze_plan(
    problem: &LpProblem<'_>,
    solution: &LpSolution,
    tol: f64,
) -> Result<FreezePlan> {
    let dag = problem.dag;
    let slack = tol * problem.scale();
    let mut ratios = Vec::new();
    for (i, a) in dag.action_nodes() {
        let b = problem.bounds[i];
        let w = solution.duration[i];
        if w < b.w_min - slack || w > b.w_max + slack {
            return Err(Error::Consistency(format!(
                "solved duration {w} of {a} outside [{}, {}]",
                b.w_min, b.w_max
            )));
        }
        if a.is_backward() {
            let r = (problem.delta[i] * (b.w_max - w)).clamp(0.0, 1.0);
            ratios.push(ActionRatio {
                m: a.microbatch,
                s: a.stage,
                r,
            });
        }
    }
    ratios.sort_by_key(|r| (r.s, r.m));
    Ok(FreezePlan {
        makespan_opt: solution.makespan,
        makespan_base: problem.makespan_max,
        makespan_floor: problem.makespan_min,
        ratios,
        r_max: problem.r_max,
        num_stages: dag.num_stages(),
        num_microbatches: dag.num_microbatches(),
    })
}

/// Builds, solves and extracts in one go.
pub fn optimize_freeze_plan(
    dag: &PipelineDag,
    profile: &TimingProfile,
    r_max: f64,
    mode: LambdaMode,
    scope: BudgetScope,
) -> Result<FreezePlan> {
    let problem = build_lp(dag, profile, r_max, scope)?;
    let solution = solve_lp(&problem, mode, DEFAULT_TOL)?;
    extract_freeze_plan(&problem, &solution, DEFAULT_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub tol: f64,
    pub scope: BudgetScope,
    pub grid_resolution: f64,
    /// Run the grid oracle when the instance has at most this many
    /// freezable actions.
    pub grid_max_nodes: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tol: DEFAULT_TOL,
            scope: BudgetScope::BackwardOnly,
            grid_resolution: 0.05,
            grid_max_nodes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCheck {
    pub resolution: f64,
    pub grid_best: f64,
    pub allowed_gap: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub ok: bool,
    pub makespan_recomputed: f64,
    pub makespan_matches: bool,
    pub within_envelope: bool,
    /// `(stage, mean ratio over its freezable actions)`.
    pub stage_averages: Vec<(usize, f64)>,
    pub budget_ok: bool,
    pub grid: Option<GridCheck>,
    pub failures: Vec<String>,
}

pub fn verify_solution(
    dag: &PipelineDag,
    profile: &TimingProfile,
    plan: &FreezePlan,
    r_max: f64,
) -> Result<VerificationReport> {
    verify_solution_with(dag, profile, plan, r_max, &VerifyOptions::default())
}

/// Independent checks of a plan: recomputed makespan, budgets, and (on small
/// instances) a grid search over ratios.
pub fn verify_solution_with(
    dag: &PipelineDag,
    profile: &TimingProfile,
    plan: &FreezePlan,
    r_max: f64,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let mut failures = Vec::new();
    let eval = MakespanEvaluator::new(dag)?;
    let durations = profile.durations_at(&plan.ratio_map());
    let recomputed = eval.eval(&eval.weights_from(&durations)?).makespan;
    let scale = if plan.makespan_base > 0.0 { plan.makespan_base } else { 1.0 };
    let makespan_matches = (recomputed - plan.makespan_opt).abs() <= opts.tol * scale;
    if !makespan_matches {
        failures.push(format!(
            "recomputed makespan {recomputed} differs from plan {}",
            plan.makespan_opt
        ));
    }
    let within_envelope = plan.makespan_floor - opts.tol * scale <= plan.makespan_opt
        && plan.makespan_opt <= plan.makespan_base + opts.tol * scale;
    if !within_envelope {
        failures.push(format!(
            "makespan {} outside [{}, {}]",
            plan.makespan_opt, plan.makespan_floor, plan.makespan_base
        ));
    }

    let mut stage_sums: BTreeMap<usize, (f64, usize, usize)> = BTreeMap::new();
    for (_, a) in dag.action_nodes() {
        let b = profile.bounds(&a)?;
        let entry = stage_sums.entry(a.stage).or_default();
        let freezable = a.is_backward() && b.is_freezable();
        if freezable {
            entry.0 += plan.ratio(&a);
            entry.1 += 1;
        }
        if freezable || opts.scope == BudgetScope::AllStageNodes {
            entry.2 += 1;
        }
    }
    let mut stage_averages = Vec::new();
    let mut budget_ok = true;
    for (stage, (sum, freezable, count)) in stage_sums {
        if freezable == 0 {
            continue;
        }
        let avg = sum / count as f64;
        stage_averages.push((stage, sum / freezable as f64));
        if avg > r_max + opts.tol {
            budget_ok = false;
            failures.push(format!("stage {stage} average ratio {avg} exceeds {r_max}"));
        }
    }

    let freezable = profile
        .iter()
        .filter(|(a, b)| a.is_backward() && b.is_freezable())
        .count();
    let grid = if freezable <= opts.grid_max_nodes {
        let result = grid::grid_search(
            dag,
            profile,
            r_max,
            opts.grid_resolution,
            opts.scope,
            grid::GridMode::Frontier,
        )?;
        let spread: f64 = profile
            .iter()
            .filter(|(a, _)| a.is_backward())
            .map(|(_, b)| b.range())
            .sum();
        let allowed_gap = opts.grid_resolution * spread;
        let ok = plan.makespan_opt <= result.best_makespan + allowed_gap + opts.tol * scale;
        if !ok {
            failures.push(format!(
                "LP makespan {} worse than grid best {} by more than {allowed_gap}",
                plan.makespan_opt, result.best_makespan
            ));
        }
        Some(GridCheck {
            resolution: opts.grid_resolution,
            grid_best: result.best_makespan,
            allowed_gap,
            ok,
        })
    } else {
        None
    };

    Ok(VerificationReport {
        ok: failures.is_empty(),
        makespan_recomputed: recomputed,
        makespan_matches,
        within_envelope,
        stage_averages,
        budget_ok,
        grid,
        failures,
    })
}
