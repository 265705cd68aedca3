//! Brute-force search over quantized freeze ratios. Used as an oracle for
//! the LP on small instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BudgetScope;
use crate::dag::{MakespanEvaluator, Node, PipelineDag};
use crate::error::{Error, Result};
use crate::schedule::ActionId;
use crate::timing::TimingProfile;

/// Upper limit on evaluated points.
pub const MAX_POINTS: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Every point that satisfies the budgets.
    Exhaustive,
    /// Only points where no single ratio can grow by one step. The makespan
    /// never increases with a ratio, so the optimum value is the same.
    Frontier,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub best_makespan: f64,
    /// Ratios of the best point with the least total freezing.
    pub best_ratios: BTreeMap<ActionId, f64>,
    pub evaluated: u64,
}

struct StageGrid {
    nodes: Vec<usize>,
    points: Vec<Vec<u32>>,
}

fn enumerate(n: usize, steps: u32, cap: u32, frontier: bool) -> Vec<Vec<u32>> {
    fn rec(
        cur: &mut Vec<u32>,
        n: usize,
        steps: u32,
        left: u32,
        frontier: bool,
        out: &mut Vec<Vec<u32>>,
    ) {
        if cur.len() == n {
            let saturated = left == 0 || cur.iter().all(|&k| k == steps);
            if !frontier || saturated {
                out.push(cur.clone());
            }
            return;
        }
        for k in 0..=steps.min(left) {
            cur.push(k);
            rec(cur, n, steps, left - k, frontier, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), n, steps, cap, frontier, &mut out);
    out
}

pub fn grid_search(
    dag: &PipelineDag,
    profile: &TimingProfile,
    r_max: f64,
    resolution: f64,
    scope: BudgetScope,
    mode: GridMode,
) -> Result<GridResult> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::domain("grid resolution", resolution, "(0, 1]"));
    }
    if !(0.0..=1.0).contains(&r_max) {
        return Err(Error::domain("r_max", r_max, "[0, 1]"));
    }
    let steps = (1.0 / resolution).round() as u32;
    let eval = MakespanEvaluator::new(dag)?;
    let max = eval.weights_from(&profile.max_durations())?;

    let mut stages: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for (i, a) in dag.action_nodes() {
        let b = profile.bounds(&a)?;
        let entry = stages.entry(a.stage).or_default();
        let freezable = a.is_backward() && b.is_freezable();
        if freezable {
            entry.0.push(i);
        }
        if freezable || scope == BudgetScope::AllStageNodes {
            entry.1 += 1;
        }
    }
    let grids: Vec<StageGrid> = stages
        .into_values()
        .filter(|(nodes, _)| !nodes.is_empty())
        .map(|(nodes, count)| {
            let cap = (r_max * count as f64 * steps as f64 + 1e-9).floor() as u32;
            let points = enumerate(nodes.len(), steps, cap, mode == GridMode::Frontier);
            StageGrid { nodes, points }
        })
        .collect();
    let total = grids
        .iter()
        .try_fold(1u64, |acc, g| acc.checked_mul(g.points.len() as u64))
        .unwrap_or(u64::MAX);
    if total > MAX_POINTS {
        return Err(Error::domain("grid points", total, format!("<= {MAX_POINTS}")));
    }

    let range: Vec<f64> = dag
        .nodes()
        .iter()
        .map(|n| match n {
            Node::Action(a) => profile.get(a).map_or(0.0, |b| b.range()),
            _ => 0.0,
        })
        .collect();
    let mut weights = max.clone();
    let mut start = vec![0.0; dag.num_nodes()];
    let mut choice = vec![0usize; grids.len()];
    let mut best = (f64::INFINITY, u64::MAX, choice.clone());
    let mut evaluated = 0u64;
    let step = 1.0 / steps as f64;

    loop {
        let mut total_steps = 0u64;
        for (g, &c) in grids.iter().zip(&choice) {
            for (&i, &k) in g.nodes.iter().zip(&g.points[c]) {
                weights[i] = max[i] - (k as f64 * step).min(1.0) * range[i];
                total_steps += k as u64;
            }
        }
        let makespan = eval.eval_into(&weights, &mut start);
        evaluated += 1;
        if makespan < best.0 - 1e-12 || (makespan <= best.0 + 1e-12 && total_steps < best.1) {
            best = (makespan.min(best.0), total_steps, choice.clone());
        }

        // Odometer over the per-stage point lists.
        let mut pos = 0;
        loop {
            if pos == grids.len() {
                let mut best_ratios = BTreeMap::new();
                for (g, &c) in grids.iter().zip(&best.2) {
                    for (&i, &k) in g.nodes.iter().zip(&g.points[c]) {
                        let a = dag.node(i).action().expect("action node");
                        best_ratios.insert(a, (k as f64 * step).min(1.0));
                    }
                }
                return Ok(GridResult {
                    best_makespan: best.0,
                    best_ratios,
                    evaluated,
                });
            }
            choice[pos] += 1;
            if choice[pos] < grids[pos].points.len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}
