#![allow(dead_code)]

use pipefreeze_core::{
    build_dag, build_schedule, Bounds, PipelineConfig, PipelineDag, ScheduleKind, StageTiming, TimingProfile,
};
use rand::Rng;

pub fn pipeline(kind: ScheduleKind, ranks: usize, chunks: usize, mbs: usize) -> (PipelineConfig, PipelineDag) {
    let c = PipelineConfig::new(kind, ranks, chunks, mbs).unwrap();
    let dag = build_dag(&build_schedule(&c).unwrap(), &c).unwrap();
    (c, dag)
}

pub fn uniform(c: &PipelineConfig, f: f64, act: f64, param: f64) -> TimingProfile {
    let t = StageTiming {
        forward_ms: f,
        backward_act_ms: act,
        backward_param_ms: param,
    };
    TimingProfile::from_stage_defaults(c, &[t]).unwrap()
}

/// Random bounds on every action; forwards fixed, some backwards fixed.
pub fn random_profile<R: Rng>(dag: &PipelineDag, rng: &mut R) -> TimingProfile {
    TimingProfile::from_bounds(dag.action_nodes().map(|(_, a)| {
        let lo = rng.random_range(1..=4) as f64;
        let b = if a.is_backward() && rng.random_bool(0.8) {
            Bounds { w_min: lo, w_max: lo + rng.random_range(1..=4) as f64 }
        } else {
            Bounds::fixed(lo)
        };
        (a, b)
    }))
    .unwrap()
}

/// Longest source-to-destination path by enumerating every path.
pub fn brute_force_makespan(dag: &PipelineDag, weights: &[f64]) -> f64 {
    fn walk(dag: &PipelineDag, w: &[f64], node: usize, acc: f64, best: &mut f64) {
        if node == dag.destination() {
            *best = best.max(acc);
            return;
        }
        for &next in dag.successors(node) {
            walk(dag, w, next, acc + w[node], best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    walk(dag, weights, dag.source(), 0.0, &mut best);
    best
}
