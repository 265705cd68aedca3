//! Execution-dependency DAG of one pipeline batch.
//!
//! Nodes are the `2*M*S` actions plus a source and a destination sentinel.
//! Edges come from four rules: sentinel connections, intra-stage order,
//! inter-stage data flow, and the per-rank order fixed by the schedule.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schedule::{ActionId, ActionKind, PipelineConfig, RankTimeline};

/// Per-action execution time in milliseconds.
pub type Durations = BTreeMap<ActionId, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Source,
    Action(ActionId),
    Destination,
}

impl Node {
    pub fn action(&self) -> Option<ActionId> {
        match self {
            Node::Action(a) => Some(*a),
            _ => None,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Source => f.write_str("src"),
            Node::Destination => f.write_str("dst"),
            Node::Action(a) => a.fmt(f),
        }
    }
}

impl Serialize for Node {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineDag {
    nodes: Vec<Node>,
    index: HashMap<Node, usize>,
    edges: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    rank: Vec<Option<usize>>,
    num_stages: usize,
    num_microbatches: usize,
}

impl PipelineDag {
    /// Assembles a graph without validating it. Nodes are sorted and edges
    /// deduplicated; edges naming unknown nodes are an error.
    pub fn from_parts(
        actions: impl IntoIterator<Item = (ActionId, Option<usize>)>,
        edges: impl IntoIterator<Item = (Node, Node)>,
    ) -> Result<Self> {
        let mut ranks: BTreeMap<Node, Option<usize>> = actions
            .into_iter()
            .map(|(a, r)| (Node::Action(a), r))
            .collect();
        ranks.insert(Node::Source, None);
        ranks.insert(Node::Destination, None);
        let nodes: Vec<Node> = ranks.keys().copied().collect();
        let rank: Vec<Option<usize>> = ranks.values().copied().collect();
        let index: HashMap<Node, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();

        let mut set = BTreeSet::new();
        for (from, to) in edges {
            let (Some(&i), Some(&j)) = (index.get(&from), index.get(&to)) else {
                return Err(Error::Structure(format!("edge {from}->{to} names an unknown node")));
            };
            set.insert((i, j));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut succ = vec![Vec::new(); nodes.len()];
        let mut pred = vec![Vec::new(); nodes.len()];
        for &(i, j) in &edges {
            succ[i].push(j);
            pred[j].push(i);
        }
        let actions = nodes.iter().filter_map(Node::action);
        let (num_stages, num_microbatches) = actions.fold((0, 0), |(s, m), a| {
            (s.max(a.stage), m.max(a.microbatch))
        });
        Ok(PipelineDag {
            nodes,
            index,
            edges,
            succ,
            pred,
            rank,
            num_stages,
            num_microbatches,
        })
    }

    /// Copy of this graph with one extra edge, unvalidated.
    pub fn with_edge(&self, from: Node, to: Node) -> Result<Self> {
        let actions = self.action_nodes().map(|(i, a)| (a, self.rank[i]));
        let edges = self.edges().chain(std::iter::once((from, to)));
        Self::from_parts(actions, edges.collect::<Vec<_>>())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn num_microbatches(&self) -> usize {
        self.num_microbatches
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Node {
        self.nodes[i]
    }

    pub fn index_of(&self, node: &Node) -> Option<usize> {
        self.index.get(node).copied()
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn destination(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn rank_of(&self, i: usize) -> Option<usize> {
        self.rank[i]
    }

    pub fn edges(&self) -> impl Iterator<Item = (Node, Node)> + '_ {
        self.edges.iter().map(|&(i, j)| (self.nodes[i], self.nodes[j]))
    }

    pub fn edge_indices(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.pred[i]
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    pub fn action_nodes(&self) -> impl Iterator<Item = (usize, ActionId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.action().map(|a| (i, a)))
    }

    pub fn contains_edge(&self, from: Node, to: Node) -> bool {
        match (self.index_of(&from), self.index_of(&to)) {
            (Some(i), Some(j)) => self.edges.binary_search(&(i, j)).is_ok(),
            _ => false,
        }
    }

    /// Kahn's algorithm, always releasing the smallest ready node first.
    /// On a cycle, returns the smallest node left unprocessed.
    pub fn topological_order(&self) -> std::result::Result<Vec<usize>, Node> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.pred.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &j in &self.succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(Reverse(j));
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            let stuck = (0..n).find(|&i| indeg[i] > 0).expect("unprocessed node");
            Err(self.nodes[stuck])
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<[String; 2]> = self
            .edges()
            .map(|(a, b)| [a.to_string(), b.to_string()])
            .collect();
        serde_json::json!({
            "nodes": self.nodes.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "edges": edges,
        })
    }
}

/// Builds the dependency graph of `timeline` and checks it is a well-formed DAG.
pub fn build_dag(timeline: &RankTimeline, config: &PipelineConfig) -> Result<PipelineDag> {
    timeline.check(config)?;
    let m = config.num_microbatches;
    let s = config.num_stages();
    let f = ActionId::forward;
    let b = ActionId::backward;
    let act = Node::Action;

    let mut edges = Vec::new();
    edges.push((Node::Source, act(f(1, 1))));
    edges.push((act(b(m, 1)), Node::Destination));
    for stage in 1..=s {
        for mb in 1..=m {
            for kind in [ActionKind::Forward, ActionKind::Backward] {
                if mb < m {
                    let a = ActionId::new(kind, mb, stage);
                    edges.push((act(a), act(a.with_microbatch(mb + 1))));
                }
            }
            edges.push((act(f(mb, stage)), act(b(mb, stage))));
            if stage < s {
                edges.push((act(f(mb, stage)), act(f(mb, stage + 1))));
            }
            if stage > 1 {
                edges.push((act(b(mb, stage)), act(b(mb, stage - 1))));
            }
        }
    }
    for list in &timeline.ranks {
        for pair in list.windows(2) {
            edges.push((act(pair[0]), act(pair[1])));
        }
    }

    let actions = timeline.ranks.iter().enumerate().flat_map(|(rank, list)| {
        list.iter().map(move |a| (*a, Some(rank)))
    });
    let dag = PipelineDag::from_parts(actions, edges)?;

    let report = validate_dag(&dag);
    if let Some(node) = report.cycle_at {
        return Err(Error::Cycle(node.to_string()));
    }
    if !report.ok {
        return Err(Error::Structure(report.summary()));
    }
    Ok(dag)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub acyclic: bool,
    /// Some node on (or downstream of) a cycle, when one exists.
    pub cycle_at: Option<Node>,
    pub source_in_degree: usize,
    pub destination_out_degree: usize,
    pub unreachable_from_source: Vec<Node>,
    pub cannot_reach_destination: Vec<Node>,
}

impl ValidationReport {
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if let Some(n) = self.cycle_at {
            parts.push(format!("cycle through {n}"));
        }
        if self.source_in_degree != 0 {
            parts.push(format!("source has in-degree {}", self.source_in_degree));
        }
        if self.destination_out_degree != 0 {
            parts.push(format!("destination has out-degree {}", self.destination_out_degree));
        }
        if let Some(n) = self.unreachable_from_source.first() {
            parts.push(format!(
                "{} node(s) unreachable from source (first: {n})",
                self.unreachable_from_source.len()
            ));
        }
        if let Some(n) = self.cannot_reach_destination.first() {
            parts.push(format!(
                "{} node(s) cannot reach destination (first: {n})",
                self.cannot_reach_destination.len()
            ));
        }
        if parts.is_empty() {
            "ok".into()
        } else {
            parts.join("; ")
        }
    }
}

fn reachable(start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

pub fn validate_dag(dag: &PipelineDag) -> ValidationReport {
    let cycle_at = dag.topological_order().err();
    let from_src = reachable(dag.source(), &dag.succ);
    let to_dst = reachable(dag.destination(), &dag.pred);
    let unreachable_from_source: Vec<Node> = (0..dag.num_nodes())
        .filter(|&i| !from_src[i])
        .map(|i| dag.node(i))
        .collect();
    let cannot_reach_destination: Vec<Node> = (0..dag.num_nodes())
        .filter(|&i| !to_dst[i])
        .map(|i| dag.node(i))
        .collect();
    let source_in_degree = dag.pred[dag.source()].len();
    let destination_out_degree = dag.succ[dag.destination()].len();
    let ok = cycle_at.is_none()
        && source_in_degree == 0
        && destination_out_degree == 0
        && unreachable_from_source.is_empty()
        && cannot_reach_destination.is_empty();
    ValidationReport {
        ok,
        acyclic: cycle_at.is_none(),
        cycle_at,
        source_in_degree,
        destination_out_degree,
        unreachable_from_source,
        cannot_reach_destination,
    }
}

/// Start time of every node under one set of durations.
#[derive(Debug, Clone, PartialEq)]
pub struct StartTimes {
    /// Indexed like [`PipelineDag::nodes`].
    pub start: Vec<f64>,
    pub makespan: f64,
}

impl StartTimes {
    pub fn of(&self, dag: &PipelineDag, node: Node) -> Option<f64> {
        dag.index_of(&node).map(|i| self.start[i])
    }
}

/// Longest-path evaluator with the topological order precomputed, for
/// callers that evaluate many duration vectors on one graph.
#[derive(Debug, Clone)]
pub struct MakespanEvaluator<'a> {
    dag: &'a PipelineDag,
    order: Vec<usize>,
}

impl<'a> MakespanEvaluator<'a> {
    pub fn new(dag: &'a PipelineDag) -> Result<Self> {
        let order = dag
            .topological_order()
            .map_err(|n| Error::Cycle(n.to_string()))?;
        Ok(MakespanEvaluator { dag, order })
    }

    /// `weights` is indexed like the graph's nodes. Writes start times into
    /// `start` and returns the destination's start time.
    pub fn eval_into(&self, weights: &[f64], start: &mut [f64]) -> f64 {
        for &i in &self.order {
            start[i] = self.dag.pred[i]
                .iter()
                .map(|&j| start[j] + weights[j])
                .fold(0.0, f64::max);
        }
        start[self.dag.destination()]
    }

    pub fn eval(&self, weights: &[f64]) -> StartTimes {
        let mut start = vec![0.0; self.dag.num_nodes()];
        let makespan = self.eval_into(weights, &mut start);
        StartTimes { start, makespan }
    }

    /// Per-node weights from a duration map; sentinels get zero.
    pub fn weights_from(&self, durations: &Durations) -> Result<Vec<f64>> {
        node_weights(self.dag, durations)
    }
}

pub fn node_weights(dag: &PipelineDag, durations: &Durations) -> Result<Vec<f64>> {
    dag.nodes
        .iter()
        .map(|n| match n {
            Node::Action(a) => {
                let w = *durations.get(a).ok_or(Error::MissingWeight(*a))?;
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::domain("duration", w, "finite and >= 0"));
                }
                Ok(w)
            }
            _ => Ok(0.0),
        })
        .collect()
}

/// Start times by dynamic programming over a topological order; the
/// makespan is the destination's start time.
pub fn longest_path_start_times(dag: &PipelineDag, durations: &Durations) -> Result<StartTimes> {
    let eval = MakespanEvaluator::new(dag)?;
    let weights = eval.weights_from(durations)?;
    Ok(eval.eval(&weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn gpipe(r: usize, m: usize) -> (PipelineConfig, PipelineDag) {
        let c = PipelineConfig::new(ScheduleKind::GPipe, r, 1, m).unwrap();
        let t = build_schedule(&c).unwrap();
        let d = build_dag(&t, &c).unwrap();
        (c, d)
    }

    fn uniform(dag: &PipelineDag, f: f64, b: f64) -> Durations {
        dag.action_nodes()
            .map(|(_, a)| (a, if a.is_backward() { b } else { f }))
            .collect()
    }

    #[test]
    fn gpipe_2x2_counts() {
        let (_, d) = gpipe(2, 2);
        assert_eq!(d.num_nodes(), 10);
        assert_eq!(d.num_edges(), 16);
        // The rank chain supplies f(M,s) -> b(1,s).
        assert!(d.contains_edge(
            Node::Action(ActionId::forward(2, 1)),
            Node::Action(ActionId::backward(1, 1))
        ));
    }

    #[test]
    fn degenerate_dag() {
        let (_, d) = gpipe(1, 1);
        let edges: Vec<(String, String)> =
            d.edges().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        assert_eq!(
            edges,
            vec![
                ("src".into(), "f(1,1)".into()),
                ("f(1,1)".into(), "b(1,1)".into()),
                ("b(1,1)".into(), "dst".into()),
            ]
        );
    }

    #[test]
    fn makespan_examples() {
        let (_, d) = gpipe(2, 2);
        let st = longest_path_start_times(&d, &uniform(&d, 1.0, 2.0)).unwrap();
        assert_eq!(st.makespan, 9.0);
        assert_eq!(st.start[d.source()], 0.0);
        let st = longest_path_start_times(&d, &uniform(&d, 1.0, 1.0)).unwrap();
        assert_eq!(st.makespan, 6.0);
    }

    #[test]
    fn single_node_makespan() {
        let a = ActionId::forward(1, 1);
        let d = PipelineDag::from_parts(
            [(a, Some(0))],
            [(Node::Source, Node::Action(a)), (Node::Action(a), Node::Destination)],
        )
        .unwrap();
        let st = longest_path_start_times(&d, &Durations::from([(a, 5.0)])).unwrap();
        assert_eq!(st.makespan, 5.0);
    }

    #[test]
    fn missing_weight_is_an_error() {
        let (_, d) = gpipe(2, 2);
        let mut w = uniform(&d, 1.0, 2.0);
        w.remove(&ActionId::backward(2, 2));
        assert_eq!(
            longest_path_start_times(&d, &w),
            Err(Error::MissingWeight(ActionId::backward(2, 2)))
        );
    }

    #[test]
    fn start_times_are_tight() {
        let (_, d) = gpipe(3, 4);
        let w = uniform(&d, 1.5, 2.25);
        let st = longest_path_start_times(&d, &w).unwrap();
        let weights = node_weights(&d, &w).unwrap();
        for j in 0..d.num_nodes() {
            for &i in d.predecessors(j) {
                assert!(st.start[j] >= st.start[i] + weights[i]);
            }
            if let Some(best) = d
                .predecessors(j)
                .iter()
                .map(|&i| st.start[i] + weights[i])
                .reduce(f64::max)
            {
                assert_eq!(st.start[j], best);
            }
        }
    }

    #[test]
    fn validation_reports_injected_cycle() {
        let (_, d) = gpipe(2, 2);
        assert!(validate_dag(&d).ok);
        let bad = d
            .with_edge(
                Node::Action(ActionId::backward(1, 1)),
                Node::Action(ActionId::forward(1, 1)),
            )
            .unwrap();
        let report = validate_dag(&bad);
        assert!(!report.ok);
        assert!(!report.acyclic);
        assert!(report.cycle_at.is_some());
    }

    #[test]
    fn validation_reports_isolated_node() {
        let (_, d) = gpipe(1, 1);
        let lonely = ActionId::forward(1, 2);
        let actions = d
            .action_nodes()
            .map(|(i, a)| (a, d.rank_of(i)))
            .chain([(lonely, Some(1))]);
        let bad = PipelineDag::from_parts(actions.collect::<Vec<_>>(), d.edges().collect::<Vec<_>>())
            .unwrap();
        let report = validate_dag(&bad);
        assert!(!report.ok);
        assert!(report.acyclic);
        assert_eq!(report.unreachable_from_source, vec![Node::Action(lonely)]);
        assert_eq!(report.cannot_reach_destination, vec![Node::Action(lonely)]);
    }

    #[test]
    fn json_export() {
        let (_, d) = gpipe(1, 1);
        let v = d.to_json();
        assert_eq!(v["nodes"], serde_json::json!(["src", "f(1,1)", "b(1,1)", "dst"]));
        assert_eq!(v["edges"][0], serde_json::json!(["src", "f(1,1)"]));
    }
}
