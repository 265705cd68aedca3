//! Per-rank action orderings for the supported pipeline schedules.
//!
//! Stages and microbatches are 1-indexed, ranks are 0-indexed. A rank hosts
//! one stage for GPipe and 1F1B, and several "virtual" stages (chunks) for
//! interleaved 1F1B and ZBV.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "gpipe", alias = "GPipe")]
    GPipe,
    #[serde(rename = "1f1b", alias = "OneFOneB")]
    OneFOneB,
    #[serde(rename = "interleaved_1f1b", alias = "Interleaved1F1B")]
    InterleavedOneFOneB,
    #[serde(rename = "zbv", alias = "ZBV")]
    Zbv,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::GPipe => "gpipe",
            ScheduleKind::OneFOneB => "1f1b",
            ScheduleKind::InterleavedOneFOneB => "interleaved_1f1b",
            ScheduleKind::Zbv => "zbv",
        })
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schedule: ScheduleKind,
    pub num_ranks: usize,
    #[serde(default = "one")]
    pub stages_per_rank: usize,
    pub num_microbatches: usize,
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} R={} C={} M={}",
            self.schedule, self.num_ranks, self.stages_per_rank, self.num_microbatches
        )
    }
}

impl PipelineConfig {
    /// Builds and validates a config.
    pub fn new(
        schedule: ScheduleKind,
        num_ranks: usize,
        stages_per_rank: usize,
        num_microbatches: usize,
    ) -> Result<Self> {
        let config = PipelineConfig {
            schedule,
            num_ranks,
            stages_per_rank,
            num_microbatches,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ranks == 0 {
            return Err(Error::config(self, "num_ranks must be positive"));
        }
        if self.stages_per_rank == 0 {
            return Err(Error::config(self, "stages_per_rank must be positive"));
        }
        if self.num_microbatches == 0 {
            return Err(Error::config(self, "num_microbatches must be positive"));
        }
        let supported = match self.schedule {
            ScheduleKind::GPipe | ScheduleKind::OneFOneB => self.stages_per_rank == 1,
            ScheduleKind::InterleavedOneFOneB => self.stages_per_rank >= 2,
            ScheduleKind::Zbv => self.stages_per_rank == 2,
        };
        if !supported {
            return Err(Error::UnsupportedSchedule {
                kind: self.schedule,
                stages_per_rank: self.stages_per_rank,
            });
        }
        Ok(())
    }

    /// Total number of (virtual) stages, `R * C`.
    pub fn num_stages(&self) -> usize {
        self.num_ranks * self.stages_per_rank
    }

    pub fn num_actions(&self) -> usize {
        2 * self.num_stages() * self.num_microbatches
    }

    /// Rank hosting a 1-indexed stage.
    pub fn stage_to_rank(&self, stage: usize) -> Result<usize> {
        let s = self.num_stages();
        if stage == 0 || stage > s {
            return Err(Error::domain("stage", stage, format!("1..={s}")));
        }
        let r = self.num_ranks;
        Ok(match self.schedule {
            ScheduleKind::GPipe | ScheduleKind::OneFOneB => stage - 1,
            ScheduleKind::InterleavedOneFOneB => (stage - 1) % r,
            ScheduleKind::Zbv => {
                if stage <= r {
                    stage - 1
                } else {
                    2 * r - stage
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    #[serde(rename = "f")]
    Forward,
    #[serde(rename = "b")]
    Backward,
}

/// One forward or backward execution of a microbatch at a stage.
///
/// The derived ordering is (kind, stage, microbatch); all deterministic
/// iteration in the crate relies on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId {
    pub kind: ActionKind,
    #[serde(rename = "s")]
    pub stage: usize,
    #[serde(rename = "m")]
    pub microbatch: usize,
}

impl ActionId {
    pub fn new(kind: ActionKind, microbatch: usize, stage: usize) -> Self {
        ActionId {
            kind,
            stage,
            microbatch,
        }
    }

    pub fn forward(microbatch: usize, stage: usize) -> Self {
        Self::new(ActionKind::Forward, microbatch, stage)
    }

    pub fn backward(microbatch: usize, stage: usize) -> Self {
        Self::new(ActionKind::Backward, microbatch, stage)
    }

    pub fn is_backward(&self) -> bool {
        self.kind == ActionKind::Backward
    }

    /// The action of the same kind and stage on the other microbatch index.
    pub fn with_microbatch(self, microbatch: usize) -> Self {
        ActionId { microbatch, ..self }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ActionKind::Forward => 'f',
            ActionKind::Backward => 'b',
        };
        write!(f, "{k}({},{})", self.microbatch, self.stage)
    }
}

/// Ordered action lists, one per rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTimeline {
    pub ranks: Vec<Vec<ActionId>>,
    /// `stage_rank[s - 1]` is the rank hosting stage `s`.
    pub stage_rank: Vec<usize>,
}

impl RankTimeline {
    pub fn num_ranks(&self) -> usize {
        self.ranks.len()
    }

    pub fn num_stages(&self) -> usize {
        self.stage_rank.len()
    }

    pub fn rank_of_stage(&self, stage: usize) -> Option<usize> {
        stage.checked_sub(1).and_then(|i| self.stage_rank.get(i)).copied()
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionId> {
        self.ranks.iter().flatten()
    }

    /// Checks completeness, stage placement and per-rank causality.
    pub fn check(&self, config: &PipelineConfig) -> Result<()> {
        let s = config.num_stages();
        let m = config.num_microbatches;
        if self.ranks.len() != config.num_ranks || self.stage_rank.len() != s {
            return Err(Error::Structure(format!(
                "timeline shape ({} ranks, {} stages) does not match {config}",
                self.ranks.len(),
                self.stage_rank.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (rank, list) in self.ranks.iter().enumerate() {
            let mut forwarded = BTreeSet::new();
            for &a in list {
                if a.stage == 0 || a.stage > s || a.microbatch == 0 || a.microbatch > m {
                    return Err(Error::Structure(format!("{a} out of range for {config}")));
                }
                if self.stage_rank[a.stage - 1] != rank {
                    return Err(Error::Structure(format!("{a} placed on rank {rank}")));
                }
                if !seen.insert(a) {
                    return Err(Error::Structure(format!("{a} appears twice")));
                }
                match a.kind {
                    ActionKind::Forward => {
                        forwarded.insert((a.microbatch, a.stage));
                    }
                    ActionKind::Backward => {
                        if !forwarded.contains(&(a.microbatch, a.stage)) {
                            return Err(Error::Structure(format!(
                                "{a} precedes its forward on rank {rank}"
                            )));
                        }
                    }
                }
            }
        }
        if seen.len() != config.num_actions() {
            return Err(Error::Structure(format!(
                "timeline has {} actions, expected {}",
                seen.len(),
                config.num_actions()
            )));
        }
        Ok(())
    }
}

/// Generates the per-rank action order for `config`.
pub fn build_schedule(config: &PipelineConfig) -> Result<RankTimeline> {
    config.validate()?;
    let stage_rank = (1..=config.num_stages())
        .map(|s| config.stage_to_rank(s))
        .collect::<Result<Vec<_>>>()?;
    let ranks = match config.schedule {
        ScheduleKind::GPipe => gpipe(config),
        ScheduleKind::OneFOneB => one_f_one_b(config),
        ScheduleKind::InterleavedOneFOneB => interleaved(config),
        ScheduleKind::Zbv => zbv(config)?,
    };
    let timeline = RankTimeline { ranks, stage_rank };
    timeline.check(config)?;
    Ok(timeline)
}

fn gpipe(config: &PipelineConfig) -> Vec<Vec<ActionId>> {
    let m = config.num_microbatches;
    (0..config.num_ranks)
        .map(|rank| {
            let stage = rank + 1;
            (1..=m)
                .map(|mb| ActionId::forward(mb, stage))
                .chain((1..=m).map(|mb| ActionId::backward(mb, stage)))
                .collect()
        })
        .collect()
}

fn one_f_one_b(config: &PipelineConfig) -> Vec<Vec<ActionId>> {
    let m = config.num_microbatches;
    let r = config.num_ranks;
    (0..r)
        .map(|rank| {
            let stage = rank + 1;
            // Warm-up count includes the first steady-state forward.
            let warmup = (r - rank).min(m);
            let mut list = Vec::with_capacity(2 * m);
            list.extend((1..=warmup).map(|mb| ActionId::forward(mb, stage)));
            let mut next_fwd = warmup + 1;
            for mb in 1..=m {
                list.push(ActionId::backward(mb, stage));
                if next_fwd <= m {
                    list.push(ActionId::forward(next_fwd, stage));
                    next_fwd += 1;
                }
            }
            list
        })
        .collect()
}

/// Megatron-style interleaving over virtual microbatches: microbatches are
/// processed in groups of `R`, each group running through every chunk
/// before the next group starts. A trailing partial group is allowed.
fn interleaved(config: &PipelineConfig) -> Vec<Vec<ActionId>> {
    let r = config.num_ranks;
    let c = config.stages_per_rank;
    let m = config.num_microbatches;
    let total = m * c;

    let mut fwd_order = Vec::with_capacity(total);
    let mut bwd_order = Vec::with_capacity(total);
    for group_start in (1..=m).step_by(r) {
        let group = group_start..=(group_start + r - 1).min(m);
        for chunk in 0..c {
            fwd_order.extend(group.clone().map(|mb| (chunk, mb)));
        }
        for chunk in (0..c).rev() {
            bwd_order.extend(group.clone().map(|mb| (chunk, mb)));
        }
    }

    (0..r)
        .map(|rank| {
            let stage = |chunk: usize| chunk * r + rank + 1;
            let fwd = |i: usize| {
                let (chunk, mb) = fwd_order[i];
                ActionId::forward(mb, stage(chunk))
            };
            let bwd = |i: usize| {
                let (chunk, mb) = bwd_order[i];
                ActionId::backward(mb, stage(chunk))
            };
            let warmup = ((r - rank - 1) * 2 + (c - 1) * r).min(total);
            let mut list = Vec::with_capacity(2 * total);
            list.extend((0..warmup).map(fwd));
            for i in 0..total - warmup {
                list.push(fwd(warmup + i));
                list.push(bwd(i));
            }
            list.extend((total - warmup..total).map(bwd));
            list
        })
        .collect()
}

/// V-shaped schedule produced by event-driven list scheduling with unit
/// costs (forward 1, backward 2). Each idle rank picks, in priority order:
/// backward on its second chunk, backward on its first chunk, forward on its
/// second chunk, forward on its first chunk (capped at `R` microbatches in
/// flight). Microbatches run in order within each stage.
fn zbv(config: &PipelineConfig) -> Result<Vec<Vec<ActionId>>> {
    const FWD_COST: u64 = 1;
    const BWD_COST: u64 = 2;

    let r = config.num_ranks;
    let m = config.num_microbatches;
    let s = config.num_stages();

    // finish[kind][stage - 1][mb - 1]: completion time, None if not finished.
    let mut finish = vec![vec![vec![None::<u64>; m]; s]; 2];
    // Next microbatch to run per (kind, stage); microbatches go in order.
    let mut next = vec![vec![1usize; s]; 2];
    let mut busy: Vec<Option<(u64, ActionId)>> = vec![None; r];
    let mut lists: Vec<Vec<ActionId>> = vec![Vec::with_capacity(4 * m); r];
    let mut now = 0u64;
    let mut remaining = config.num_actions();

    let done = |finish: &Vec<Vec<Vec<Option<u64>>>>, a: ActionId, now: u64| -> bool {
        let k = a.kind as usize;
        matches!(finish[k][a.stage - 1][a.microbatch - 1], Some(t) if t <= now)
    };

    while remaining > 0 {
        // Retire actions completing at `now`.
        for slot in busy.iter_mut() {
            if let Some((t, a)) = *slot {
                if t <= now {
                    finish[a.kind as usize][a.stage - 1][a.microbatch - 1] = Some(t);
                    *slot = None;
                }
            }
        }
        for rank in 0..r {
            if busy[rank].is_some() {
                continue;
            }
            let first = rank + 1;
            let second = 2 * r - rank;
            let in_flight = (next[0][first - 1] - 1) - (next[1][first - 1] - 1);
            let candidates = [
                (ActionKind::Backward, second),
                (ActionKind::Backward, first),
                (ActionKind::Forward, second),
                (ActionKind::Forward, first),
            ];
            let pick = candidates.into_iter().find_map(|(kind, stage)| {
                let mb = next[kind as usize][stage - 1];
                if mb > m {
                    return None;
                }
                if kind == ActionKind::Forward && stage == first && in_flight >= r {
                    return None;
                }
                let a = ActionId::new(kind, mb, stage);
                let ready = match kind {
                    ActionKind::Forward => stage == 1 || done(&finish, ActionId::forward(mb, stage - 1), now),
                    ActionKind::Backward => {
                        done(&finish, ActionId::forward(mb, stage), now)
                            && (stage == s || done(&finish, ActionId::backward(mb, stage + 1), now))
                    }
                };
                ready.then_some(a)
            });
            if let Some(a) = pick {
                let cost = if a.is_backward() { BWD_COST } else { FWD_COST };
                next[a.kind as usize][a.stage - 1] += 1;
                busy[rank] = Some((now + cost, a));
                lists[rank].push(a);
                remaining -= 1;
            }
        }
        match busy.iter().flatten().map(|(t, _)| *t).min() {
            Some(t) => now = t,
            None if remaining > 0 => {
                return Err(Error::Structure(format!("zbv list scheduling stalled for {config}")));
            }
            None => {}
        }
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: ScheduleKind, r: usize, c: usize, m: usize) -> PipelineConfig {
        PipelineConfig::new(kind, r, c, m).unwrap()
    }

    #[test]
    fn stage_to_rank_examples() {
        assert_eq!(cfg(ScheduleKind::OneFOneB, 4, 1, 4).stage_to_rank(3).unwrap(), 2);
        let zbv = cfg(ScheduleKind::Zbv, 4, 2, 4);
        assert_eq!(zbv.stage_to_rank(5).unwrap(), 3);
        assert_eq!(zbv.stage_to_rank(8).unwrap(), 0);
        // Rank 3 hosts chunks 3 and 2R-1-3 = 4, i.e. stages 4 and 5.
        let rank3: Vec<_> = (1..=8).filter(|&s| zbv.stage_to_rank(s).unwrap() == 3).collect();
        assert_eq!(rank3, vec![4, 5]);
        let inter = cfg(ScheduleKind::InterleavedOneFOneB, 4, 2, 4);
        assert_eq!(inter.stage_to_rank(6).unwrap(), 1);
    }

    #[test]
    fn stage_out_of_range() {
        let c = cfg(ScheduleKind::GPipe, 2, 1, 2);
        assert!(matches!(c.stage_to_rank(0), Err(Error::Domain { .. })));
        assert!(matches!(c.stage_to_rank(3), Err(Error::Domain { .. })));
    }

    #[test]
    fn unsupported_combinations() {
        for (kind, c) in [
            (ScheduleKind::GPipe, 2),
            (ScheduleKind::OneFOneB, 3),
            (ScheduleKind::InterleavedOneFOneB, 1),
            (ScheduleKind::Zbv, 3),
        ] {
            assert!(matches!(
                PipelineConfig::new(kind, 2, c, 2),
                Err(Error::UnsupportedSchedule { .. })
            ));
        }
        assert!(matches!(
            PipelineConfig::new(ScheduleKind::GPipe, 0, 1, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::new(ScheduleKind::GPipe, 2, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gpipe_two_ranks() {
        let t = build_schedule(&cfg(ScheduleKind::GPipe, 2, 1, 2)).unwrap();
        let f = ActionId::forward;
        let b = ActionId::backward;
        assert_eq!(t.ranks[0], vec![f(1, 1), f(2, 1), b(1, 1), b(2, 1)]);
        assert_eq!(t.ranks[1], vec![f(1, 2), f(2, 2), b(1, 2), b(2, 2)]);
    }

    #[test]
    fn one_f_one_b_two_ranks() {
        let t = build_schedule(&cfg(ScheduleKind::OneFOneB, 2, 1, 2)).unwrap();
        let f = ActionId::forward;
        let b = ActionId::backward;
        assert_eq!(t.ranks[1], vec![f(1, 2), b(1, 2), f(2, 2), b(2, 2)]);
        assert_eq!(t.ranks[0], vec![f(1, 1), f(2, 1), b(1, 1), b(2, 1)]);
    }

    #[test]
    fn one_f_one_b_steady_state() {
        let t = build_schedule(&cfg(ScheduleKind::OneFOneB, 4, 1, 6)).unwrap();
        let names: Vec<String> = t.ranks[1].iter().map(|a| a.to_string()).collect();
        assert_eq!(
            names,
            [
                "f(1,2)", "f(2,2)", "f(3,2)", "b(1,2)", "f(4,2)", "b(2,2)", "f(5,2)", "b(3,2)",
                "f(6,2)", "b(4,2)", "b(5,2)", "b(6,2)"
            ]
        );
    }

    #[test]
    fn degenerate_single_rank() {
        let t = build_schedule(&cfg(ScheduleKind::GPipe, 1, 1, 1)).unwrap();
        assert_eq!(t.ranks, vec![vec![ActionId::forward(1, 1), ActionId::backward(1, 1)]]);
    }

    #[test]
    fn interleaved_rank_hosts_round_robin_chunks() {
        let c = cfg(ScheduleKind::InterleavedOneFOneB, 2, 2, 4);
        let t = build_schedule(&c).unwrap();
        let stages: BTreeSet<usize> = t.ranks[1].iter().map(|a| a.stage).collect();
        assert_eq!(stages, BTreeSet::from([2, 4]));
        // Last rank warms up with (C-1)*R forwards.
        let warm: Vec<String> = t.ranks[1][..3].iter().map(|a| a.to_string()).collect();
        assert_eq!(warm, ["f(1,2)", "f(2,2)", "f(1,4)"]);
    }

    #[test]
    fn zbv_v_shape() {
        for r in 1..=4 {
            for m in 1..=6 {
                let c = cfg(ScheduleKind::Zbv, r, 2, m);
                let t = build_schedule(&c).unwrap();
                for (rank, list) in t.ranks.iter().enumerate() {
                    let stages: BTreeSet<usize> = list.iter().map(|a| a.stage).collect();
                    assert_eq!(stages, BTreeSet::from([rank + 1, 2 * r - rank]));
                }
            }
        }
    }

    #[test]
    fn ordering_is_kind_stage_microbatch() {
        let mut v = vec![
            ActionId::backward(1, 1),
            ActionId::forward(2, 1),
            ActionId::forward(1, 2),
            ActionId::forward(1, 1),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                ActionId::forward(1, 1),
                ActionId::forward(2, 1),
                ActionId::forward(1, 2),
                ActionId::backward(1, 1)
            ]
        );
    }
}
