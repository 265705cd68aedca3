//! Step-level freezing control: phase machine, ramped freeze ratios, mask
//! sampling and the APF / AutoFreeze scoring baselines.

use std::fmt;

use bitvec::prelude::*;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::FreezePlan;
use crate::schedule::ActionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    /// Last warm-up step.
    pub t_w: u64,
    /// Last monitoring step; the LP is solved here.
    pub t_m: u64,
    /// Last step of the progressive ramp.
    pub t_f: u64,
    pub t_total: u64,
}

impl PhasePlan {
    pub fn new(t_w: u64, t_m: u64, t_f: u64, t_total: u64) -> Result<Self> {
        let plan = PhasePlan { t_w, t_m, t_f, t_total };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.t_w && self.t_w < self.t_m && self.t_m <= self.t_f && self.t_f <= self.t_total) {
            return Err(Error::domain(
                "phase plan",
                format!("({}, {}, {}, {})", self.t_w, self.t_m, self.t_f, self.t_total),
                "0 < T_w < T_m <= T_f <= T_total",
            ));
        }
        Ok(())
    }

    /// Last step of upper-bound monitoring.
    pub fn midpoint(&self) -> u64 {
        self.t_w + (self.t_m - self.t_w).div_ceil(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    MonitorUpper,
    MonitorLower,
    Solve,
    ProgressiveFreeze,
    StableFreeze,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Warmup => "warmup",
            Phase::MonitorUpper => "monitor_upper",
            Phase::MonitorLower => "monitor_lower",
            Phase::Solve => "solve",
            Phase::ProgressiveFreeze => "progressive_freeze",
            Phase::StableFreeze => "stable_freeze",
        };
        f.write_str(s)
    }
}

pub fn phase_of(t: u64, plan: &PhasePlan) -> Result<Phase> {
    if t == 0 || t > plan.t_total {
        return Err(Error::domain("step", t, format!("[1, {}]", plan.t_total)));
    }
    Ok(if t <= plan.t_w {
        Phase::Warmup
    } else if t == plan.t_m {
        Phase::Solve
    } else if t <= plan.midpoint() {
        Phase::MonitorUpper
    } else if t < plan.t_m {
        Phase::MonitorLower
    } else if t <= plan.t_f {
        Phase::ProgressiveFreeze
    } else {
        Phase::StableFreeze
    })
}

/// Ramped ratio after the solve step. Steps at or before `T_m` give 0.
pub fn actual_freeze_ratio(t: u64, plan: &PhasePlan, r: f64) -> f64 {
    if t <= plan.t_m {
        return 0.0;
    }
    if plan.t_f == plan.t_m {
        return r;
    }
    let progress = (t - plan.t_m) as f64 / (plan.t_f - plan.t_m) as f64;
    r.min(r * progress)
}

/// Ratio applied to an action at step `t`: nothing during warm-up and
/// upper-bound monitoring, everything during lower-bound monitoring and the
/// solve step, the ramp afterwards.
pub fn scheduled_freeze_ratio(t: u64, plan: &PhasePlan, r: f64) -> Result<f64> {
    Ok(match phase_of(t, plan)? {
        Phase::Warmup | Phase::MonitorUpper => 0.0,
        Phase::MonitorLower | Phase::Solve => 1.0,
        Phase::ProgressiveFreeze | Phase::StableFreeze => actual_freeze_ratio(t, plan, r),
    })
}

/// `floor(ratio * n)`, robust to ratios like `0.29` that land just below an
/// integer after multiplication.
pub fn target_count(n_params: usize, ratio: f64) -> usize {
    let exact = ratio.clamp(0.0, 1.0) * n_params as f64;
    ((exact + 1e-9).floor() as usize).min(n_params)
}

/// Set bits mark frozen parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    bits: BitVec,
    pub owner: Option<ActionId>,
    pub step: u64,
}

impl FreezeMask {
    pub fn empty(n_params: usize) -> Self {
        FreezeMask {
            bits: bitvec![0; n_params],
            owner: None,
            step: 0,
        }
    }

    pub fn full(n_params: usize) -> Self {
        FreezeMask {
            bits: bitvec![1; n_params],
            owner: None,
            step: 0,
        }
    }

    pub fn from_indices(n_params: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = Self::empty(n_params);
        for i in indices {
            if i >= n_params {
                return Err(Error::domain("mask index", i, format!("< {n_params}")));
            }
            mask.bits.set(i, true);
        }
        Ok(mask)
    }

    pub fn with_owner(mut self, owner: ActionId, step: u64) -> Self {
        self.owner = Some(owner);
        self.step = step;
        self
    }

    pub fn n_params(&self) -> usize {
        self.bits.len()
    }

    pub fn popcount(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.popcount() as f64 / self.n_params() as f64
        }
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.bits.get(i).is_some_and(|b| *b)
    }

    pub fn frozen(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn bits(&self) -> &BitSlice {
        &self.bits
    }

    pub fn is_subset_of(&self, other: &FreezeMask) -> bool {
        self.n_params() == other.n_params() && self.frozen().all(|i| other.is_frozen(i))
    }
}

/// Uniform subset of exactly `floor(ratio * n_params)` indices.
pub fn sample_mask<R: Rng + ?Sized>(n_params: usize, ratio: f64, rng: &mut R) -> FreezeMask {
    let k = target_count(n_params, ratio);
    let mut mask = FreezeMask::empty(n_params);
    for i in index::sample(rng, n_params, k) {
        mask.bits.set(i, true);
    }
    mask
}

/// Grows or shrinks `base` to exactly `target` frozen indices, keeping as
/// much of it as possible.
pub fn reconcile_mask<R: Rng + ?Sized>(base: &FreezeMask, target: usize, rng: &mut R) -> Result<FreezeMask> {
    let n = base.n_params();
    if target > n {
        return Err(Error::domain("target count", target, format!("<= {n}")));
    }
    let have = base.popcount();
    let mut out = base.clone();
    if have < target {
        let free: Vec<usize> = base.bits.iter_zeros().collect();
        for j in index::sample(rng, free.len(), target - have) {
            out.bits.set(free[j], true);
        }
    } else if have > target {
        let set: Vec<usize> = base.frozen().collect();
        for j in index::sample(rng, set.len(), have - target) {
            out.bits.set(set[j], false);
        }
    }
    Ok(out)
}

/// Relative gradient-norm change of a layer.
pub fn autofreeze_score(norm_prev: f64, norm_cur: f64) -> Result<f64> {
    if norm_prev <= 0.0 {
        return Err(Error::domain("previous gradient norm", norm_prev, "> 0"));
    }
    Ok((norm_prev - norm_cur).abs() / norm_prev)
}

/// Nearest-rank percentile, or `None` when the rank is 0.
fn nearest_rank(scores: &[f64], percentile: f64) -> Option<f64> {
    let rank = (percentile / 100.0 * scores.len() as f64).ceil() as usize;
    if rank == 0 {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Extends the frozen prefix over layers scoring strictly below the
/// `percentile`-th percentile of all scores.
pub fn autofreeze_select(scores: &[f64], frozen_prefix_len: usize, percentile: f64) -> usize {
    let start = frozen_prefix_len.min(scores.len());
    let Some(threshold) = nearest_rank(scores, percentile) else {
        return start;
    };
    start + scores[start..].iter().take_while(|&&s| s < threshold).count()
}

pub const DEFAULT_APF_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApfState {
    pub e: Vec<f64>,
    pub e_abs: Vec<f64>,
    pub alpha: f64,
}

impl ApfState {
    pub fn new(n_params: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain("APF alpha", alpha, "(0, 1)"));
        }
        Ok(ApfState {
            e: vec![0.0; n_params],
            e_abs: vec![0.0; n_params],
            alpha,
        })
    }

    /// Folds in one update and returns the per-parameter scores.
    pub fn update(&mut self, delta: &[f64]) -> Result<Vec<f64>> {
        if delta.len() != self.e.len() {
            return Err(Error::domain("APF update length", delta.len(), self.e.len()));
        }
        let a = self.alpha;
        for ((e, e_abs), &d) in self.e.iter_mut().zip(&mut self.e_abs).zip(delta) {
            *e = a * *e + (1.0 - a) * d;
            *e_abs = a * *e_abs + (1.0 - a) * d.abs();
        }
        Ok(self.scores())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.e
            .iter()
            .zip(&self.e_abs)
            .map(|(e, ea)| if *ea == 0.0 { 1.0 } else { (e.abs() / ea).min(1.0) })
            .collect()
    }
}

pub fn apf_update(state: &ApfState, delta: &[f64]) -> Result<(Vec<f64>, ApfState)> {
    let mut next = state.clone();
    let scores = next.update(delta)?;
    Ok((scores, next))
}

/// Parameters whose score fell below `threshold`.
pub fn apf_eligible(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < threshold)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub step: u64,
    pub stage: usize,
    pub action: String,
    pub popcount: usize,
    pub n_params: usize,
}

/// Per-cell popcounts plus per-parameter freeze counts by stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskHistory {
    rows: Vec<MaskRecord>,
    counts: Vec<(usize, Vec<u64>, u64)>,
}

impl MaskHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, stage: usize, mask: &FreezeMask) {
        self.rows.push(MaskRecord {
            step: mask.step,
            stage,
            action: mask.owner.map_or_else(|| "-".to_string(), |a| a.to_string()),
            popcount: mask.popcount(),
            n_params: mask.n_params(),
        });
        let pos = match self.counts.iter().position(|(s, c, _)| *s == stage && c.len() == mask.n_params()) {
            Some(p) => p,
            None => {
                self.counts.push((stage, vec![0; mask.n_params()], 0));
                self.counts.len() - 1
            }
        };
        let (_, counts, cells) = &mut self.counts[pos];
        *cells += 1;
        for i in mask.frozen() {
            counts[i] += 1;
        }
    }

    pub fn rows(&self) -> &[MaskRecord] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.rows).expect("mask rows serialize")
    }

    /// Fraction of recorded masks that froze each parameter of `stage`.
    pub fn frequencies(&self, stage: usize) -> Option<Vec<f64>> {
        self.counts
            .iter()
            .find(|(s, _, _)| *s == stage)
            .map(|(_, counts, cells)| counts.iter().map(|&c| c as f64 / *cells as f64).collect())
    }

    pub fn frequency_csv(&self) -> String {
        let mut out = String::from("stage,index,frequency\n");
        let mut stages: Vec<usize> = self.counts.iter().map(|(s, _, _)| *s).collect();
        stages.sort_unstable();
        for stage in stages {
            for (i, f) in self.frequencies(stage).unwrap_or_default().iter().enumerate() {
                out.push_str(&format!("{stage},{i},{f}\n"));
            }
        }
        out
    }
}

/// Per-stage driver of the step loop; owns its rng stream.
#[derive(Debug, Clone)]
pub struct StageController {
    stage: usize,
    n_params: usize,
    rng: ChaCha8Rng,
}

impl StageController {
    pub fn new(stage: usize, n_params: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage as u64);
        StageController { stage, n_params, rng }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    /// Fresh masks for each of this stage's `actions` at step `t`.
    pub fn step(
        &mut self,
        t: u64,
        phases: &PhasePlan,
        plan: &FreezePlan,
        actions: &[ActionId],
    ) -> Result<Vec<FreezeMask>> {
        actions
            .iter()
            .filter(|a| a.stage == self.stage)
            .map(|a| {
                let r = scheduled_freeze_ratio(t, phases, plan.ratio(a))?;
                Ok(sample_mask(self.n_params, r, &mut self.rng).with_owner(*a, t))
            })
            .collect()
    }

    /// Metric-aware variant: reconciles a baseline method's mask to the
    /// scheduled count instead of sampling from scratch.
    pub fn step_hybrid(
        &mut self,
        t: u64,
        phases: &PhasePlan,
        plan: &FreezePlan,
        actions: &[ActionId],
        base: &FreezeMask,
    ) -> Result<Vec<FreezeMask>> {
        if base.n_params() != self.n_params {
            return Err(Error::domain("base mask size", base.n_params(), self.n_params));
        }
        actions
            .iter()
            .filter(|a| a.stage == self.stage)
            .map(|a| {
                let r = scheduled_freeze_ratio(t, phases, plan.ratio(a))?;
                let target = target_count(self.n_params, r);
                Ok(reconcile_mask(base, target, &mut self.rng)?.with_owner(*a, t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama8b() -> PhasePlan {
        PhasePlan::new(160, 200, 250, 300).unwrap()
    }

    #[test]
    fn phase_examples() {
        let p = llama8b();
        assert_eq!(p.midpoint(), 180);
        assert_eq!(phase_of(100, &p).unwrap(), Phase::Warmup);
        assert_eq!(phase_of(160, &p).unwrap(), Phase::Warmup);
        assert_eq!(phase_of(180, &p).unwrap(), Phase::MonitorUpper);
        assert_eq!(phase_of(195, &p).unwrap(), Phase::MonitorLower);
        assert_eq!(phase_of(200, &p).unwrap(), Phase::Solve);
        assert_eq!(phase_of(250, &p).unwrap(), Phase::ProgressiveFreeze);
        assert_eq!(phase_of(300, &p).unwrap(), Phase::StableFreeze);
        assert!(phase_of(0, &p).is_err());
        assert!(phase_of(301, &p).is_err());
    }

    #[test]
    fn invalid_plans() {
        assert!(PhasePlan::new(0, 10, 20, 30).is_err());
        assert!(PhasePlan::new(10, 10, 20, 30).is_err());
        assert!(PhasePlan::new(10, 20, 15, 30).is_err());
        assert!(PhasePlan::new(10, 20, 40, 30).is_err());
        let short = PhasePlan::new(10, 11, 11, 11).unwrap();
        assert_eq!(short.midpoint(), 11);
        assert_eq!(phase_of(11, &short).unwrap(), Phase::Solve);
    }

    #[test]
    fn afr_examples() {
        let p = llama8b();
        assert_eq!(actual_freeze_ratio(225, &p, 0.8), 0.4);
        assert_eq!(actual_freeze_ratio(250, &p, 0.8), 0.8);
        assert_eq!(actual_freeze_ratio(400, &p, 0.8), 0.8);
        let flat = PhasePlan::new(100, 200, 200, 300).unwrap();
        assert_eq!(actual_freeze_ratio(201, &flat, 0.8), 0.8);
        assert_eq!(scheduled_freeze_ratio(170, &p, 0.8).unwrap(), 0.0);
        assert_eq!(scheduled_freeze_ratio(190, &p, 0.8).unwrap(), 1.0);
        assert_eq!(scheduled_freeze_ratio(200, &p, 0.8).unwrap(), 1.0);
    }

    #[test]
    fn mask_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mask(10, 0.0, &mut rng).popcount(), 0);
        assert_eq!(sample_mask(10, 1.0, &mut rng).popcount(), 10);
        assert_eq!(sample_mask(10, 0.5, &mut rng).popcount(), 5);
        assert_eq!(sample_mask(100, 0.29, &mut rng).popcount(), 29);
        assert_eq!(sample_mask(7, 0.5, &mut rng).popcount(), 3);
    }

    #[test]
    fn reconcile_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = FreezeMask::from_indices(10, [0, 3, 4, 7, 9]).unwrap();
        assert_eq!(reconcile_mask(&base, 5, &mut rng).unwrap(), base);
        let small = FreezeMask::from_indices(10, [1, 2, 3]).unwrap();
        let grown = reconcile_mask(&small, 5, &mut rng).unwrap();
        assert_eq!(grown.popcount(), 5);
        assert!(small.is_subset_of(&grown));
        let big = FreezeMask::from_indices(10, [0, 1, 2, 3, 4, 5, 6]).unwrap();
        let shrunk = reconcile_mask(&big, 5, &mut rng).unwrap();
        assert_eq!(shrunk.popcount(), 5);
        assert!(shrunk.is_subset_of(&big));
        assert!(reconcile_mask(&big, 11, &mut rng).is_err());
    }

    #[test]
    fn autofreeze_examples() {
        assert_eq!(autofreeze_score(2.0, 1.0).unwrap(), 0.5);
        assert_eq!(autofreeze_score(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(autofreeze_score(1.0, 3.0).unwrap(), 2.0);
        assert!(autofreeze_score(0.0, 1.0).is_err());

        let scores = [0.1, 0.2, 0.9, 0.3];
        assert_eq!(autofreeze_select(&scores, 0, 80.0), 2);
        assert_eq!(autofreeze_select(&scores, 0, 1e-9), 0);
        assert_eq!(autofreeze_select(&scores, 1, 1e-9), 1);
        assert_eq!(autofreeze_select(&scores, 4, 80.0), 4);
        assert_eq!(autofreeze_select(&scores, 3, 80.0), 4);
    }

    #[test]
    fn apf_examples() {
        let s = ApfState::new(1, DEFAULT_APF_ALPHA).unwrap();
        let (scores, s) = apf_update(&s, &[1.0]).unwrap();
        assert!((s.e[0] - 0.1).abs() < 1e-15 && (s.e_abs[0] - 0.1).abs() < 1e-15);
        assert_eq!(scores, vec![1.0]);
        let (scores, s) = apf_update(&s, &[-1.0]).unwrap();
        assert!((s.e[0] + 0.01).abs() < 1e-15);
        assert!((s.e_abs[0] - 0.19).abs() < 1e-15);
        assert!((scores[0] - 0.0526).abs() < 1e-4);
        assert_eq!(apf_eligible(&scores, 0.1), vec![0]);

        let mut s = ApfState::new(2, 0.5).unwrap();
        for _ in 0..10 {
            assert_eq!(s.update(&[0.3, -2.0]).unwrap(), vec![1.0, 1.0]);
        }
        assert_eq!(ApfState::new(3, 0.5).unwrap().scores(), vec![1.0; 3]);
        assert!(ApfState::new(1, 1.0).is_err());
        assert!(s.update(&[1.0]).is_err());
    }

    #[test]
    fn history_export() {
        let mut h = MaskHistory::new();
        let a = ActionId::backward(1, 1);
        h.record(1, &FreezeMask::from_indices(4, [0, 1]).unwrap().with_owner(a, 7));
        h.record(1, &FreezeMask::from_indices(4, [1]).unwrap().with_owner(a, 8));
        assert_eq!(h.rows()[0].popcount, 2);
        assert_eq!(h.rows()[0].action, "b(1,1)");
        assert_eq!(h.frequencies(1).unwrap(), vec![0.5, 1.0, 0.0, 0.0]);
        assert!(h.frequency_csv().starts_with("stage,index,frequency\n1,0,0.5\n"));
        let json = h.to_json();
        assert_eq!(json[1]["step"], 8);
    }
}
