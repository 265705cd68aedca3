//! Execution-time bounds per action and the monitoring that produces them.
//!
//! A backward action runs in `w_max` with nothing frozen and `w_min` with
//! every parameter frozen; only the parameter-gradient part shrinks. Forward
//! actions are unaffected by freezing, so their bounds coincide.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dag::Durations;
use crate::error::{Error, Result};
use crate::schedule::{ActionId, ActionKind, PipelineConfig};

const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub w_min: f64,
    pub w_max: f64,
}

impl Bounds {
    pub fn fixed(w: f64) -> Self {
        Bounds { w_min: w, w_max: w }
    }

    pub fn range(&self) -> f64 {
        self.w_max - self.w_min
    }

    pub fn is_freezable(&self) -> bool {
        self.w_max > self.w_min
    }

    /// Duration when a fraction `ratio` of the parameters is frozen.
    pub fn at_ratio(&self, ratio: f64) -> f64 {
        self.w_max - ratio * self.range()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTiming {
    pub forward_ms: f64,
    pub backward_act_ms: f64,
    pub backward_param_ms: f64,
}

/// Timing as written in config files: either per-stage defaults (one object
/// for all stages, or a list with one entry per stage) or explicit per-node
/// bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TimingSpec {
    PerStage(StageDefaults),
    PerNode(Vec<NodeBounds>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageDefaults {
    Uniform(StageTiming),
    PerStage(Vec<StageTiming>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeBounds {
    pub kind: ActionKind,
    pub m: usize,
    pub s: usize,
    pub w_min: f64,
    pub w_max: f64,
}

impl TimingSpec {
    pub fn resolve(&self, config: &PipelineConfig) -> Result<TimingProfile> {
        match self {
            TimingSpec::PerStage(StageDefaults::Uniform(t)) => {
                TimingProfile::from_stage_defaults(config, std::slice::from_ref(t))
            }
            TimingSpec::PerStage(StageDefaults::PerStage(ts)) => {
                TimingProfile::from_stage_defaults(config, ts)
            }
            TimingSpec::PerNode(nodes) => {
                let profile = TimingProfile::from_bounds(nodes.iter().map(|n| {
                    (
                        ActionId::new(n.kind, n.m, n.s),
                        Bounds {
                            w_min: n.w_min,
                            w_max: n.w_max,
                        },
                    )
                }))?;
                profile.check_covers(config)?;
                Ok(profile)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingProfile {
    bounds: BTreeMap<ActionId, Bounds>,
}

impl TimingProfile {
    pub fn from_bounds(bounds: impl IntoIterator<Item = (ActionId, Bounds)>) -> Result<Self> {
        let bounds: BTreeMap<ActionId, Bounds> = bounds.into_iter().collect();
        for (a, b) in &bounds {
            if !(b.w_min.is_finite() && b.w_max.is_finite() && 0.0 <= b.w_min && b.w_min <= b.w_max) {
                return Err(Error::domain(
                    "timing bounds",
                    format!("{a}: [{}, {}]", b.w_min, b.w_max),
                    "0 <= w_min <= w_max",
                ));
            }
            if a.kind == ActionKind::Forward && b.w_min != b.w_max {
                return Err(Error::domain(
                    "forward timing bounds",
                    format!("{a}: [{}, {}]", b.w_min, b.w_max),
                    "w_min == w_max",
                ));
            }
        }
        Ok(TimingProfile { bounds })
    }

    /// Bounds for every action from per-stage defaults. A single entry is
    /// broadcast to all stages.
    pub fn from_stage_defaults(config: &PipelineConfig, stages: &[StageTiming]) -> Result<Self> {
        let s = config.num_stages();
        if stages.len() != 1 && stages.len() != s {
            return Err(Error::Consistency(format!(
                "{} per-stage timings for {s} stages",
                stages.len()
            )));
        }
        let mut bounds = BTreeMap::new();
        for stage in 1..=s {
            let t = stages[if stages.len() == 1 { 0 } else { stage - 1 }];
            for m in 1..=config.num_microbatches {
                bounds.insert(ActionId::forward(m, stage), Bounds::fixed(t.forward_ms));
                bounds.insert(
                    ActionId::backward(m, stage),
                    Bounds {
                        w_min: t.backward_act_ms,
                        w_max: t.backward_act_ms + t.backward_param_ms,
                    },
                );
            }
        }
        Self::from_bounds(bounds)
    }

    pub fn check_covers(&self, config: &PipelineConfig) -> Result<()> {
        for stage in 1..=config.num_stages() {
            for m in 1..=config.num_microbatches {
                for a in [ActionId::forward(m, stage), ActionId::backward(m, stage)] {
                    if !self.bounds.contains_key(&a) {
                        return Err(Error::MissingWeight(a));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, node: &ActionId) -> Option<Bounds> {
        self.bounds.get(node).copied()
    }

    pub fn bounds(&self, node: &ActionId) -> Result<Bounds> {
        self.get(node).ok_or(Error::MissingWeight(*node))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ActionId, &Bounds)> {
        self.bounds.iter()
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn max_durations(&self) -> Durations {
        self.bounds.iter().map(|(a, b)| (*a, b.w_max)).collect()
    }

    pub fn min_durations(&self) -> Durations {
        self.bounds.iter().map(|(a, b)| (*a, b.w_min)).collect()
    }

    /// Durations with the given per-action freeze ratios; absent actions run
    /// unfrozen.
    pub fn durations_at(&self, ratios: &BTreeMap<ActionId, f64>) -> Durations {
        self.bounds
            .iter()
            .map(|(a, b)| (*a, b.at_ratio(ratios.get(a).copied().unwrap_or(0.0))))
            .collect()
    }

    pub fn to_spec(&self) -> TimingSpec {
        TimingSpec::PerNode(
            self.bounds
                .iter()
                .map(|(a, b)| NodeBounds {
                    kind: a.kind,
                    m: a.microbatch,
                    s: a.stage,
                    w_min: b.w_min,
                    w_max: b.w_max,
                })
                .collect(),
        )
    }
}

/// Multiplicative lognormal jitter with unit mean; `sigma == 0` is exact.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub const EXACT: NoiseSpec = NoiseSpec { sigma: 0.0 };

    pub fn factor<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 1.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        (self.sigma * z - 0.5 * self.sigma * self.sigma).exp()
    }
}

/// One simulated execution of `node` with a fraction `ratio` frozen.
pub fn sample_execution<R: Rng + ?Sized>(
    profile: &TimingProfile,
    node: &ActionId,
    ratio: f64,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain("freeze ratio", ratio, "[0, 1]"));
    }
    let b = profile.bounds(node)?;
    Ok(b.at_ratio(ratio) * noise.factor(rng))
}

/// Freeze ratio implied by an observed duration; 0 for unfreezable nodes.
pub fn freeze_ratio_of(profile: &TimingProfile, node: &ActionId, w: f64) -> Result<f64> {
    let b = profile.bounds(node)?;
    let slack = BOUND_TOL * b.w_max.abs().max(1.0);
    if !(w >= b.w_min - slack && w <= b.w_max + slack) {
        return Err(Error::domain(
            "duration",
            w,
            format!("[{}, {}] for {node}", b.w_min, b.w_max),
        ));
    }
    if !b.is_freezable() {
        return Ok(0.0);
    }
    Ok((1.0 - (w - b.w_min) / b.range()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeState {
    None,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub step: u64,
    pub ms: f64,
    pub state: FreezeState,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MonitorLog {
    samples: BTreeMap<ActionId, Vec<MonitorSample>>,
}

impl MonitorLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, node: ActionId, step: u64, ms: f64, state: FreezeState) {
        self.samples
            .entry(node)
            .or_default()
            .push(MonitorSample { step, ms, state });
    }

    pub fn samples(&self, node: &ActionId) -> &[MonitorSample] {
        self.samples.get(node).map_or(&[], Vec::as_slice)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ActionId> {
        self.samples.keys()
    }
}

/// Mean after discarding the first sample, unless it is the only one.
fn settled_mean(xs: &[f64]) -> f64 {
    let used = if xs.len() > 1 { &xs[1..] } else { xs };
    used.iter().sum::<f64>() / used.len() as f64
}

/// Turns monitoring samples into per-node bounds.
pub fn aggregate_monitoring(log: &MonitorLog) -> Result<TimingProfile> {
    let mut bounds = BTreeMap::new();
    for (node, samples) in &log.samples {
        let bucket = |state: FreezeState| -> Vec<f64> {
            samples.iter().filter(|s| s.state == state).map(|s| s.ms).collect()
        };
        let b = match node.kind {
            ActionKind::Forward => {
                let all: Vec<f64> = samples.iter().map(|s| s.ms).collect();
                if all.is_empty() {
                    return Err(Error::InsufficientMonitoring { node: *node, bucket: "any" });
                }
                Bounds::fixed(settled_mean(&all))
            }
            ActionKind::Backward => {
                let upper = bucket(FreezeState::None);
                let lower = bucket(FreezeState::Full);
                if upper.is_empty() {
                    return Err(Error::InsufficientMonitoring { node: *node, bucket: "upper-bound" });
                }
                if lower.is_empty() {
                    return Err(Error::InsufficientMonitoring { node: *node, bucket: "lower-bound" });
                }
                let w_max = settled_mean(&upper);
                let w_min = settled_mean(&lower).min(w_max);
                Bounds { w_min, w_max }
            }
        };
        bounds.insert(*node, b);
    }
    TimingProfile::from_bounds(bounds)
}

/// Simulates the two monitoring halves: every action runs unfrozen during
/// `upper_steps` and fully frozen during `lower_steps`.
pub fn simulate_monitoring<R: Rng + ?Sized>(
    truth: &TimingProfile,
    upper_steps: RangeInclusive<u64>,
    lower_steps: RangeInclusive<u64>,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<MonitorLog> {
    let mut log = MonitorLog::new();
    for (steps, state, ratio) in [
        (upper_steps, FreezeState::None, 0.0),
        (lower_steps, FreezeState::Full, 1.0),
    ] {
        for step in steps {
            for node in truth.bounds.keys() {
                let ms = sample_execution(truth, node, ratio, noise, rng)?;
                log.record(*node, step, ms, state);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_backward(w_min: f64, w_max: f64) -> (TimingProfile, ActionId) {
        let a = ActionId::backward(1, 1);
        (TimingProfile::from_bounds([(a, Bounds { w_min, w_max })]).unwrap(), a)
    }

    #[test]
    fn sample_execution_is_linear_in_ratio() {
        let (p, a) = one_backward(1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, want) in [(0.0, 2.0), (1.0, 1.0), (0.5, 1.5)] {
            assert_eq!(sample_execution(&p, &a, r, NoiseSpec::EXACT, &mut rng).unwrap(), want);
        }
        assert!(sample_execution(&p, &a, 1.5, NoiseSpec::EXACT, &mut rng).is_err());
    }

    #[test]
    fn noisy_samples_are_positive_with_unit_mean() {
        let (p, a) = one_backward(1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = NoiseSpec { sigma: 0.2 };
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_execution(&p, &a, 0.0, noise, &mut rng).unwrap())
            .collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn freeze_ratio_examples() {
        let (p, a) = one_backward(1.0, 2.0);
        assert_eq!(freeze_ratio_of(&p, &a, 2.0).unwrap(), 0.0);
        assert_eq!(freeze_ratio_of(&p, &a, 1.0).unwrap(), 1.0);
        assert_eq!(freeze_ratio_of(&p, &a, 1.25).unwrap(), 0.75);
        assert!(freeze_ratio_of(&p, &a, 2.5).is_err());
        assert!(freeze_ratio_of(&p, &a, 0.5).is_err());

        let f = ActionId::forward(1, 1);
        let p = TimingProfile::from_bounds([(f, Bounds::fixed(3.0))]).unwrap();
        assert_eq!(freeze_ratio_of(&p, &f, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_discards_first_sample() {
        let b = ActionId::backward(1, 1);
        let mut log = MonitorLog::new();
        for (i, x) in [10.0, 8.0, 8.0].into_iter().enumerate() {
            log.record(b, i as u64, x, FreezeState::None);
        }
        for (i, x) in [5.0, 4.0, 4.0].into_iter().enumerate() {
            log.record(b, 10 + i as u64, x, FreezeState::Full);
        }
        let p = aggregate_monitoring(&log).unwrap();
        assert_eq!(p.get(&b), Some(Bounds { w_min: 4.0, w_max: 8.0 }));
    }

    #[test]
    fn aggregation_single_samples_and_forward() {
        let b = ActionId::backward(1, 1);
        let f = ActionId::forward(1, 1);
        let mut log = MonitorLog::new();
        log.record(b, 1, 8.0, FreezeState::None);
        log.record(b, 2, 4.0, FreezeState::Full);
        for step in 1..=3 {
            log.record(f, step, 3.0, FreezeState::None);
        }
        let p = aggregate_monitoring(&log).unwrap();
        assert_eq!(p.get(&b), Some(Bounds { w_min: 4.0, w_max: 8.0 }));
        assert_eq!(p.get(&f), Some(Bounds::fixed(3.0)));
    }

    #[test]
    fn aggregation_clamps_inverted_means() {
        let b = ActionId::backward(1, 1);
        let mut log = MonitorLog::new();
        log.record(b, 1, 3.0, FreezeState::None);
        log.record(b, 2, 3.5, FreezeState::Full);
        let p = aggregate_monitoring(&log).unwrap();
        assert_eq!(p.get(&b), Some(Bounds { w_min: 3.0, w_max: 3.0 }));
    }

    #[test]
    fn aggregation_requires_both_buckets() {
        let b = ActionId::backward(2, 1);
        let mut log = MonitorLog::new();
        log.record(b, 1, 3.0, FreezeState::None);
        assert_eq!(
            aggregate_monitoring(&log),
            Err(Error::InsufficientMonitoring { node: b, bucket: "lower-bound" })
        );
    }

    #[test]
    fn stage_defaults_build_bounds() {
        let c = PipelineConfig::new(crate::ScheduleKind::GPipe, 2, 1, 2).unwrap();
        let t = StageTiming {
            forward_ms: 20.0,
            backward_act_ms: 20.0,
            backward_param_ms: 25.0,
        };
        let p = TimingProfile::from_stage_defaults(&c, &[t]).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(
            p.get(&ActionId::backward(2, 2)),
            Some(Bounds { w_min: 20.0, w_max: 45.0 })
        );
        assert_eq!(p.get(&ActionId::forward(1, 1)), Some(Bounds::fixed(20.0)));
        assert!(TimingProfile::from_stage_defaults(&c, &[t, t, t]).is_err());
    }

    #[test]
    fn timing_spec_json_forms() {
        let c = PipelineConfig::new(crate::ScheduleKind::GPipe, 1, 1, 1).unwrap();
        let uniform: TimingSpec = serde_json::from_str(
            r#"{"per_stage":{"forward_ms":1,"backward_act_ms":1,"backward_param_ms":1}}"#,
        )
        .unwrap();
        assert_eq!(uniform.resolve(&c).unwrap().len(), 2);
        let nodes: TimingSpec = serde_json::from_str(
            r#"{"per_node":[{"kind":"f","m":1,"s":1,"w_min":1,"w_max":1},
                            {"kind":"b","m":1,"s":1,"w_min":1,"w_max":2}]}"#,
        )
        .unwrap();
        let p = nodes.resolve(&c).unwrap();
        assert_eq!(p.get(&ActionId::backward(1, 1)).unwrap().w_max, 2.0);
        assert_eq!(p.to_spec(), nodes);
        let partial: TimingSpec =
            serde_json::from_str(r#"{"per_node":[{"kind":"f","m":1,"s":1,"w_min":1,"w_max":1}]}"#)
                .unwrap();
        assert!(partial.resolve(&c).is_err());
    }
}
