//! Masked SGD on small synthetic objectives, for checking how freezing
//! changes iteration counts and time-to-accuracy.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{kappa, tta_ratio};
use crate::error::{Error, Result};
use crate::freezectl::{scheduled_freeze_ratio, target_count, PhasePlan};
use crate::lp::FreezePlan;
use crate::schedule::ActionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `F = 0.5 * sum_j a_j theta_j^2`.
    Quadratic { diag: Vec<f64> },
    /// Mean logistic loss over a fixed dataset plus `reg/2 |theta|^2`.
    LogisticToy {
        /// Row-major `n x d`.
        features: Vec<f64>,
        labels: Vec<f64>,
        reg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObjective {
    pub kind: ObjectiveKind,
    /// Per-coordinate standard deviation of microbatch gradient noise.
    pub sigma: f64,
}

impl SyntheticObjective {
    pub fn quadratic(diag: Vec<f64>, sigma: f64) -> Result<Self> {
        if diag.is_empty() || diag.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::domain("quadratic diagonal", format!("{diag:?}"), "nonempty, entries > 0"));
        }
        Self::with_noise(ObjectiveKind::Quadratic { diag }, sigma)
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::quadratic(vec![1.0; dim], sigma)
    }

    /// Gaussian features scaled by `1/sqrt(d)`, labels from a random
    /// planted separator.
    pub fn logistic_toy(dim: usize, samples: usize, reg: f64, seed: u64, sigma: f64) -> Result<Self> {
        if dim == 0 || samples == 0 || !(reg > 0.0) {
            return Err(Error::domain(
                "logistic toy",
                format!("d={dim}, n={samples}, reg={reg}"),
                "d > 0, n > 0, reg > 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let planted: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut features = Vec::with_capacity(samples * dim);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let margin: f64 = x.iter().zip(&planted).map(|(a, b)| a * b).sum();
            labels.push(if margin >= 0.0 { 1.0 } else { -1.0 });
            features.extend(x);
        }
        Self::with_noise(ObjectiveKind::LogisticToy { features, labels, reg }, sigma)
    }

    fn with_noise(kind: ObjectiveKind, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::domain("gradient noise", sigma, ">= 0"));
        }
        Ok(SyntheticObjective { kind, sigma })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Quadratic { diag } => diag.len(),
            ObjectiveKind::LogisticToy { features, labels, .. } => features.len() / labels.len(),
        }
    }

    /// Smoothness constant; for the logistic toy a trace bound.
    pub fn smoothness(&self) -> f64 {
        match &self.kind {
            ObjectiveKind::Quadratic { diag } => diag.iter().copied().fold(0.0, f64::max),
            ObjectiveKind::LogisticToy { features, labels, reg } => {
                let sq: f64 = features.iter().map(|x| x * x).sum();
                0.25 * sq / labels.len() as f64 + reg
            }
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match &self.kind {
            ObjectiveKind::Quadratic { diag } => {
                0.5 * diag.iter().zip(theta).map(|(a, t)| a * t * t).sum::<f64>()
            }
            ObjectiveKind::LogisticToy { features, labels, reg } => {
                let d = theta.len();
                let loss: f64 = features
                    .chunks_exact(d)
                    .zip(labels)
                    .map(|(x, y)| {
                        let z = -y * x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
                        softplus(z)
                    })
                    .sum();
                loss / labels.len() as f64 + 0.5 * reg * theta.iter().map(|t| t * t).sum::<f64>()
            }
        }
    }

    pub fn gradient_into(&self, theta: &[f64], grad: &mut [f64]) {
        match &self.kind {
            ObjectiveKind::Quadratic { diag } => {
                for ((g, a), t) in grad.iter_mut().zip(diag).zip(theta) {
                    *g = a * t;
                }
            }
            ObjectiveKind::LogisticToy { features, labels, reg } => {
                let d = theta.len();
                let n = labels.len() as f64;
                for (g, t) in grad.iter_mut().zip(theta) {
                    *g = reg * t;
                }
                for (x, y) in features.chunks_exact(d).zip(labels) {
                    let z = -y * x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
                    let c = -y * sigmoid(z) / n;
                    for (g, a) in grad.iter_mut().zip(x) {
                        *g += c * a;
                    }
                }
            }
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        self.gradient_into(theta, &mut g);
        g
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    None,
    /// Each coordinate updated independently with probability `p`.
    UniformBernoulli(f64),
    /// Exactly `floor(r d)` coordinates frozen per microbatch.
    UniformExactCount(f64),
    /// Update probability per coordinate.
    PerCoordinateBernoulli(Vec<f64>),
    /// Coordinates split evenly across the plan's stages; microbatch `m`
    /// freezes stage `s` coordinates with the ratio of `b(m, s)`. Without
    /// phases the stable ratios apply from the first step.
    PlanDriven {
        plan: FreezePlan,
        phases: Option<PhasePlan>,
    },
}

impl MaskPolicy {
    fn validate(&self, dim: usize, microbatches: usize) -> Result<()> {
        let unit = |what, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(what, v, "[0, 1]"))
            }
        };
        match self {
            MaskPolicy::None => Ok(()),
            MaskPolicy::UniformBernoulli(p) => unit("update probability", *p),
            MaskPolicy::UniformExactCount(r) => unit("freeze ratio", *r),
            MaskPolicy::PerCoordinateBernoulli(ps) => {
                if ps.len() != dim {
                    return Err(Error::domain("update probabilities", ps.len(), dim));
                }
                ps.iter().try_for_each(|p| unit("update probability", *p))
            }
            MaskPolicy::PlanDriven { plan, .. } => {
                if plan.num_microbatches != microbatches {
                    return Err(Error::Consistency(format!(
                        "plan has {} microbatches, sgd uses {microbatches}",
                        plan.num_microbatches
                    )));
                }
                if plan.num_stages == 0 || plan.num_stages > dim {
                    return Err(Error::Consistency(format!(
                        "cannot split {dim} coordinates over {} stages",
                        plan.num_stages
                    )));
                }
                plan.ratios.iter().try_for_each(|r| unit("freeze ratio", r.r))
            }
        }
    }

    /// Update probability of every coordinate for microbatch `m` (1-based)
    /// at step `t`.
    fn probabilities(&self, t: u64, m: usize, dim: usize, out: &mut [f64]) -> Result<()> {
        match self {
            MaskPolicy::None => out.fill(1.0),
            MaskPolicy::UniformBernoulli(p) => out.fill(*p),
            MaskPolicy::UniformExactCount(r) => {
                out.fill(1.0 - target_count(dim, *r) as f64 / dim as f64)
            }
            MaskPolicy::PerCoordinateBernoulli(ps) => out.copy_from_slice(ps),
            MaskPolicy::PlanDriven { plan, phases } => {
                for (j, p) in out.iter_mut().enumerate() {
                    let stage = stage_of_coordinate(j, dim, plan.num_stages);
                    let r = plan.ratio(&ActionId::backward(m, stage));
                    let r = match phases {
                        Some(ph) if t <= ph.t_total => scheduled_freeze_ratio(t, ph, r)?,
                        _ => r,
                    };
                    *p = 1.0 - r;
                }
            }
        }
        Ok(())
    }

    /// Smallest per-coordinate update probability averaged over
    /// microbatches, in the stable regime.
    pub fn min_update_probability(&self, dim: usize, microbatches: usize) -> Result<f64> {
        let stable = match self {
            MaskPolicy::PlanDriven { plan, .. } => MaskPolicy::PlanDriven {
                plan: plan.clone(),
                phases: None,
            },
            other => other.clone(),
        };
        let mut avg = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for m in 1..=microbatches {
            stable.probabilities(u64::MAX, m, dim, &mut buf)?;
            for (a, p) in avg.iter_mut().zip(&buf) {
                *a += p / microbatches as f64;
            }
        }
        Ok(avg.into_iter().fold(1.0, f64::min))
    }
}

/// 1-based stage owning coordinate `j` when `dim` coordinates are split
/// evenly across `stages`.
pub fn stage_of_coordinate(j: usize, dim: usize, stages: usize) -> usize {
    j * stages / dim + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub eta: f64,
    pub microbatches: usize,
    /// Maximum number of steps.
    pub steps: usize,
    pub theta0: Vec<f64>,
    /// Reject stepsizes above `p_min / (L (1 + 1/M))`.
    pub check_stepsize: bool,
    /// Stop once the running average of squared gradient norms reaches this.
    pub stop_below: Option<f64>,
    pub record_trajectory: bool,
    pub divergence_guard: f64,
}

impl SgdHyper {
    pub fn new(eta: f64, microbatches: usize, steps: usize, theta0: Vec<f64>) -> Self {
        SgdHyper {
            eta,
            microbatches,
            steps,
            theta0,
            check_stepsize: true,
            stop_below: None,
            record_trajectory: false,
            divergence_guard: 1e12,
        }
    }

    pub fn max_stable_eta(obj: &SyntheticObjective, p_min: f64, microbatches: usize) -> f64 {
        p_min / (obj.smoothness() * (1.0 + 1.0 / microbatches as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdRun {
    /// `|grad F(theta_t)|^2` before each update.
    pub grad_norms_sq: Vec<f64>,
    /// `sum_j pbar_t^(j) (d_j F)^2` per step.
    pub weighted_energy: Vec<f64>,
    pub objective: Vec<f64>,
    pub theta_final: Vec<f64>,
    /// Iterates `theta_1 .. theta_{T+1}` when recorded.
    pub trajectory: Option<Vec<Vec<f64>>>,
    pub hyper: SgdHyper,
    pub policy: MaskPolicy,
}

impl SgdRun {
    pub fn steps(&self) -> usize {
        self.grad_norms_sq.len()
    }
}

pub fn run_masked_sgd<R: Rng + ?Sized>(
    obj: &SyntheticObjective,
    policy: &MaskPolicy,
    hyper: &SgdHyper,
    rng: &mut R,
) -> Result<SgdRun> {
    let d = obj.dim();
    let mb = hyper.microbatches;
    if hyper.theta0.len() != d {
        return Err(Error::domain("theta0 length", hyper.theta0.len(), d));
    }
    if mb == 0 {
        return Err(Error::domain("microbatches", 0, ">= 1"));
    }
    if !(hyper.eta > 0.0 && hyper.eta.is_finite()) {
        return Err(Error::domain("stepsize", hyper.eta, "> 0"));
    }
    policy.validate(d, mb)?;
    if hyper.check_stepsize {
        let p_min = policy.min_update_probability(d, mb)?;
        let limit = SgdHyper::max_stable_eta(obj, p_min, mb);
        if hyper.eta > limit {
            return Err(Error::domain("stepsize", hyper.eta, format!("<= {limit}")));
        }
    }
    let noise = (obj.sigma > 0.0).then(|| Normal::new(0.0, obj.sigma).expect("finite sigma"));

    let mut theta = hyper.theta0.clone();
    let mut grad = vec![0.0; d];
    let mut g_mb = vec![0.0; d];
    let mut update = vec![0.0; d];
    let mut probs = vec![0.0; d];
    let mut p_bar = vec![0.0; d];
    let mut keep = vec![true; d];
    let mut run = SgdRun {
        grad_norms_sq: Vec::with_capacity(hyper.steps),
        weighted_energy: Vec::with_capacity(hyper.steps),
        objective: Vec::with_capacity(hyper.steps),
        theta_final: Vec::new(),
        trajectory: hyper.record_trajectory.then(|| vec![theta.clone()]),
        hyper: hyper.clone(),
        policy: policy.clone(),
    };
    let mut running = 0.0;

    for step in 1..=hyper.steps {
        obj.gradient_into(&theta, &mut grad);
        update.fill(0.0);
        p_bar.fill(0.0);
        for m in 1..=mb {
            g_mb.copy_from_slice(&grad);
            if let Some(n) = &noise {
                for g in g_mb.iter_mut() {
                    *g += n.sample(rng);
                }
            }
            policy.probabilities(step as u64, m, d, &mut probs)?;
            match policy {
                MaskPolicy::UniformExactCount(r) => {
                    keep.fill(true);
                    for j in index::sample(rng, d, target_count(d, *r)) {
                        keep[j] = false;
                    }
                }
                _ => {
                    for (k, p) in keep.iter_mut().zip(&probs) {
                        *k = rng.random_bool(*p);
                    }
                }
            }
            for j in 0..d {
                if keep[j] {
                    update[j] += g_mb[j];
                }
                p_bar[j] += probs[j];
            }
        }
        let norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        let weighted: f64 = grad.iter().zip(&p_bar).map(|(g, p)| p / mb as f64 * g * g).sum();
        run.grad_norms_sq.push(norm_sq);
        run.weighted_energy.push(weighted);
        run.objective.push(obj.value(&theta));

        let scale = hyper.eta / mb as f64;
        for (t, u) in theta.iter_mut().zip(&update) {
            *t -= scale * u;
        }
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > hyper.divergence_guard {
            return Err(Error::Divergence { step, norm });
        }
        if let Some(tr) = &mut run.trajectory {
            tr.push(theta.clone());
        }
        running += norm_sq;
        if hyper.stop_below.is_some_and(|eps| running / step as f64 <= eps) {
            break;
        }
    }
    run.theta_final = theta;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stationarity {
    /// `(1/T) sum_{t<=T} |grad F(theta_t)|^2 <= eps`.
    #[default]
    RunningAverage,
    LastIterate,
}

/// First step meeting `eps`, or `None` if the run never does.
pub fn steps_to_epsilon(run: &SgdRun, eps: f64) -> Option<usize> {
    steps_to_epsilon_with(run, eps, Stationarity::RunningAverage)
}

pub fn steps_to_epsilon_with(run: &SgdRun, eps: f64, criterion: Stationarity) -> Option<usize> {
    match criterion {
        Stationarity::RunningAverage => {
            let mut sum = 0.0;
            run.grad_norms_sq.iter().enumerate().find_map(|(i, n)| {
                sum += n;
                (sum / (i + 1) as f64 <= eps).then_some(i + 1)
            })
        }
        Stationarity::LastIterate => run.grad_norms_sq.iter().position(|n| *n <= eps).map(|i| i + 1),
    }
}

/// Effective update probability per step; 1 where the gradient vanishes.
pub fn p_eff_per_step(run: &SgdRun) -> Vec<f64> {
    run.grad_norms_sq
        .iter()
        .zip(&run.weighted_energy)
        .map(|(n, w)| if *n > 0.0 { w / n } else { 1.0 })
        .collect()
}

/// Gradient-energy-weighted average of the per-step effective update
/// probability over the whole run.
pub fn estimate_p_eff(run: &SgdRun) -> f64 {
    estimate_p_eff_horizon(run, run.steps())
}

pub fn estimate_p_eff_horizon(run: &SgdRun, horizon: usize) -> f64 {
    pooled_p_eff(std::iter::once(run), horizon)
}

fn pooled_p_eff<'a>(runs: impl IntoIterator<Item = &'a SgdRun>, horizon: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for run in runs {
        let h = horizon.min(run.steps());
        num += run.weighted_energy[..h].iter().sum::<f64>();
        den += run.grad_norms_sq[..h].iter().sum::<f64>();
    }
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub p: f64,
    pub trials: usize,
    pub reached: usize,
    pub mean_t_eps: Option<f64>,
    pub std_t_eps: Option<f64>,
    pub ratio: Option<f64>,
    /// Standard error of `ratio` across trials.
    pub ratio_stderr: Option<f64>,
    pub p_eff_hat: f64,
}

impl ScalingRow {
    /// `[lo, hi]` widened so that it is at least two standard errors wide
    /// on each side of its centre, and whether that happened.
    pub fn widen_band(&self, lo: f64, hi: f64) -> ((f64, f64), bool) {
        let half = (hi - lo) / 2.0;
        let need = 2.0 * self.ratio_stderr.unwrap_or(0.0);
        if need > half {
            ((lo - (need - half), hi + (need - half)), true)
        } else {
            ((lo, hi), false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub eps: f64,
    pub base_seed: u64,
    pub baseline_t_eps: Option<f64>,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        let mut out = String::from("p,trials,mean_T_eps,ratio,p_eff_hat\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.p,
                r.trials,
                opt(r.mean_t_eps),
                opt(r.ratio),
                r.p_eff_hat
            ));
        }
        out
    }
}

struct TrialStats {
    reached: usize,
    mean: Option<f64>,
    std: Option<f64>,
    p_eff: f64,
}

fn run_trials(
    obj: &SyntheticObjective,
    policy: &MaskPolicy,
    hyper: &SgdHyper,
    eps: f64,
    trials: usize,
    base_seed: u64,
) -> Result<TrialStats> {
    let hyper = SgdHyper {
        stop_below: Some(eps),
        record_trajectory: false,
        ..hyper.clone()
    };
    let runs: Vec<SgdRun> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(trial as u64));
            run_masked_sgd(obj, policy, &hyper, &mut rng)
        })
        .collect::<Result<_>>()?;
    let hits: Vec<f64> = runs
        .iter()
        .filter_map(|r| steps_to_epsilon(r, eps))
        .map(|t| t as f64)
        .collect();
    let n = hits.len() as f64;
    let mean = (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / n);
    let std = mean.map(|m| (hits.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n).sqrt());
    if hits.len() < trials {
        log::warn!("{} of {trials} trials did not reach eps = {eps}", trials - hits.len());
    }
    Ok(TrialStats {
        reached: hits.len(),
        mean,
        std,
        p_eff: pooled_p_eff(&runs, usize::MAX),
    })
}

/// Mean steps-to-epsilon for each uniform update probability, relative to
/// full updates. Trial `k` uses seed `base_seed + k`.
pub fn scaling_experiment(
    obj: &SyntheticObjective,
    p_list: &[f64],
    eps: f64,
    trials: usize,
    hyper: &SgdHyper,
    base_seed: u64,
) -> Result<ScalingReport> {
    if !(eps > 0.0) {
        return Err(Error::domain("eps", eps, "> 0"));
    }
    if trials == 0 {
        return Err(Error::domain("trials", 0, ">= 1"));
    }
    let baseline = run_trials(obj, &MaskPolicy::None, hyper, eps, 1, base_seed)?.mean;
    let rows = p_list
        .iter()
        .map(|&p| {
            let stats = run_trials(obj, &MaskPolicy::UniformBernoulli(p), hyper, eps, trials, base_seed)?;
            Ok(ScalingRow {
                p,
                trials,
                reached: stats.reached,
                mean_t_eps: stats.mean,
                std_t_eps: stats.std,
                ratio: stats.mean.zip(baseline).map(|(m, b)| m / b),
                ratio_stderr: stats
                    .std
                    .zip(baseline)
                    .map(|(sd, b)| sd / (stats.reached as f64).sqrt() / b),
                p_eff_hat: stats.p_eff,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScalingReport {
        eps,
        base_seed,
        baseline_t_eps: baseline,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaReport {
    pub eps: f64,
    pub trials: usize,
    pub t_eps_base: f64,
    pub t_eps_ours: f64,
    pub step_ms_base: f64,
    pub step_ms_ours: f64,
    pub measured_ratio: f64,
    pub p_eff_hat: f64,
    pub kappa: f64,
    pub predicted_ratio: f64,
    pub relative_error: f64,
    pub improves: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaSetup {
    pub plan: FreezePlan,
    pub phases: Option<PhasePlan>,
    pub step_ms_base: f64,
    pub step_ms_ours: f64,
    pub eps: f64,
    pub trials: usize,
    pub base_seed: u64,
}

impl TtaSetup {
    /// Step times from the plan's makespans.
    pub fn from_plan(plan: FreezePlan, eps: f64, trials: usize, base_seed: u64) -> Self {
        TtaSetup {
            step_ms_base: plan.makespan_base,
            step_ms_ours: plan.makespan_opt,
            plan,
            phases: None,
            eps,
            trials,
            base_seed,
        }
    }
}

/// Time-to-accuracy with and without the plan's freezing, measured as
/// steps-to-epsilon times step time, next to the `kappa / p_eff` estimate.
pub fn tta_experiment(obj: &SyntheticObjective, hyper: &SgdHyper, setup: &TtaSetup) -> Result<TtaReport> {
    if !(setup.step_ms_base > 0.0 && setup.step_ms_ours > 0.0) {
        return Err(Error::domain(
            "step time",
            format!("{} / {}", setup.step_ms_base, setup.step_ms_ours),
            "> 0",
        ));
    }
    let policy = MaskPolicy::PlanDriven {
        plan: setup.plan.clone(),
        phases: setup.phases,
    };
    let base = run_trials(obj, &MaskPolicy::None, hyper, setup.eps, 1, setup.base_seed)?;
    let ours = run_trials(obj, &policy, hyper, setup.eps, setup.trials, setup.base_seed)?;
    let (Some(t_base), Some(t_ours)) = (base.mean, ours.mean) else {
        return Err(Error::Numerical(format!(
            "eps = {} not reached within {} steps",
            setup.eps, hyper.steps
        )));
    };
    let k = kappa(setup.plan.r_max, setup.plan.makespan_floor, setup.plan.makespan_base)?;
    let predicted = tta_ratio(k, ours.p_eff)?;
    let measured = (t_ours * setup.step_ms_ours) / (t_base * setup.step_ms_base);
    Ok(TtaReport {
        eps: setup.eps,
        trials: setup.trials,
        t_eps_base: t_base,
        t_eps_ours: t_ours,
        step_ms_base: setup.step_ms_base,
        step_ms_ours: setup.step_ms_ours,
        measured_ratio: measured,
        p_eff_hat: ours.p_eff,
        kappa: k,
        predicted_ratio: predicted.ratio,
        relative_error: (measured - predicted.ratio).abs() / predicted.ratio,
        improves: predicted.improves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d() -> (SyntheticObjective, SgdHyper) {
        let obj = SyntheticObjective::quadratic(vec![1.0], 0.0).unwrap();
        let mut h = SgdHyper::new(0.5, 1, 3, vec![1.0]);
        h.check_stepsize = false;
        (obj, h)
    }

    #[test]
    fn contraction_example() {
        let (obj, h) = one_d();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let run = run_masked_sgd(&obj, &MaskPolicy::None, &h, &mut rng).unwrap();
        assert_eq!(run.theta_final, vec![0.125]);
        assert_eq!(run.grad_norms_sq, vec![1.0, 0.25, 0.0625]);
        assert_eq!(steps_to_epsilon(&run, 0.7), Some(2));
        assert_eq!(steps_to_epsilon(&run, 1.0), Some(1));
        assert_eq!(steps_to_epsilon(&run, 1e-9), None);
        assert_eq!(steps_to_epsilon_with(&run, 0.1, Stationarity::LastIterate), Some(3));
        assert_eq!(estimate_p_eff(&run), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = run_masked_sgd(&obj, &MaskPolicy::UniformBernoulli(1.0), &h, &mut rng).unwrap();
        assert_eq!(full.theta_final, run.theta_final);
    }

    #[test]
    fn stepsize_condition() {
        let obj = SyntheticObjective::isotropic(4, 0.0).unwrap();
        let h = SgdHyper::new(0.5, 4, 10, vec![1.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Limit is 0.5 / 1.25 = 0.4.
        assert!(run_masked_sgd(&obj, &MaskPolicy::UniformBernoulli(0.5), &h, &mut rng).is_err());
        let h = SgdHyper::new(0.4, 4, 10, vec![1.0; 4]);
        assert!(run_masked_sgd(&obj, &MaskPolicy::UniformBernoulli(0.5), &h, &mut rng).is_ok());
    }

    #[test]
    fn divergence_is_reported() {
        let obj = SyntheticObjective::quadratic(vec![1.0], 0.0).unwrap();
        let mut h = SgdHyper::new(3.0, 1, 100, vec![1.0]);
        h.check_stepsize = false;
        let err = run_masked_sgd(&obj, &MaskPolicy::None, &h, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step > 1));
    }

    #[test]
    fn p_eff_on_skewed_policy() {
        // d=2, A = diag(4, 1), theta = (1, 1): gradient (4, 1), energy 17.
        // p = (1, 0) gives p_eff = 16/17.
        let obj = SyntheticObjective::quadratic(vec![4.0, 1.0], 0.0).unwrap();
        let mut h = SgdHyper::new(0.1, 2, 1, vec![1.0, 1.0]);
        h.check_stepsize = false;
        let policy = MaskPolicy::PerCoordinateBernoulli(vec![1.0, 0.0]);
        let run = run_masked_sgd(&obj, &policy, &h, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((p_eff_per_step(&run)[0] - 16.0 / 17.0).abs() < 1e-15);
        assert!(estimate_p_eff(&run) > 0.5);
    }

    #[test]
    fn exact_count_probability() {
        let obj = SyntheticObjective::isotropic(10, 0.0).unwrap();
        let mut h = SgdHyper::new(0.1, 2, 5, vec![1.0; 10]);
        h.check_stepsize = false;
        let run = run_masked_sgd(&obj, &MaskPolicy::UniformExactCount(0.3), &h, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!((estimate_p_eff(&run) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn coordinate_split() {
        let stages: Vec<usize> = (0..10).map(|j| stage_of_coordinate(j, 10, 4)).collect();
        assert_eq!(stages, vec![1, 1, 1, 2, 2, 3, 3, 3, 4, 4]);
    }

    #[test]
    fn logistic_is_smooth_and_deterministic() {
        let a = SyntheticObjective::logistic_toy(5, 20, 0.1, 9, 0.0).unwrap();
        let b = SyntheticObjective::logistic_toy(5, 20, 0.1, 9, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 5);
        assert!(a.smoothness() > 0.1);
        assert!((a.value(&[0.0; 5]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn band_widening() {
        let mut row = ScalingRow {
            p: 0.5,
            trials: 20,
            reached: 20,
            mean_t_eps: Some(200.0),
            std_t_eps: Some(10.0),
            ratio: Some(2.0),
            ratio_stderr: Some(0.1),
            p_eff_hat: 0.5,
        };
        assert_eq!(row.widen_band(1.7, 2.3), ((1.7, 2.3), false));
        row.ratio_stderr = Some(0.2);
        let ((lo, hi), widened) = row.widen_band(1.7, 2.3);
        assert!(widened && (lo - 1.6).abs() < 1e-12 && (hi - 2.4).abs() < 1e-12);
    }
}
