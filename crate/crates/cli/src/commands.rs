use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pipefreeze_core::freezectl::{phase_of, scheduled_freeze_ratio, MaskHistory, Phase, StageController};
use pipefreeze_core::lp::{build_lp, extract_freeze_plan, solve_lp, DEFAULT_TOL};
use pipefreeze_core::sandbox::{
    scaling_experiment, tta_experiment, MaskPolicy, ScalingReport, SgdHyper, SyntheticObjective, TtaReport,
    TtaSetup,
};
use pipefreeze_core::timing::{aggregate_monitoring, simulate_monitoring, NoiseSpec};
use pipefreeze_core::{
    build_dag, build_report, build_schedule, ActionId, Durations, FreezePlan, PipelineDag, ThroughputReport,
    TimingProfile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::error::CliError;
use crate::gantt::GanttTimeline;

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(path)
}

pub fn read_plan(path: &Path) -> Result<FreezePlan, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read plan {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config(format!("plan {} at `{}`: {}", path.display(), e.path(), e.inner())))
}

pub fn pipeline_dag(loaded: &LoadedConfig) -> Result<PipelineDag, CliError> {
    let c = &loaded.config.pipeline;
    let timeline = build_schedule(c).map_err(CliError::runtime)?;
    build_dag(&timeline, c).map_err(CliError::runtime)
}

/// Bounds the LP sees: the configured profile, or one re-measured through
/// simulated noisy monitoring when `noise_sigma > 0`.
pub fn monitored_profile(loaded: &LoadedConfig, seed: u64) -> Result<TimingProfile, CliError> {
    let c = &loaded.config;
    if c.noise_sigma == 0.0 {
        return Ok(loaded.profile.clone());
    }
    let mid = c.phases.midpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = simulate_monitoring(
        &loaded.profile,
        c.phases.t_w + 1..=mid,
        mid + 1..=c.phases.t_m,
        NoiseSpec { sigma: c.noise_sigma },
        &mut rng,
    )
    .map_err(CliError::runtime)?;
    aggregate_monitoring(&log).map_err(CliError::runtime)
}

pub struct OptimizeOutput {
    pub plan: FreezePlan,
    pub report: ThroughputReport,
    pub dag: serde_json::Value,
    pub profile: TimingProfile,
    pub lp_dump: String,
}

pub fn optimize(loaded: &LoadedConfig, seed: u64) -> Result<OptimizeOutput, CliError> {
    let c = &loaded.config;
    let dag = pipeline_dag(loaded)?;
    let profile = monitored_profile(loaded, seed)?;
    let problem = build_lp(&dag, &profile, c.r_max, c.budget_scope).map_err(CliError::lp)?;
    let solution = solve_lp(&problem, c.lambda_mode, DEFAULT_TOL).map_err(CliError::lp)?;
    let plan = extract_freeze_plan(&problem, &solution, DEFAULT_TOL).map_err(CliError::lp)?;
    info!(
        "solved {} variables in {} iterations: {:.4} -> {:.4} ms",
        problem.num_variables(),
        solution.iterations,
        plan.makespan_base,
        plan.makespan_opt
    );
    let report = build_report(&plan, None, None).map_err(CliError::lp)?;
    Ok(OptimizeOutput {
        report,
        dag: dag.to_json(),
        lp_dump: problem.dump(),
        profile,
        plan,
    })
}

pub fn write_optimize(out: &Path, o: &OptimizeOutput) -> Result<(), CliError> {
    write(out, "plan.json", &to_json(&o.plan))?;
    write(out, "report.json", &to_json(&o.report))?;
    write(out, "dag.json", &to_json(&o.dag))?;
    write(out, "timing.json", &to_json(&o.profile.to_spec()))?;
    write(out, "lp.txt", &o.lp_dump)?;
    Ok(())
}

pub fn check_plan_matches(loaded: &LoadedConfig, plan: &FreezePlan) -> Result<(), CliError> {
    let c = &loaded.config.pipeline;
    if plan.num_stages != c.num_stages() || plan.num_microbatches != c.num_microbatches {
        return Err(CliError::Config(format!(
            "plan is for {} stages x {} microbatches, config has {} x {}",
            plan.num_stages,
            plan.num_microbatches,
            c.num_stages(),
            c.num_microbatches
        )));
    }
    if let Some(r) = plan
        .ratios
        .iter()
        .find(|r| r.s == 0 || r.s > plan.num_stages || r.m == 0 || r.m > plan.num_microbatches || !(0.0..=1.0).contains(&r.r))
    {
        return Err(CliError::Config(format!("plan entry m={} s={} r={} is out of range", r.m, r.s, r.r)));
    }
    Ok(())
}

/// Durations at step `t` under `plan`, with execution noise when configured.
pub fn durations_at_step(
    loaded: &LoadedConfig,
    plan: &FreezePlan,
    t: u64,
    seed: u64,
) -> Result<Durations, CliError> {
    let c = &loaded.config;
    let noise = NoiseSpec { sigma: c.noise_sigma };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loaded
        .profile
        .iter()
        .map(|(a, b)| {
            let r = if a.is_backward() {
                scheduled_freeze_ratio(t, &c.phases, plan.ratio(a)).map_err(CliError::runtime)?
            } else {
                0.0
            };
            Ok((*a, b.at_ratio(r) * noise.factor(&mut rng)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub step: u64,
    pub phase: Phase,
    pub baseline_ms: f64,
    pub optimized_ms: f64,
    pub reduction_pct: f64,
}

pub struct SimulateOutput {
    pub summary: SimulateSummary,
    pub baseline: GanttTimeline,
    pub optimized: GanttTimeline,
    pub masks: MaskHistory,
}

pub fn simulate(loaded: &LoadedConfig, plan: &FreezePlan, step: Option<u64>, seed: u64) -> Result<SimulateOutput, CliError> {
    check_plan_matches(loaded, plan)?;
    let c = &loaded.config;
    let t = step.unwrap_or(c.phases.t_total);
    let phase = phase_of(t, &c.phases).map_err(CliError::runtime)?;
    let dag = pipeline_dag(loaded)?;
    let baseline = GanttTimeline::build("baseline", &dag, &loaded.profile.max_durations()).map_err(CliError::runtime)?;
    let durations = durations_at_step(loaded, plan, t, seed)?;
    let optimized =
        GanttTimeline::build(&format!("step {t} ({phase})"), &dag, &durations).map_err(CliError::runtime)?;

    let mut masks = MaskHistory::new();
    for stage in 1..=plan.num_stages {
        let actions: Vec<ActionId> = (1..=plan.num_microbatches).map(|m| ActionId::backward(m, stage)).collect();
        let mut ctl = StageController::new(stage, c.params_per_stage, seed);
        for mask in ctl.step(t, &c.phases, plan, &actions).map_err(CliError::runtime)? {
            masks.record(stage, &mask);
        }
    }
    let summary = SimulateSummary {
        step: t,
        phase,
        baseline_ms: baseline.makespan_ms,
        optimized_ms: optimized.makespan_ms,
        reduction_pct: 100.0 * (1.0 - optimized.makespan_ms / baseline.makespan_ms),
    };
    Ok(SimulateOutput {
        summary,
        baseline,
        optimized,
        masks,
    })
}

pub fn write_simulate(out: &Path, o: &SimulateOutput, svg: bool) -> Result<(), CliError> {
    write(out, "baseline.json", &to_json(&o.baseline))?;
    write(out, "optimized.json", &to_json(&o.optimized))?;
    write(out, "masks.json", &to_json(&o.masks.to_json()))?;
    write(out, "mask_frequency.csv", &o.masks.frequency_csv())?;
    write(out, "simulate.json", &to_json(&o.summary))?;
    if svg {
        write(out, "baseline.svg", &o.baseline.to_svg())?;
        write(out, "optimized.svg", &o.optimized.to_svg())?;
    }
    Ok(())
}

pub fn gantt(loaded: &LoadedConfig, plan: Option<&FreezePlan>, step: Option<u64>, seed: u64) -> Result<GanttTimeline, CliError> {
    match plan {
        Some(plan) => Ok(simulate(loaded, plan, step, seed)?.optimized),
        None => {
            let dag = pipeline_dag(loaded)?;
            GanttTimeline::build("baseline", &dag, &loaded.profile.max_durations()).map_err(CliError::runtime)
        }
    }
}

pub fn write_gantt(out: &Path, g: &GanttTimeline, svg: bool) -> Result<(), CliError> {
    write(out, "gantt.json", &to_json(g))?;
    if svg {
        write(out, "gantt.svg", &g.to_svg())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum ObjectiveChoice {
    Quadratic,
    Logistic { samples: usize, reg: f64 },
}

#[derive(Debug, Clone)]
pub struct SandboxParams {
    pub objective: ObjectiveChoice,
    pub dim: usize,
    pub sigma: f64,
    pub p_list: Vec<f64>,
    pub eps: f64,
    pub trials: usize,
    pub seed: u64,
    pub eta: Option<f64>,
    pub microbatches: usize,
    pub steps: usize,
}

impl SandboxParams {
    pub fn objective(&self) -> Result<SyntheticObjective, CliError> {
        match self.objective {
            ObjectiveChoice::Quadratic => SyntheticObjective::isotropic(self.dim, self.sigma),
            ObjectiveChoice::Logistic { samples, reg } => {
                SyntheticObjective::logistic_toy(self.dim, samples, reg, self.seed, self.sigma)
            }
        }
        .map_err(CliError::runtime)
    }

    fn hyper(&self, obj: &SyntheticObjective, microbatches: usize, p_min: f64) -> Result<SgdHyper, CliError> {
        let limit = SgdHyper::max_stable_eta(obj, p_min, microbatches);
        let eta = self.eta.unwrap_or_else(|| limit.min(0.1 / obj.smoothness()));
        if eta > limit {
            return Err(CliError::Config(format!("--eta {eta} exceeds the stepsize limit {limit}")));
        }
        let theta0 = vec![1.0 / (self.dim as f64).sqrt(); self.dim];
        Ok(SgdHyper::new(eta, microbatches, self.steps, theta0))
    }
}

pub fn sandbox_scaling(params: &SandboxParams) -> Result<ScalingReport, CliError> {
    if params.p_list.is_empty() || params.p_list.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(CliError::Config(format!("--p values {:?} must lie in (0, 1]", params.p_list)));
    }
    let obj = params.objective()?;
    let p_min = params.p_list.iter().copied().fold(1.0, f64::min);
    let hyper = params.hyper(&obj, params.microbatches, p_min)?;
    scaling_experiment(&obj, &params.p_list, params.eps, params.trials, &hyper, params.seed).map_err(CliError::runtime)
}

pub fn sandbox_tta(params: &SandboxParams, plan: &FreezePlan) -> Result<TtaReport, CliError> {
    if plan.num_stages > params.dim {
        return Err(CliError::Config(format!("--dim {} is smaller than the plan's {} stages", params.dim, plan.num_stages)));
    }
    let obj = params.objective()?;
    let policy = MaskPolicy::PlanDriven {
        plan: plan.clone(),
        phases: None,
    };
    let p_min = policy
        .min_update_probability(params.dim, plan.num_microbatches)
        .map_err(CliError::runtime)?;
    if p_min <= 0.0 {
        return Err(CliError::Config("plan freezes some stage completely; no stepsize is stable".into()));
    }
    let hyper = params.hyper(&obj, plan.num_microbatches, p_min)?;
    let setup = TtaSetup::from_plan(plan.clone(), params.eps, params.trials, params.seed);
    tta_experiment(&obj, &hyper, &setup).map_err(CliError::runtime)
}

pub fn write_scaling(out: &Path, r: &ScalingReport) -> Result<(), CliError> {
    write(out, "sandbox.csv", &r.to_csv())?;
    write(out, "sandbox.json", &to_json(r))?;
    Ok(())
}

pub fn write_tta(out: &Path, r: &TtaReport) -> Result<(), CliError> {
    write(out, "tta.json", &to_json(r))?;
    Ok(())
}

pub fn report(plan: &FreezePlan, tta: Option<&TtaReport>) -> Result<ThroughputReport, CliError> {
    build_report(plan, None, tta).map_err(CliError::runtime)
}

pub fn write_report(out: &Path, r: &ThroughputReport) -> Result<(), CliError> {
    write(out, "report.json", &to_json(r))?;
    write(out, "report.txt", &r.summary())?;
    Ok(())
}

