use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::{self, ObjectiveChoice, SandboxParams};
use crate::config::{load_config, LoadedConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pipefreeze", version, about = "Pipeline schedule simulator and freeze-ratio planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the freeze-ratio LP and write plan, report and DAG.
    Optimize(OptimizeArgs),
    /// Simulate one batch at a training step; baseline and planned timelines.
    Simulate(SimulateArgs),
    /// Write a single timeline.
    Gantt(SimulateArgs),
    /// Masked-SGD experiments.
    Sandbox(SandboxArgs),
    /// Summarize a plan.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output.dir`, then `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Plan JSON; solved from the config when omitted.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Training step to simulate; defaults to the last step.
    #[arg(long)]
    pub step: Option<u64>,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Objective {
    Quadratic,
    Logistic,
}

#[derive(Debug, Args)]
pub struct SandboxArgs {
    #[arg(long, value_enum, default_value = "quadratic")]
    pub objective: Objective,
    #[arg(long, default_value_t = 100)]
    pub dim: usize,
    /// Update probabilities for the scaling experiment.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.8,0.5")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub microbatches: usize,
    #[arg(long, default_value_t = 100_000)]
    pub steps: usize,
    /// Per-coordinate gradient noise.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub reg: f64,
    /// Run the time-to-accuracy comparison for this plan instead.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Time-to-accuracy report from `sandbox --plan`.
    #[arg(long)]
    pub tta: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

fn out_dir(common: &Common, loaded: &LoadedConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| {
            loaded
                .config
                .output
                .as_ref()
                .and_then(|o| o.dir.as_ref())
                .map(|d| loaded.base_dir.join(d))
        })
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn plan_or_solve(
    loaded: &LoadedConfig,
    plan: Option<&PathBuf>,
    seed: u64,
) -> Result<pipefreeze_core::FreezePlan, CliError> {
    match plan {
        Some(p) => commands::read_plan(p),
        None => Ok(commands::optimize(loaded, seed)?.plan),
    }
}

/// Runs a command and returns what it prints on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Optimize(args) => {
            let loaded = load_config(&args.common.config)?;
            let seed = args.common.seed.unwrap_or(loaded.config.seed);
            let o = commands::optimize(&loaded, seed)?;
            commands::write_optimize(&out_dir(&args.common, &loaded), &o)?;
            Ok(if args.common.json {
                commands::to_json(&o.plan)
            } else {
                o.report.summary()
            })
        }
        Command::Simulate(args) => {
            let loaded = load_config(&args.common.config)?;
            let seed = args.common.seed.unwrap_or(loaded.config.seed);
            let plan = plan_or_solve(&loaded, args.plan.as_ref(), seed)?;
            let o = commands::simulate(&loaded, &plan, args.step, seed)?;
            commands::write_simulate(&out_dir(&args.common, &loaded), &o, args.svg)?;
            let s = &o.summary;
            Ok(if args.common.json {
                commands::to_json(s)
            } else {
                format!(
                    "step {} ({}): baseline {:.3} ms, planned {:.3} ms, reduction {:.2}%\n",
                    s.step, s.phase, s.baseline_ms, s.optimized_ms, s.reduction_pct
                )
            })
        }
        Command::Gantt(args) => {
            let loaded = load_config(&args.common.config)?;
            let seed = args.common.seed.unwrap_or(loaded.config.seed);
            let plan = args.plan.as_ref().map(|p| commands::read_plan(p)).transpose()?;
            let g = commands::gantt(&loaded, plan.as_ref(), args.step, seed)?;
            commands::write_gantt(&out_dir(&args.common, &loaded), &g, args.svg)?;
            Ok(if args.common.json {
                commands::to_json(&g)
            } else {
                format!("{}: {} blocks, {:.3} ms\n", g.label, g.blocks.len(), g.makespan_ms)
            })
        }
        Command::Sandbox(args) => {
            if !(args.eps > 0.0) || args.trials == 0 || args.dim == 0 || args.microbatches == 0 {
                return Err(CliError::Config(
                    "--eps must be > 0; --trials, --dim and --microbatches must be >= 1".into(),
                ));
            }
            let params = SandboxParams {
                objective: match args.objective {
                    Objective::Quadratic => ObjectiveChoice::Quadratic,
                    Objective::Logistic => ObjectiveChoice::Logistic {
                        samples: args.samples,
                        reg: args.reg,
                    },
                },
                dim: args.dim,
                sigma: args.sigma,
                p_list: args.p.clone(),
                eps: args.eps,
                trials: args.trials,
                seed: args.seed,
                eta: args.eta,
                microbatches: args.microbatches,
                steps: args.steps,
            };
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            match &args.plan {
                Some(path) => {
                    let plan = commands::read_plan(path)?;
                    let r = commands::sandbox_tta(&params, &plan)?;
                    commands::write_tta(&out, &r)?;
                    Ok(if args.json {
                        commands::to_json(&r)
                    } else {
                        format!(
                            "measured TTA ratio {:.4}, predicted {:.4} (kappa {:.4}, p_eff {:.4})\n",
                            r.measured_ratio, r.predicted_ratio, r.kappa, r.p_eff_hat
                        )
                    })
                }
                None => {
                    let r = commands::sandbox_scaling(&params)?;
                    commands::write_scaling(&out, &r)?;
                    Ok(if args.json { commands::to_json(&r) } else { r.to_csv() })
                }
            }
        }
        Command::Report(args) => {
            let plan = commands::read_plan(&args.plan)?;
            let tta = match &args.tta {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                    Some(
                        serde_json::from_str(&text)
                            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                    )
                }
                None => None,
            };
            let r = commands::report(&plan, tta.as_ref())?;
            if let Some(out) = &args.out {
                commands::write_report(out, &r)?;
            }
            Ok(if args.json { commands::to_json(&r) } else { r.summary() })
        }
    }
}
