//! Pipeline-parallel schedule simulation and freeze-ratio planning.

pub mod analysis;
pub mod dag;
pub mod error;
pub mod freezectl;
pub mod lp;
pub mod sandbox;
pub mod schedule;
pub mod timing;

pub use analysis::{build_report, kappa, tta_ratio, ThroughputReport};
pub use dag::{build_dag, longest_path_start_times, validate_dag, Durations, Node, PipelineDag};
pub use error::{Error, Result};
pub use freezectl::{actual_freeze_ratio, phase_of, FreezeMask, Phase, PhasePlan};
pub use lp::{optimize_freeze_plan, verify_solution, BudgetScope, FreezePlan, LambdaMode};
pub use schedule::{build_schedule, ActionId, ActionKind, PipelineConfig, RankTimeline, ScheduleKind};
pub use timing::{Bounds, StageTiming, TimingProfile, TimingSpec};
