//! Derived metrics and summary reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freezectl::MaskHistory;
use crate::lp::FreezePlan;
use crate::sandbox::TtaReport;

/// Reported figures shown next to computed ones, never mixed with them.
pub const REFERENCE_NOTES: &[&str] = &[
    "reported: +36.33% throughput, GPipe, LLaMA-8B",
    "reported: 31.66% batch-time reduction from a 698 ms GPipe baseline",
];

/// Per-step time factor: `(1 - r_max) + r_max * pd_min / pd_max`.
pub fn kappa(r_max: f64, pd_min: f64, pd_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_max) {
        return Err(Error::domain("r_max", r_max, "[0, 1]"));
    }
    if !(pd_min > 0.0 && pd_min <= pd_max) {
        return Err(Error::domain("makespan envelope", format!("[{pd_min}, {pd_max}]"), "0 < min <= max"));
    }
    Ok((1.0 - r_max) + r_max * (pd_min / pd_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaVerdict {
    pub ratio: f64,
    /// `kappa < p_eff`.
    pub improves: bool,
}

pub fn tta_ratio(kappa: f64, p_eff: f64) -> Result<TtaVerdict> {
    if !(p_eff > 0.0 && p_eff <= 1.0) {
        return Err(Error::domain("p_eff", p_eff, "(0, 1]"));
    }
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::domain("kappa", kappa, "(0, 1]"));
    }
    Ok(TtaVerdict {
        ratio: kappa / p_eff,
        improves: kappa < p_eff,
    })
}

/// Frozen parameters over all parameters, pooled across recorded masks.
pub fn average_freeze_ratio(history: &MaskHistory) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::domain("mask history", "empty", "at least one mask"));
    }
    let (frozen, total) = history
        .rows()
        .iter()
        .fold((0u64, 0u64), |(f, t), r| (f + r.popcount as u64, t + r.n_params as u64));
    Ok(if total == 0 { 0.0 } else { frozen as f64 / total as f64 })
}

pub fn reduction_pct(base: f64, opt: f64) -> f64 {
    100.0 * (1.0 - opt / base)
}

pub fn throughput_gain_pct(base: f64, opt: f64) -> f64 {
    100.0 * (base / opt - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub makespan_base: f64,
    pub makespan_opt: f64,
    pub makespan_floor: f64,
    pub reduction_pct: f64,
    pub throughput_gain_pct: f64,
    pub r_max: f64,
    /// Planned mean ratio per stage, stage 1 first.
    pub stage_freeze_ratios: Vec<f64>,
    pub plan_freeze_ratio: f64,
    /// Pooled over recorded masks, when given.
    pub observed_freeze_ratio: Option<f64>,
    pub kappa: f64,
    pub p_eff: f64,
    /// `"sandbox"` when measured, otherwise `"1 - mean ratio"`.
    pub p_eff_source: String,
    pub predicted_tta_ratio: f64,
    pub improves_tta: bool,
    pub measured_tta_ratio: Option<f64>,
    pub references: Vec<String>,
}

pub fn build_report(
    plan: &FreezePlan,
    masks: Option<&MaskHistory>,
    sandbox: Option<&TtaReport>,
) -> Result<ThroughputReport> {
    if let Some(r) = plan.ratios.iter().find(|r| r.s == 0 || r.s > plan.num_stages) {
        return Err(Error::Consistency(format!(
            "plan ratio for stage {} but the plan has {} stages",
            r.s, plan.num_stages
        )));
    }
    if let Some(row) = masks.and_then(|h| h.rows().iter().find(|r| r.stage == 0 || r.stage > plan.num_stages)) {
        return Err(Error::Consistency(format!(
            "mask recorded for stage {} but the plan has {} stages",
            row.stage, plan.num_stages
        )));
    }
    let observed_freeze_ratio = masks.map(average_freeze_ratio).transpose()?;
    let k = kappa(plan.r_max, plan.makespan_floor, plan.makespan_base)?;
    let plan_freeze_ratio = plan.mean_ratio();
    let (p_eff, source) = match sandbox {
        Some(s) => (s.p_eff_hat, "sandbox"),
        None => (1.0 - plan_freeze_ratio, "1 - mean ratio"),
    };
    let verdict = tta_ratio(k, p_eff.max(f64::MIN_POSITIVE))?;
    Ok(ThroughputReport {
        makespan_base: plan.makespan_base,
        makespan_opt: plan.makespan_opt,
        makespan_floor: plan.makespan_floor,
        reduction_pct: reduction_pct(plan.makespan_base, plan.makespan_opt),
        throughput_gain_pct: throughput_gain_pct(plan.makespan_base, plan.makespan_opt),
        r_max: plan.r_max,
        stage_freeze_ratios: plan.stage_averages(),
        plan_freeze_ratio,
        observed_freeze_ratio,
        kappa: k,
        p_eff,
        p_eff_source: source.to_string(),
        predicted_tta_ratio: verdict.ratio,
        improves_tta: verdict.improves,
        measured_tta_ratio: sandbox.map(|s| s.measured_ratio),
        references: REFERENCE_NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Plain-text table, one row per labelled report.
pub fn render_table(rows: &[(&str, &ThroughputReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>14} {:>16} {:>14} {:>8}",
        "Method", "Avg Frz. Ratio", "Batch Time (ms)", "Throughput Δ", "kappa"
    );
    for (label, r) in rows {
        let ratio = r.observed_freeze_ratio.unwrap_or(r.plan_freeze_ratio);
        let _ = writeln!(
            out,
            "{:<16} {:>14.2} {:>16.2} {:>13.2}% {:>8.4}",
            label,
            100.0 * ratio,
            r.makespan_opt,
            r.throughput_gain_pct,
            r.kappa
        );
    }
    out
}

impl ThroughputReport {
    pub fn summary(&self) -> String {
        let mut out = render_table(&[("No Freezing", &self.baseline()), ("Planned", self)]);
        let _ = writeln!(
            out,
            "makespan {:.3} -> {:.3} ms (floor {:.3}), reduction {:.2}%",
            self.makespan_base, self.makespan_opt, self.makespan_floor, self.reduction_pct
        );
        let _ = writeln!(
            out,
            "predicted TTA ratio {:.4} (p_eff {:.4}, {}){}",
            self.predicted_tta_ratio,
            self.p_eff,
            self.p_eff_source,
            if self.improves_tta { "" } else { ", no TTA gain" }
        );
        for note in &self.references {
            let _ = writeln!(out, "{note}");
        }
        out
    }

    fn baseline(&self) -> ThroughputReport {
        ThroughputReport {
            makespan_opt: self.makespan_base,
            reduction_pct: 0.0,
            throughput_gain_pct: 0.0,
            stage_freeze_ratios: vec![0.0; self.stage_freeze_ratios.len()],
            plan_freeze_ratio: 0.0,
            observed_freeze_ratio: None,
            kappa: 1.0,
            ..self.clone()
        }
    }
}
