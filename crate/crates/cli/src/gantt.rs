use std::fmt::Write as _;

use pipefreeze_core::dag::MakespanEvaluator;
use pipefreeze_core::{ActionKind, Durations, PipelineDag, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanttBlock {
    pub rank: usize,
    pub kind: ActionKind,
    pub microbatch: usize,
    pub stage: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanttTimeline {
    pub label: String,
    pub num_ranks: usize,
    pub makespan_ms: f64,
    pub blocks: Vec<GanttBlock>,
}

impl GanttTimeline {
    pub fn build(label: &str, dag: &PipelineDag, durations: &Durations) -> Result<Self> {
        let eval = MakespanEvaluator::new(dag)?;
        let w = eval.weights_from(durations)?;
        let st = eval.eval(&w);
        let mut blocks: Vec<GanttBlock> = dag
            .action_nodes()
            .map(|(i, a)| GanttBlock {
                rank: dag.rank_of(i).unwrap_or(0),
                kind: a.kind,
                microbatch: a.microbatch,
                stage: a.stage,
                start_ms: st.start[i],
                end_ms: st.start[i] + w[i],
            })
            .collect();
        blocks.sort_by(|a, b| a.rank.cmp(&b.rank).then(a.start_ms.total_cmp(&b.start_ms)));
        let num_ranks = blocks.iter().map(|b| b.rank + 1).max().unwrap_or(0);
        Ok(GanttTimeline {
            label: label.to_string(),
            num_ranks,
            makespan_ms: st.makespan,
            blocks,
        })
    }

    /// `max(end) - min(start)` over all blocks.
    pub fn span(&self) -> f64 {
        let lo = self.blocks.iter().map(|b| b.start_ms).fold(f64::INFINITY, f64::min);
        let hi = self.blocks.iter().map(|b| b.end_ms).fold(f64::NEG_INFINITY, f64::max);
        if self.blocks.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    /// First pair of blocks sharing a rank and overlapping in time.
    pub fn overlap(&self) -> Option<(&GanttBlock, &GanttBlock)> {
        self.blocks
            .windows(2)
            .find(|w| w[0].rank == w[1].rank && w[1].start_ms < w[0].end_ms - 1e-9)
            .map(|w| (&w[0], &w[1]))
    }

    pub fn to_svg(&self) -> String {
        const LANE: f64 = 28.0;
        const LEFT: f64 = 64.0;
        const TOP: f64 = 28.0;
        const WIDTH: f64 = 960.0;
        let scale = if self.makespan_ms > 0.0 { WIDTH / self.makespan_ms } else { 1.0 };
        let height = TOP + LANE * self.num_ranks as f64 + 24.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}" font-family="monospace" font-size="10">"#,
            LEFT + WIDTH + 16.0,
            height,
            LEFT + WIDTH + 16.0,
            height
        );
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="16" font-size="12">{} ({:.3} ms)</text>"#,
            escape(&self.label),
            self.makespan_ms
        );
        for r in 0..self.num_ranks {
            let y = TOP + LANE * r as f64;
            let _ = writeln!(s, r#"<text x="4" y="{:.1}">rank {r}</text>"#, y + LANE * 0.6);
            let _ = writeln!(
                s,
                r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" style="stroke:#ccc"/>"#,
                y + LANE,
                LEFT + WIDTH,
                y + LANE
            );
        }
        for b in &self.blocks {
            let x = LEFT + b.start_ms * scale;
            let w = (b.end_ms - b.start_ms) * scale;
            let y = TOP + LANE * b.rank as f64 + 2.0;
            let fill = match b.kind {
                ActionKind::Forward => "#4c72b0",
                ActionKind::Backward => "#dd8452",
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.3}" y="{y:.1}" width="{w:.3}" height="{:.1}" style="fill:{fill};stroke:#222;stroke-width:0.5"><title>{}({},{}) {:.3}-{:.3} ms</title></rect>"#,
                LANE - 4.0,
                kind_letter(b.kind),
                b.microbatch,
                b.stage,
                b.start_ms,
                b.end_ms
            );
            if w >= 14.0 {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.3}" y="{:.1}" style="fill:#fff" text-anchor="middle">{}{}</text>"#,
                    x + w / 2.0,
                    y + LANE * 0.55,
                    kind_letter(b.kind),
                    b.microbatch
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn kind_letter(k: ActionKind) -> char {
    match k {
        ActionKind::Forward => 'f',
        ActionKind::Backward => 'b',
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use pipefreeze_core::{build_dag, build_schedule, PipelineConfig, ScheduleKind, StageTiming, TimingProfile};

    #[test]
    fn gpipe_timeline() {
        let c = PipelineConfig::new(ScheduleKind::GPipe, 2, 1, 2).unwrap();
        let dag = build_dag(&build_schedule(&c).unwrap(), &c).unwrap();
        let t = StageTiming {
            forward_ms: 1.0,
            backward_act_ms: 1.0,
            backward_param_ms: 1.0,
        };
        let p = TimingProfile::from_stage_defaults(&c, &[t]).unwrap();
        let g = GanttTimeline::build("baseline", &dag, &p.max_durations()).unwrap();
        assert_eq!(g.makespan_ms, 9.0);
        assert_eq!(g.span(), 9.0);
        assert_eq!(g.blocks.len(), 8);
        assert!(g.overlap().is_none());
        let svg = g.to_svg();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 8);
        assert!(!svg.contains("href"));
    }
}
