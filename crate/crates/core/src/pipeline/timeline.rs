use std::collections::BTreeMap;

use serde::Serialize;

use super::Direction;
use crate::error::Result;
use crate::model_graph::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Compute,
    Comm,
}

/// One interval on a rank. Comm events sit on the sending rank and span
/// departure to arrival.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub rank: usize,
    pub microbatch: usize,
    pub module: String,
    pub direction: Direction,
    pub kind: EventKind,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub makespan: f64,
}

impl Timeline {
    pub fn compute_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Compute)
    }

    /// Per-rank fraction of the makespan spent computing.
    pub fn busy_fraction(&self, ranks: usize) -> Vec<f64> {
        let mut busy = vec![0.0; ranks];
        for e in self.compute_events() {
            busy[e.rank] += e.t_end - e.t_start;
        }
        if self.makespan > 0.0 {
            busy.iter().map(|b| b / self.makespan).collect()
        } else {
            // A step with no elapsed time: ranks that did any work count as
            // fully busy.
            let mut active = vec![0.0; ranks];
            for e in self.compute_events() {
                active[e.rank] = 1.0;
            }
            active
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "microbatch", "module", "direction", "kind", "t_start", "t_end"])?;
        for e in &self.events {
            w.write_record([
                e.rank.to_string(),
                e.microbatch.to_string(),
                e.module.clone(),
                e.direction.short().to_string(),
                match e.kind {
                    EventKind::Compute => "compute".to_string(),
                    EventKind::Comm => "comm".to_string(),
                },
                format!("{:.9}", e.t_start),
                format!("{:.9}", e.t_end),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    /// The multiset of compute executions, ignoring timing.
    pub fn compute_multiset(&self) -> BTreeMap<(usize, usize, String, Direction), usize> {
        let mut out = BTreeMap::new();
        for e in self.compute_events() {
            *out
                .entry((e.rank, e.microbatch, e.module.clone(), e.direction))
                .or_insert(0) += 1;
        }
        out
    }
}

/// Pairs of overlapping compute events on the same rank. Touching endpoints
/// do not overlap.
pub fn check_exclusivity(timeline: &Timeline) -> Vec<(Event, Event)> {
    let mut by_rank: BTreeMap<usize, Vec<&Event>> = BTreeMap::new();
    for e in timeline.compute_events() {
        by_rank.entry(e.rank).or_default().push(e);
    }
    let mut violations = Vec::new();
    for events in by_rank.values_mut() {
        events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
        let mut latest: Option<&Event> = None;
        for &e in events.iter() {
            if let Some(prev) = latest {
                if e.t_start < prev.t_end {
                    violations.push((prev.clone(), e.clone()));
                }
                if e.t_end > prev.t_end {
                    latest = Some(e);
                }
            } else {
                latest = Some(e);
            }
        }
    }
    violations
}

/// Modules whose forward or backward count differs from `microbatches`,
/// with the observed (forward, backward) counts.
pub fn check_completeness(
    timeline: &Timeline,
    spec: &ModelSpec,
    microbatches: usize,
) -> Vec<(String, usize, usize)> {
    let mut counts: BTreeMap<&str, (usize, usize)> = spec
        .modules()
        .iter()
        .map(|m| (m.id.as_str(), (0, 0)))
        .collect();
    for e in timeline.compute_events() {
        if let Some(c) = counts.get_mut(e.module.as_str()) {
            match e.direction {
                Direction::Forward => c.0 += 1,
                Direction::Backward => c.1 += 1,
            }
        }
    }
    counts
        .into_iter()
        .filter(|(_, (f, b))| *f != microbatches || *b != microbatches)
        .map(|(m, (f, b))| (m.to_string(), f, b))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GanttBar {
    pub rank: usize,
    pub t0: f64,
    pub t1: f64,
    pub label: String,
    pub kind: EventKind,
}

/// Bars for plotting: consecutive compute events of the same microbatch and
/// direction on a rank are merged into one bar labelled like `F3` / `B3`.
/// Comm events are kept as they are.
pub fn gantt_bars(timeline: &Timeline) -> Vec<GanttBar> {
    let mut compute: Vec<&Event> = timeline.compute_events().collect();
    compute.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
    });
    let mut bars: Vec<GanttBar> = Vec::new();
    let mut last_key: Option<(usize, usize, Direction)> = None;
    for e in compute {
        let key = (e.rank, e.microbatch, e.direction);
        let label = format!(
            "{}{}",
            if e.direction == Direction::Forward { 'F' } else { 'B' },
            e.microbatch
        );
        match bars.last_mut() {
            Some(bar) if last_key == Some(key) && e.t_start <= bar.t1 => {
                bar.t1 = bar.t1.max(e.t_end);
            }
            _ => bars.push(GanttBar {
                rank: e.rank,
                t0: e.t_start,
                t1: e.t_end,
                label,
                kind: EventKind::Compute,
            }),
        }
        last_key = Some(key);
    }
    for e in timeline.events.iter().filter(|e| e.kind == EventKind::Comm) {
        bars.push(GanttBar {
            rank: e.rank,
            t0: e.t_start,
            t1: e.t_end,
            label: format!("{} {}{}", e.module, e.direction.short(), e.microbatch),
            kind: EventKind::Comm,
        });
    }
    bars
}
