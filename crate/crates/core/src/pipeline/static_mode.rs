//! Static-mode recording/replay and fast-mode call chaining.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use super::Direction;
use crate::error::{Error, Result};

/// Identity of one unit of work taken from a rank's queue.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKey {
    /// Rank 0 starting a root task.
    Issue { microbatch: usize, direction: Direction },
    /// A request for one or more modules (first module id, count).
    Request {
        module: String,
        count: usize,
        microbatch: usize,
        direction: Direction,
    },
    /// The response to the call that started with the given request.
    Response {
        module: String,
        count: usize,
        microbatch: usize,
        direction: Direction,
    },
}

impl TaskKey {
    pub fn is_request(&self) -> bool {
        matches!(self, TaskKey::Request { .. })
    }
}

/// One remote call observed while executing a parent module.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct CallRecord {
    pub parent: usize,
    pub direction: Direction,
    /// Position among the parent's child groups in execution order.
    pub group: usize,
    pub rank: usize,
}

/// Everything static and fast mode need to know about one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub makespan: f64,
    /// Dispatch order per rank.
    pub orders: Vec<Vec<TaskKey>>,
    /// Calls made during the step, sorted, one per (parent, direction, group).
    pub calls: Vec<CallRecord>,
    /// Whether fast-mode chaining was active.
    pub fast: bool,
}

impl StepRecord {
    pub fn requests(&self) -> Vec<&TaskKey> {
        let mut r: Vec<&TaskKey> = self.orders.iter().flatten().filter(|k| k.is_request()).collect();
        r.sort();
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOrder {
    pub source_step: usize,
    pub orders: Vec<Vec<TaskKey>>,
    pub fast: bool,
}

/// Picks the recorded step with the smallest makespan (earliest on ties)
/// after checking that every step made the same requests.
pub fn record_and_replay(history: &[StepRecord]) -> Result<ReplayOrder> {
    let first = history
        .first()
        .ok_or_else(|| Error::StaticMode("no recorded steps".into()))?;
    let reference = first.requests();
    for (i, step) in history.iter().enumerate().skip(1) {
        let requests = step.requests();
        if requests != reference {
            let divergent = requests
                .iter()
                .zip(&reference)
                .find(|(a, b)| a != b)
                .map(|(a, _)| (*a).clone())
                .or_else(|| requests.get(reference.len()).map(|k| (*k).clone()))
                .or_else(|| reference.get(requests.len()).map(|k| (*k).clone()));
            return Err(Error::StaticMode(format!(
                "step {i} made a different set of requests (first difference: {divergent:?})"
            )));
        }
    }
    let mut best = 0;
    for (i, step) in history.iter().enumerate() {
        if step.makespan < history[best].makespan {
            best = i;
        }
    }
    Ok(ReplayOrder {
        source_step: best,
        orders: history[best].orders.clone(),
        fast: history[best].fast,
    })
}

/// Runs of consecutive remote child groups that pass tensors directly from
/// one child to the next instead of through the parent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FastPlan {
    /// Keyed by (parent module, direction); ranges over child-group indices,
    /// each at least two long.
    pub chains: BTreeMap<(usize, Direction), Vec<Range<usize>>>,
}

impl FastPlan {
    /// Chain containing `group`, if any.
    pub fn chain_of(&self, parent: usize, dir: Direction, group: usize) -> Option<Range<usize>> {
        self.chains
            .get(&(parent, dir))?
            .iter()
            .find(|r| r.contains(&group))
            .cloned()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }
}

/// Builds the fast-mode plan from the calls seen in the first step. Calls to
/// adjacent child groups of the same parent form a chain; a group executed
/// locally between them breaks it.
pub fn apply_fast_mode(calls: &[CallRecord]) -> FastPlan {
    let mut by_parent: BTreeMap<(usize, Direction), Vec<usize>> = BTreeMap::new();
    for c in calls {
        by_parent.entry((c.parent, c.direction)).or_default().push(c.group);
    }
    let mut chains = BTreeMap::new();
    for (key, mut groups) in by_parent {
        groups.sort_unstable();
        groups.dedup();
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=groups.len() {
            if i == groups.len() || groups[i] != groups[i - 1] + 1 {
                if i - start >= 2 {
                    runs.push(groups[start]..groups[i - 1] + 1);
                }
                start = i;
            }
        }
        if !runs.is_empty() {
            chains.insert(key, runs);
        }
    }
    FastPlan { chains }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(module: &str) -> TaskKey {
        TaskKey::Request {
            module: module.into(),
            count: 1,
            microbatch: 0,
            direction: Direction::Forward,
        }
    }

    fn record(makespan: f64, modules: &[&str]) -> StepRecord {
        StepRecord {
            makespan,
            orders: vec![modules.iter().map(|m| key(m)).collect()],
            calls: Vec::new(),
            fast: false,
        }
    }

    #[test]
    fn picks_the_fastest_step() {
        let history: Vec<_> = [10.0, 9.0, 11.0, 9.5, 12.0]
            .iter()
            .map(|&t| record(t, &["a", "b"]))
            .collect();
        assert_eq!(record_and_replay(&history).unwrap().source_step, 1);
    }

    #[test]
    fn identical_steps_pick_the_first() {
        let history = vec![record(1.0, &["a"]); 5];
        assert_eq!(record_and_replay(&history).unwrap().source_step, 0);
    }

    #[test]
    fn extra_request_is_a_violation() {
        let mut history = vec![record(1.0, &["a", "b"]); 5];
        history[3] = record(1.0, &["a", "b", "c"]);
        let err = record_and_replay(&history).unwrap_err().to_string();
        assert!(err.contains("step 3") && err.contains("\"c\""), "{err}");
    }

    #[test]
    fn chains_break_at_gaps() {
        let calls: Vec<CallRecord> = [0, 1, 3, 4, 5, 7]
            .iter()
            .map(|&g| CallRecord {
                parent: 2,
                direction: Direction::Forward,
                group: g,
                rank: 1,
            })
            .collect();
        let plan = apply_fast_mode(&calls);
        assert_eq!(plan.chains[&(2, Direction::Forward)], vec![0..2, 3..6]);
        assert_eq!(plan.chain_of(2, Direction::Forward, 4), Some(3..6));
        assert_eq!(plan.chain_of(2, Direction::Forward, 7), None);
        assert!(apply_fast_mode(&[]).is_empty());
    }
}
