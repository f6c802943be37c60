//! Discrete-event simulation of the module-server pipeline runtime.
//!
//! Each pipeline rank runs a server loop over an input queue. Executing a
//! module walks its children in execution order: children owned by the same
//! rank run inline, children owned elsewhere are requested and the worker
//! parks until the response comes back. Rank 0 owns the root and issues one
//! forward and one backward root task per microbatch according to the
//! schedule policy.

mod sim;
mod static_mode;
mod timeline;

use serde::{Deserialize, Serialize};

pub use sim::{run_step, Decision, MessageCounts, Pipeline, StepOptions, StepResult};
pub use static_mode::{
    apply_fast_mode, record_and_replay, CallRecord, FastPlan, ReplayOrder, StepRecord, TaskKey,
};
pub use timeline::{
    check_completeness, check_exclusivity, gantt_bars, Event, EventKind, GanttBar, Timeline,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn short(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulePolicy {
    Simple,
    #[default]
    Interleaved,
}

impl SchedulePolicy {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "simple" => Ok(SchedulePolicy::Simple),
            "interleaved" => Ok(SchedulePolicy::Interleaved),
            other => Err(Error::Config(format!("unknown pipeline policy `{other}`"))),
        }
    }
}

/// What rank 0 knows when it decides which root task to issue next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulerState {
    pub microbatches: usize,
    /// Forwards issued so far; they are always issued in microbatch order.
    pub forwards_issued: usize,
    pub forward_done: Vec<bool>,
    pub backward_issued: Vec<bool>,
}

impl SchedulerState {
    pub fn new(microbatches: usize) -> Self {
        Self {
            microbatches,
            forwards_issued: 0,
            forward_done: vec![false; microbatches],
            backward_issued: vec![false; microbatches],
        }
    }

    /// Microbatches whose forward has finished and whose backward has not
    /// been issued, ascending.
    pub fn backward_ready(&self) -> Vec<usize> {
        (0..self.microbatches)
            .filter(|&mb| self.forward_done[mb] && !self.backward_issued[mb])
            .collect()
    }

    pub fn all_issued(&self) -> bool {
        self.forwards_issued == self.microbatches && self.backward_issued.iter().all(|&b| b)
    }

    pub fn mark_issued(&mut self, mb: usize, dir: Direction) {
        match dir {
            Direction::Forward => {
                debug_assert_eq!(mb, self.forwards_issued);
                self.forwards_issued += 1;
            }
            Direction::Backward => self.backward_issued[mb] = true,
        }
    }
}

/// Next root task rank 0 should issue, or `None` if nothing can be issued
/// right now (or everything has been).
///
/// The simple policy issues every forward, waits for all of them to finish,
/// then issues the backwards in order. The interleaved policy issues the
/// lowest backward-ready microbatch if there is one, and the next forward
/// otherwise.
pub fn next_action(policy: SchedulePolicy, state: &SchedulerState) -> Option<(usize, Direction)> {
    let m = state.microbatches;
    match policy {
        SchedulePolicy::Simple => {
            if state.forwards_issued < m {
                return Some((state.forwards_issued, Direction::Forward));
            }
            if !state.forward_done.iter().all(|&d| d) {
                return None;
            }
            state
                .backward_issued
                .iter()
                .position(|&b| !b)
                .map(|mb| (mb, Direction::Backward))
        }
        SchedulePolicy::Interleaved => {
            if let Some(&mb) = state.backward_ready().first() {
                return Some((mb, Direction::Backward));
            }
            (state.forwards_issued < m).then_some((state.forwards_issued, Direction::Forward))
        }
    }
}

/// Settings that span a multi-step run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub microbatches: usize,
    pub policy: SchedulePolicy,
    pub static_mode: bool,
    pub fast_mode: bool,
    /// Backward time as a multiple of forward time.
    pub bwd_factor: f64,
    /// Steps recorded before static replay starts.
    pub record_steps: usize,
    pub steps: usize,
    /// Relative compute-time noise per execution, uniform in `[1-j, 1+j]`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            microbatches: 1,
            policy: SchedulePolicy::Interleaved,
            static_mode: false,
            fast_mode: false,
            bwd_factor: 2.0,
            record_steps: 5,
            steps: 1,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.microbatches == 0 {
            return Err(Error::Config("microbatches must be at least 1".into()));
        }
        if self.steps == 0 || self.record_steps == 0 {
            return Err(Error::Config("steps and record_steps must be at least 1".into()));
        }
        if self.fast_mode && !self.static_mode {
            return Err(Error::Config("fast_mode requires static_mode".into()));
        }
        if !(self.bwd_factor >= 0.0) || !self.bwd_factor.is_finite() {
            return Err(Error::Config(format!("bwd_factor must be >= 0, got {}", self.bwd_factor)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Results of a multi-step run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub steps: Vec<StepResult>,
    /// Recorded step whose task order is replayed, when static mode kicked in.
    pub replayed_from: Option<usize>,
    pub fast_plan: Option<FastPlan>,
}

/// Runs `cfg.steps` training steps. In static mode the first
/// `cfg.record_steps` steps are recorded and later steps replay the fastest
/// one; fast mode rewires calls from the second step on.
pub fn simulate(pipeline: &Pipeline, cfg: &SimConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut steps: Vec<StepResult> = Vec::with_capacity(cfg.steps);
    let mut replay: Option<ReplayOrder> = None;
    let mut fast_plan: Option<FastPlan> = None;
    for step in 0..cfg.steps {
        let replaying = cfg.static_mode && step >= cfg.record_steps;
        if replaying && replay.is_none() {
            let records: Vec<StepRecord> = steps[..cfg.record_steps]
                .iter()
                .map(|s| s.record.clone())
                .collect();
            replay = Some(record_and_replay(&records)?);
        }
        let opts = StepOptions {
            step,
            fast_plan: fast_plan.as_ref(),
            replay: if replaying { replay.as_ref() } else { None },
        };
        let result = run_step(pipeline, cfg, &opts)?;
        if cfg.fast_mode && step == 0 {
            fast_plan = Some(apply_fast_mode(&result.record.calls));
        }
        steps.push(result);
    }
    Ok(RunResult {
        replayed_from: replay.map(|r| r.source_step),
        steps,
        fast_plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(policy: SchedulePolicy, m: usize) -> Vec<(usize, Direction)> {
        // Forwards finish immediately after issue.
        let mut state = SchedulerState::new(m);
        let mut out = Vec::new();
        while let Some((mb, dir)) = next_action(policy, &state) {
            state.mark_issued(mb, dir);
            if dir == Direction::Forward {
                state.forward_done[mb] = true;
            }
            out.push((mb, dir));
        }
        assert!(state.all_issued());
        out
    }

    #[test]
    fn single_microbatch_is_forward_then_backward() {
        for policy in [SchedulePolicy::Simple, SchedulePolicy::Interleaved] {
            assert_eq!(
                drain(policy, 1),
                vec![(0, Direction::Forward), (0, Direction::Backward)]
            );
        }
    }

    #[test]
    fn simple_issues_all_forwards_first() {
        use Direction::*;
        assert_eq!(
            drain(SchedulePolicy::Simple, 3),
            vec![(0, Forward), (1, Forward), (2, Forward), (0, Backward), (1, Backward), (2, Backward)]
        );
    }

    #[test]
    fn interleaved_prefers_ready_backward() {
        let mut state = SchedulerState::new(3);
        state.mark_issued(0, Direction::Forward);
        state.mark_issued(1, Direction::Forward);
        assert_eq!(
            next_action(SchedulePolicy::Interleaved, &state),
            Some((2, Direction::Forward))
        );
        state.forward_done[0] = true;
        assert_eq!(
            next_action(SchedulePolicy::Interleaved, &state),
            Some((0, Direction::Backward))
        );
        assert_eq!(next_action(SchedulePolicy::Simple, &state), Some((2, Direction::Forward)));
    }

    #[test]
    fn simple_waits_for_every_forward() {
        let mut state = SchedulerState::new(2);
        state.mark_issued(0, Direction::Forward);
        state.mark_issued(1, Direction::Forward);
        state.forward_done[0] = true;
        assert_eq!(next_action(SchedulePolicy::Simple, &state), None);
        state.forward_done[1] = true;
        assert_eq!(
            next_action(SchedulePolicy::Simple, &state),
            Some((0, Direction::Backward))
        );
    }

    #[test]
    fn fast_needs_static() {
        let cfg = SimConfig {
            fast_mode: true,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
