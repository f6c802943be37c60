use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::static_mode::{CallRecord, FastPlan, ReplayOrder, StepRecord, TaskKey};
use super::timeline::{Event, EventKind, Timeline};
use super::{next_action, Direction, SchedulerState, SimConfig};
use crate::comm::{route, ClusterShape, D2DBuffers, Device, Reservation, Route, TensorStub};
use crate::error::{Error, Result};
use crate::model_graph::{ModelSpec, NodeTree};
use crate::partition::Assignment;
use crate::topology::Topology;

/// A model placed on pipeline ranks, plus the physical links between them.
#[derive(Clone, Debug)]
pub struct Pipeline<'a> {
    pub spec: &'a ModelSpec,
    /// Pipeline rank owning each module.
    pub owner: Vec<usize>,
    pub pp_degree: usize,
    /// Global rank of each pipeline rank, used for link classification.
    pub global_rank: Vec<usize>,
    pub cluster: ClusterShape,
    /// Extra backward seconds per module (activation recomputation).
    pub recompute: Vec<f64>,
}

impl<'a> Pipeline<'a> {
    /// Places modules by partition and maps pipeline rank `p` to the global
    /// rank of the pipeline group that contains rank 0.
    pub fn new(
        spec: &'a ModelSpec,
        tree: &NodeTree,
        assignment: &Assignment,
        topo: &Topology,
        cluster: ClusterShape,
    ) -> Result<Self> {
        if assignment.degree != topo.pp_degree {
            return Err(Error::Simulation(format!(
                "assignment has {} partitions but the topology has pp_degree {}",
                assignment.degree, topo.pp_degree
            )));
        }
        let owner = assignment.module_partitions(tree, spec.len());
        let global_rank = (0..topo.pp_degree).map(|p| topo.rank_of(p, 0, 0)).collect();
        let mut p = Self::with_owners(spec, owner, topo.pp_degree, cluster)?;
        p.global_rank = global_rank;
        Ok(p)
    }

    /// Places module `m` on pipeline rank `owner[m]`; pipeline rank `p` is
    /// global rank `p`.
    pub fn with_owners(
        spec: &'a ModelSpec,
        owner: Vec<usize>,
        pp_degree: usize,
        cluster: ClusterShape,
    ) -> Result<Self> {
        if pp_degree == 0 {
            return Err(Error::PipelineDegree(0));
        }
        for m in 0..spec.len() {
            match owner.get(m) {
                Some(&p) if p < pp_degree => {}
                _ => return Err(Error::Unassigned(spec.module(m).id.clone())),
            }
        }
        if owner[spec.root()] != 0 {
            return Err(Error::Simulation("the root module must be on pipeline rank 0".into()));
        }
        cluster.validate()?;
        Ok(Self {
            spec,
            owner,
            pp_degree,
            global_rank: (0..pp_degree).collect(),
            cluster,
            recompute: vec![0.0; spec.len()],
        })
    }

    /// Child groups of `m` in execution order for `dir`. Children on `m`'s
    /// rank are single local groups; consecutive remote children of a
    /// sequential module on the same rank share one group.
    fn groups(&self, m: usize, dir: Direction) -> Vec<Group> {
        let own = self.owner[m];
        let sequential = self.spec.module(m).is_sequential;
        let mut groups: Vec<Group> = Vec::new();
        for &c in self.spec.children(m) {
            let rank = self.owner[c];
            if rank != own {
                if let Some(last) = groups.last_mut() {
                    if sequential && last.remote && last.rank == rank {
                        last.modules.push(c);
                        continue;
                    }
                }
            }
            groups.push(Group {
                modules: vec![c],
                rank,
                remote: rank != own,
            });
        }
        if dir == Direction::Backward {
            groups.reverse();
            for g in &mut groups {
                g.modules.reverse();
            }
        }
        groups
    }

    /// Steps executed on `m`'s rank to run `m` in direction `dir`.
    fn program(&self, m: usize, dir: Direction, plan: Option<&FastPlan>, out: &mut Vec<Step>) {
        if dir == Direction::Forward {
            out.push(Step::Compute { module: m });
        }
        let groups = self.groups(m, dir);
        let mut g = 0;
        while g < groups.len() {
            let group = &groups[g];
            if !group.remote {
                self.program(group.modules[0], dir, plan, out);
                g += 1;
                continue;
            }
            let chain = plan
                .and_then(|p| p.chain_of(m, dir, g))
                .filter(|r| r.start == g && groups[r.clone()].iter().all(|x| x.remote))
                .unwrap_or(g..g + 1);
            let links = groups[chain.clone()]
                .iter()
                .map(|x| Link {
                    rank: x.rank,
                    modules: x.modules.clone(),
                })
                .collect();
            out.push(Step::Call {
                parent: m,
                groups: chain.clone(),
                links,
            });
            g = chain.end;
        }
        if dir == Direction::Backward {
            out.push(Step::Compute { module: m });
        }
    }
}

#[derive(Clone, Debug)]
struct Group {
    modules: Vec<usize>,
    rank: usize,
    remote: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct Link {
    rank: usize,
    modules: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Step {
    Compute {
        module: usize,
    },
    Call {
        parent: usize,
        groups: Range<usize>,
        links: Vec<Link>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum MsgKind {
    Request,
    Response,
}

/// A pipeline message. Fields mirror what the runtime exchanges between
/// ranks; tensors are represented by their byte count only.
#[derive(Clone, Debug, Serialize)]
struct Message {
    seq: u64,
    kind: MsgKind,
    call_id: usize,
    from: usize,
    to: usize,
    microbatch: usize,
    direction: Direction,
    /// For requests, the link to execute first followed by the rest of the
    /// chain.
    links: Vec<Link>,
    reply_rank: usize,
    reply_task: usize,
    bytes: u64,
    arrival: f64,
    key: TaskKey,
    /// Location of the first requested module in the module tree.
    path: String,
    autocast: bool,
    grad_enabled: bool,
    checkpoint_enabled: bool,
    #[serde(skip)]
    reservation: Option<Reservation>,
}

#[derive(Clone, Debug)]
enum Origin {
    Root,
    Link {
        call_id: usize,
        reply_rank: usize,
        reply_task: usize,
        rest: Vec<Link>,
    },
}

#[derive(Clone, Debug)]
struct Task {
    rank: usize,
    microbatch: usize,
    direction: Direction,
    program: Vec<Step>,
    pc: usize,
    origin: Origin,
    awaiting: Option<usize>,
    done: bool,
}

#[derive(Debug)]
enum Ev {
    Arrive(Box<Message>),
    ComputeDone { task: usize },
}

struct Pending {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounts {
    pub requests: usize,
    pub responses: usize,
    pub metadata_rounds: usize,
    pub tensor_hops: usize,
    /// Remote calls made by parent modules (a fast-mode chain is one call).
    pub calls: usize,
}

impl std::ops::AddAssign for MessageCounts {
    fn add_assign(&mut self, o: Self) {
        self.requests += o.requests;
        self.responses += o.responses;
        self.metadata_rounds += o.metadata_rounds;
        self.tensor_hops += o.tensor_hops;
        self.calls += o.calls;
    }
}

/// One scheduling decision at rank 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub time: f64,
    pub microbatch: usize,
    pub direction: Direction,
    /// Backward-ready microbatches at the time of the decision.
    pub backward_ready: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepResult {
    pub step: usize,
    pub timeline: Timeline,
    pub counts: MessageCounts,
    pub decisions: Vec<Decision>,
    pub record: StepRecord,
    /// When the last root forward finished.
    pub forward_makespan: f64,
    pub makespan: f64,
    pub replayed: bool,
    pub fast: bool,
}

/// Per-step switches derived by the multi-step driver.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions<'p> {
    pub step: usize,
    pub fast_plan: Option<&'p FastPlan>,
    pub replay: Option<&'p ReplayOrder>,
}

struct RankState {
    queue: Vec<Message>,
    executing: Option<usize>,
    order: Vec<TaskKey>,
    replay_pos: usize,
}

struct Sim<'a, 'p> {
    pipe: &'a Pipeline<'a>,
    cfg: &'a SimConfig,
    step: usize,
    plan: Option<&'p FastPlan>,
    replay: Option<&'p ReplayOrder>,
    dynamic: bool,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Pending>,
    ranks: Vec<RankState>,
    tasks: Vec<Task>,
    buffers: D2DBuffers,
    sched: SchedulerState,
    fwd_finish: Vec<f64>,
    bwd_done: Vec<bool>,
    next_call: usize,
    events: Vec<Event>,
    counts: MessageCounts,
    decisions: Vec<Decision>,
    calls: BTreeSet<CallRecord>,
    call_keys: Vec<TaskKey>,
    programs: [Vec<Option<Vec<Step>>>; 2],
    paths: Vec<String>,
}

/// Simulates one training step.
pub fn run_step(pipe: &Pipeline, cfg: &SimConfig, opts: &StepOptions) -> Result<StepResult> {
    cfg.validate()?;
    let m = cfg.microbatches;
    let world = pipe.global_rank.iter().copied().max().unwrap_or(0) + 1;
    let plan = match opts.replay {
        // Replay follows the chosen step exactly, including whether it was
        // fast-chained.
        Some(r) if !r.fast => None,
        _ => opts.fast_plan,
    };
    let mut sim = Sim {
        pipe,
        cfg,
        step: opts.step,
        plan,
        replay: opts.replay,
        dynamic: opts.replay.is_none(),
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        ranks: (0..pipe.pp_degree)
            .map(|_| RankState {
                queue: Vec::new(),
                executing: None,
                order: Vec::new(),
                replay_pos: 0,
            })
            .collect(),
        tasks: Vec::new(),
        buffers: D2DBuffers::new(world, pipe.cluster.d2d_buffer_bytes),
        sched: SchedulerState::new(m),
        fwd_finish: vec![f64::NAN; m],
        bwd_done: vec![false; m],
        next_call: 0,
        events: Vec::new(),
        counts: MessageCounts::default(),
        decisions: Vec::new(),
        calls: BTreeSet::new(),
        call_keys: Vec::new(),
        programs: [vec![None; pipe.spec.len()], vec![None; pipe.spec.len()]],
        paths: module_paths(pipe.spec),
    };
    sim.run()?;

    let makespan = sim
        .events
        .iter()
        .map(|e| e.t_end)
        .fold(sim.now, f64::max);
    let forward_makespan = sim.fwd_finish.iter().copied().fold(0.0, f64::max);
    let record = StepRecord {
        makespan,
        orders: sim.ranks.iter().map(|r| r.order.clone()).collect(),
        calls: sim.calls.into_iter().collect(),
        fast: sim.plan.is_some_and(|p| !p.is_empty()),
    };
    Ok(StepResult {
        step: opts.step,
        timeline: Timeline {
            events: sim.events,
            makespan,
        },
        counts: sim.counts,
        decisions: sim.decisions,
        record,
        forward_makespan,
        makespan,
        replayed: opts.replay.is_some(),
        fast: sim.plan.is_some_and(|p| !p.is_empty()),
    })
}

fn module_paths(spec: &ModelSpec) -> Vec<String> {
    (0..spec.len())
        .map(|m| {
            let mut parts = vec![spec.module(m).id.as_str()];
            let mut cur = m;
            while let Some(p) = spec.parent(cur) {
                parts.push(spec.module(p).id.as_str());
                cur = p;
            }
            parts.reverse();
            parts.join("/")
        })
        .collect()
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Sim<'_, '_> {
    fn push(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Pending {
            time,
            seq: self.seq,
            ev,
        });
    }

    fn run(&mut self) -> Result<()> {
        loop {
            self.dispatch_all()?;
            let Some(next) = self.heap.peek() else { break };
            let t = next.time;
            self.now = t;
            while self.heap.peek().is_some_and(|p| p.time == t) {
                let p = self.heap.pop().expect("peeked");
                match p.ev {
                    Ev::Arrive(msg) => self.arrive(*msg)?,
                    Ev::ComputeDone { task } => {
                        let rank = self.tasks[task].rank;
                        self.ranks[rank].executing = None;
                        self.advance(task)?;
                    }
                }
            }
        }
        let finished = self.bwd_done.iter().all(|&d| d) && self.sched.all_issued();
        if !finished {
            return Err(Error::Deadlock {
                time: self.now,
                snapshot: self.snapshot(),
            });
        }
        if self.ranks.iter().any(|r| !r.queue.is_empty()) || !self.buffers.is_empty() {
            return Err(Error::Simulation(format!(
                "step ended with undelivered messages or held buffers: {}",
                self.snapshot()
            )));
        }
        Ok(())
    }

    fn snapshot(&self) -> String {
        let ranks: Vec<_> = self
            .ranks
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let parked: Vec<_> = self
                    .tasks
                    .iter()
                    .filter(|t| t.rank == r && !t.done && t.awaiting.is_some())
                    .map(|t| {
                        json!({
                            "microbatch": t.microbatch,
                            "direction": t.direction,
                            "awaiting_call": t.awaiting,
                        })
                    })
                    .collect();
                json!({
                    "rank": r,
                    "executing": s.executing,
                    "queue": s.queue.iter().map(|m| &m.key).collect::<Vec<_>>(),
                    "parked": parked,
                    "next_replay_key": self.replay.and_then(|o| o.orders[r].get(s.replay_pos)),
                })
            })
            .collect();
        json!({ "time": self.now, "step": self.step, "ranks": ranks }).to_string()
    }

    fn arrive(&mut self, mut msg: Message) -> Result<()> {
        if let Some(r) = msg.reservation.take() {
            r.release(&mut self.buffers)?;
        }
        let to = msg.to;
        self.ranks[to].queue.push(msg);
        Ok(())
    }

    fn dispatch_all(&mut self) -> Result<()> {
        for r in 0..self.ranks.len() {
            self.dispatch(r)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, r: usize) -> Result<()> {
        while self.ranks[r].executing.is_none() {
            let taken = match self.replay {
                Some(order) => {
                    let Some(expected) = order.orders[r].get(self.ranks[r].replay_pos) else {
                        break;
                    };
                    if let TaskKey::Issue {
                        microbatch,
                        direction,
                    } = *expected
                    {
                        if direction == Direction::Backward && !self.sched.forward_done[microbatch] {
                            break;
                        }
                        self.ranks[r].replay_pos += 1;
                        self.issue(microbatch, direction)?;
                        continue;
                    }
                    match self.ranks[r].queue.iter().position(|m| &m.key == expected) {
                        Some(i) => {
                            self.ranks[r].replay_pos += 1;
                            self.ranks[r].queue.remove(i)
                        }
                        None => break,
                    }
                }
                None => {
                    let queue = &self.ranks[r].queue;
                    if queue.is_empty() {
                        if r != 0 {
                            break;
                        }
                        let Some((mb, dir)) = next_action(self.cfg.policy, &self.sched) else {
                            break;
                        };
                        self.decisions.push(Decision {
                            time: self.now,
                            microbatch: mb,
                            direction: dir,
                            backward_ready: self.sched.backward_ready(),
                        });
                        self.issue(mb, dir)?;
                        continue;
                    }
                    let spec = self.pipe.spec;
                    let i = (0..queue.len())
                        .min_by(|&a, &b| {
                            let (x, y) = (&queue[a], &queue[b]);
                            x.arrival
                                .total_cmp(&y.arrival)
                                .then(x.microbatch.cmp(&y.microbatch))
                                .then_with(|| {
                                    let mx = &spec.module(x.links[0].modules[0]).id;
                                    let my = &spec.module(y.links[0].modules[0]).id;
                                    mx.cmp(my)
                                })
                                .then(x.seq.cmp(&y.seq))
                        })
                        .expect("queue is non-empty");
                    self.ranks[r].queue.remove(i)
                }
            };
            self.ranks[r].order.push(taken.key.clone());
            self.take(taken)?;
        }
        Ok(())
    }

    fn issue(&mut self, mb: usize, dir: Direction) -> Result<()> {
        self.sched.mark_issued(mb, dir);
        self.ranks[0].order.push(TaskKey::Issue {
            microbatch: mb,
            direction: dir,
        });
        let root = self.pipe.spec.root();
        let program = self.program_for(&[root], dir);
        let id = self.tasks.len();
        self.tasks.push(Task {
            rank: 0,
            microbatch: mb,
            direction: dir,
            program,
            pc: 0,
            origin: Origin::Root,
            awaiting: None,
            done: false,
        });
        self.advance(id)
    }

    fn program_for(&mut self, modules: &[usize], dir: Direction) -> Vec<Step> {
        let d = (dir == Direction::Backward) as usize;
        let mut out = Vec::new();
        for &m in modules {
            if self.programs[d][m].is_none() {
                let mut p = Vec::new();
                self.pipe.program(m, dir, self.plan, &mut p);
                self.programs[d][m] = Some(p);
            }
            out.extend(self.programs[d][m].iter().flatten().cloned());
        }
        out
    }

    /// Handles a message taken from a rank's queue.
    fn take(&mut self, msg: Message) -> Result<()> {
        match msg.kind {
            MsgKind::Request => {
                let mut links = msg.links;
                let link = links.remove(0);
                let program = self.program_for(&link.modules, msg.direction);
                let id = self.tasks.len();
                self.tasks.push(Task {
                    rank: msg.to,
                    microbatch: msg.microbatch,
                    direction: msg.direction,
                    program,
                    pc: 0,
                    origin: Origin::Link {
                        call_id: msg.call_id,
                        reply_rank: msg.reply_rank,
                        reply_task: msg.reply_task,
                        rest: links,
                    },
                    awaiting: None,
                    done: false,
                });
                self.advance(id)
            }
            MsgKind::Response => {
                let task = msg.reply_task;
                debug_assert_eq!(self.tasks[task].awaiting, Some(msg.call_id));
                self.tasks[task].awaiting = None;
                self.advance(task)
            }
        }
    }

    fn duration(&self, module: usize, mb: usize, dir: Direction) -> f64 {
        let base = self.pipe.spec.module(module).fwd_time;
        let d = match dir {
            Direction::Forward => base,
            Direction::Backward => self.cfg.bwd_factor * base + self.pipe.recompute[module],
        };
        if self.cfg.jitter == 0.0 || d == 0.0 {
            return d;
        }
        let key = [self.cfg.seed, self.step as u64, module as u64, mb as u64, dir as u64]
            .iter()
            .fold(0u64, |acc, &x| mix(acc ^ x));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        d * rng.random_range(1.0 - self.cfg.jitter..=1.0 + self.cfg.jitter)
    }

    /// Runs task `id` from its current step until it starts a compute, parks
    /// on a call, or finishes.
    fn advance(&mut self, id: usize) -> Result<()> {
        let rank = self.tasks[id].rank;
        loop {
            let pc = self.tasks[id].pc;
            let Some(step) = self.tasks[id].program.get(pc).cloned() else {
                return self.complete(id);
            };
            self.tasks[id].pc += 1;
            let (mb, dir) = (self.tasks[id].microbatch, self.tasks[id].direction);
            match step {
                Step::Compute { module } => {
                    let d = self.duration(module, mb, dir);
                    self.events.push(Event {
                        rank,
                        microbatch: mb,
                        module: self.pipe.spec.module(module).id.clone(),
                        direction: dir,
                        kind: EventKind::Compute,
                        t_start: self.now,
                        t_end: self.now + d,
                    });
                    if d > 0.0 {
                        self.ranks[rank].executing = Some(id);
                        self.push(self.now + d, Ev::ComputeDone { task: id });
                        return Ok(());
                    }
                }
                Step::Call {
                    parent,
                    groups,
                    links,
                } => {
                    for (g, link) in groups.zip(&links) {
                        self.calls.insert(CallRecord {
                            parent,
                            direction: dir,
                            group: g,
                            rank: link.rank,
                        });
                    }
                    let call_id = self.next_call;
                    self.next_call += 1;
                    let first = &self.pipe.spec.module(links[0].modules[0]).id;
                    self.call_keys.push(TaskKey::Response {
                        module: first.clone(),
                        count: links.iter().map(|l| l.modules.len()).sum(),
                        microbatch: mb,
                        direction: dir,
                    });
                    self.counts.calls += 1;
                    self.tasks[id].awaiting = Some(call_id);
                    self.send_request(rank, links, call_id, rank, id, mb, dir)?;
                    return Ok(());
                }
            }
        }
    }

    fn complete(&mut self, id: usize) -> Result<()> {
        self.tasks[id].done = true;
        let task = &self.tasks[id];
        let (rank, mb, dir) = (task.rank, task.microbatch, task.direction);
        match task.origin.clone() {
            Origin::Root => match dir {
                Direction::Forward => {
                    self.sched.forward_done[mb] = true;
                    self.fwd_finish[mb] = self.now;
                }
                Direction::Backward => self.bwd_done[mb] = true,
            },
            Origin::Link {
                call_id,
                reply_rank,
                reply_task,
                rest,
            } => {
                if rest.is_empty() {
                    let last = *self.program_tail_module(id);
                    let bytes = self.pipe.spec.module(last).activation_bytes;
                    let key = self.call_keys[call_id].clone();
                    let msg = Message {
                        seq: 0,
                        kind: MsgKind::Response,
                        call_id,
                        from: rank,
                        to: reply_rank,
                        microbatch: mb,
                        direction: dir,
                        links: Vec::new(),
                        reply_rank,
                        reply_task,
                        bytes,
                        arrival: 0.0,
                        key,
                        path: self.paths[last].clone(),
                        autocast: false,
                        grad_enabled: true,
                        checkpoint_enabled: self.pipe.recompute[last] > 0.0,
                        reservation: None,
                    };
                    self.send(msg, last)?;
                } else {
                    self.send_request(rank, rest, call_id, reply_rank, reply_task, mb, dir)?;
                }
            }
        }
        Ok(())
    }

    /// Last module the task's program names (the module whose output leaves
    /// with the response).
    fn program_tail_module(&self, id: usize) -> &usize {
        self.tasks[id]
            .program
            .iter()
            .rev()
            .find_map(|s| match s {
                Step::Compute { module } => Some(module),
                Step::Call { .. } => None,
            })
            .expect("every link program computes at least one module")
    }

    #[allow(clippy::too_many_arguments)]
    fn send_request(
        &mut self,
        from: usize,
        links: Vec<Link>,
        call_id: usize,
        reply_rank: usize,
        reply_task: usize,
        mb: usize,
        dir: Direction,
    ) -> Result<()> {
        let first = links[0].modules[0];
        let spec = self.pipe.spec;
        let msg = Message {
            seq: 0,
            kind: MsgKind::Request,
            call_id,
            from,
            to: links[0].rank,
            microbatch: mb,
            direction: dir,
            key: TaskKey::Request {
                module: spec.module(first).id.clone(),
                count: links[0].modules.len(),
                microbatch: mb,
                direction: dir,
            },
            links,
            reply_rank,
            reply_task,
            bytes: spec.module(first).activation_bytes,
            arrival: 0.0,
            path: self.paths[first].clone(),
            autocast: false,
            grad_enabled: true,
            checkpoint_enabled: self.pipe.recompute[first] > 0.0,
            reservation: None,
        };
        self.send(msg, first)
    }

    /// Puts `msg` on the wire. A hop to the sender's own rank (adjacent
    /// fast-mode links on one rank) is handed over immediately and is not
    /// counted as a message.
    fn send(&mut self, mut msg: Message, module: usize) -> Result<()> {
        self.seq += 1;
        msg.seq = self.seq;
        if msg.from == msg.to {
            msg.arrival = self.now;
            self.push(self.now, Ev::Arrive(Box::new(msg)));
            return Ok(());
        }
        let cluster = &self.pipe.cluster;
        let (src, dst) = (self.pipe.global_rank[msg.from], self.pipe.global_rank[msg.to]);
        let carries_tensor = msg.bytes > 0;
        let stub = TensorStub {
            id: 0,
            shape: vec![],
            bytes: msg.bytes,
            device: Device::Gpu,
        };
        let decision = route(&stub, src, dst, cluster, &mut self.buffers);
        let metadata = self.dynamic && carries_tensor;
        let mut t = cluster.transfer_time(msg.bytes, decision.link, !metadata);
        if decision.route == Route::D2d {
            t += cluster.d2d_handshake_s;
        }
        msg.reservation = decision.reservation;
        msg.arrival = self.now + t;

        if self.dynamic {
            match msg.kind {
                MsgKind::Request => self.counts.requests += 1,
                MsgKind::Response => self.counts.responses += 1,
            }
        }
        if metadata {
            self.counts.metadata_rounds += 1;
        }
        if carries_tensor {
            self.counts.tensor_hops += 1;
        }
        self.events.push(Event {
            rank: msg.from,
            microbatch: msg.microbatch,
            module: self.pipe.spec.module(module).id.clone(),
            direction: msg.direction,
            kind: EventKind::Comm,
            t_start: self.now,
            t_end: msg.arrival,
        });
        let at = msg.arrival;
        self.push(at, Ev::Arrive(Box::new(msg)));
        Ok(())
    }
}
