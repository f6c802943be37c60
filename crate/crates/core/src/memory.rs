//! Analytical per-rank memory accounting.
//!
//! Parameter sizes in a model description are read as fp32 storage, so a
//! parameter of `bytes` bytes has `bytes / 4` elements. Every other figure
//! is derived from that element count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_graph::ModelSpec;
use crate::tensor_parallel::Optimize;
use crate::topology::Topology;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CheckpointStrategy {
    /// One checkpoint per module.
    #[default]
    Each,
    /// Maximal runs of consecutive modules on the same partition.
    Contiguous,
    /// Blocks of up to `k` consecutive modules, broken at partition changes.
    Group(usize),
}

impl FromStr for CheckpointStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "each" => Ok(Self::Each),
            "contiguous" => Ok(Self::Contiguous),
            _ => match s.strip_prefix("group_").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 2 => Ok(Self::Group(k)),
                _ => Err(Error::CheckpointStrategy(s.to_string())),
            },
        }
    }
}

impl fmt::Display for CheckpointStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Each => f.write_str("each"),
            Self::Contiguous => f.write_str("contiguous"),
            Self::Group(k) => write!(f, "group_{k}"),
        }
    }
}

impl Serialize for CheckpointStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CheckpointStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Groups an ordered sequence of `(module, partition)` pairs into
/// checkpoint groups. No group spans two partitions.
pub fn checkpoint_grouping<T: Clone>(
    sequence: &[(T, usize)],
    strategy: CheckpointStrategy,
) -> Result<Vec<Vec<T>>> {
    if sequence.is_empty() {
        return Err(Error::MemoryConfig("checkpoint sequence is empty".into()));
    }
    let limit = match strategy {
        CheckpointStrategy::Each => 1,
        CheckpointStrategy::Contiguous => usize::MAX,
        CheckpointStrategy::Group(k) => k,
    };
    let mut groups: Vec<Vec<T>> = Vec::new();
    let mut current_partition = None;
    for (item, partition) in sequence {
        match groups.last_mut() {
            Some(g) if current_partition == Some(*partition) && g.len() < limit => {
                g.push(item.clone())
            }
            _ => groups.push(vec![item.clone()]),
        }
        current_partition = Some(*partition);
    }
    Ok(groups)
}

/// Checkpointing applied to one module. For a sequential module the
/// children are grouped by `strategy`; any other module is one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSpec {
    pub module: String,
    #[serde(default)]
    pub strategy: CheckpointStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub optimizer_bytes_per_param: f64,
    pub grad_bytes_per_param: f64,
    pub fp16_params: bool,
    pub shard_optimizer_state: bool,
    pub offload_activations: bool,
    pub activation_loading_horizon: usize,
    pub microbatches: usize,
    pub checkpoints: Vec<CheckpointSpec>,
    /// Multiplier on recomputed forward time.
    pub recompute_factor: f64,
    /// In memory mode the activations of tensor-parallel modules are
    /// sharded over the TP group; in speed mode every rank holds a copy.
    pub optimize: Optimize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            optimizer_bytes_per_param: 8.0,
            grad_bytes_per_param: 4.0,
            fp16_params: false,
            shard_optimizer_state: false,
            offload_activations: false,
            activation_loading_horizon: 4,
            microbatches: 1,
            checkpoints: Vec::new(),
            recompute_factor: 1.0,
            optimize: Optimize::Memory,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MemoryConfig(m));
        if self.activation_loading_horizon == 0 {
            return bad("activation_loading_horizon must be at least 1".into());
        }
        if self.microbatches == 0 {
            return bad("microbatches must be at least 1".into());
        }
        for (name, v) in [
            ("optimizer_bytes_per_param", self.optimizer_bytes_per_param),
            ("grad_bytes_per_param", self.grad_bytes_per_param),
            ("recompute_factor", self.recompute_factor),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn param_bytes_per_param(&self) -> f64 {
        if self.fp16_params {
            2.0
        } else {
            4.0
        }
    }

    /// Microbatches whose checkpointed activations sit in device memory.
    pub fn resident_microbatches(&self) -> usize {
        if self.offload_activations {
            self.microbatches.min(self.activation_loading_horizon)
        } else {
            self.microbatches
        }
    }
}

/// Where checkpointing leaves each module.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CheckpointPlan {
    /// Groups of module indices, in execution order.
    pub groups: Vec<Vec<usize>>,
    /// Modules whose activations are recomputed instead of stored.
    pub recomputed: BTreeSet<usize>,
}

impl CheckpointPlan {
    pub fn build(spec: &ModelSpec, owner: &[usize], checkpoints: &[CheckpointSpec]) -> Result<Self> {
        let mut plan = CheckpointPlan::default();
        for c in checkpoints {
            let m = spec
                .index_of(&c.module)
                .ok_or_else(|| Error::MemoryConfig(format!("cannot checkpoint unknown module `{}`", c.module)))?;
            let desc = spec.module(m);
            let groups = if desc.is_sequential && !spec.children(m).is_empty() {
                let mut children = spec.children(m).to_vec();
                children.sort_by_key(|&c| spec.order_key(c));
                let seq: Vec<(usize, usize)> = children.iter().map(|&c| (c, owner[c])).collect();
                checkpoint_grouping(&seq, c.strategy)?
            } else {
                vec![vec![m]]
            };
            for g in &groups {
                for &member in g {
                    plan.recomputed.extend(spec.subtree(member));
                }
            }
            plan.groups.extend(groups);
        }
        Ok(plan)
    }

    /// Per-module recompute time added to backward.
    pub fn recompute_times(&self, spec: &ModelSpec, factor: f64) -> Vec<f64> {
        (0..spec.len())
            .map(|m| {
                if self.recomputed.contains(&m) {
                    spec.module(m).fwd_time * factor
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankMemory {
    pub pp_rank: usize,
    pub tp_rank: usize,
    pub rdp_rank: usize,
    pub param_bytes: f64,
    /// Part of `param_bytes` belonging to tensor-parallel modules.
    pub distributed_param_bytes: f64,
    pub grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    /// Part of `activation_bytes` held at checkpoint boundaries.
    pub checkpoint_activation_bytes: f64,
}

impl RankMemory {
    pub fn total(&self) -> f64 {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub ranks: BTreeMap<usize, RankMemory>,
}

impl MemoryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ranks).expect("report serializes")
    }
}

/// Per-rank memory under the given owners (module -> pp partition),
/// topology, tensor-parallel modules (by id) and configuration.
pub fn memory_report(
    spec: &ModelSpec,
    owner: &[usize],
    topo: &Topology,
    tp_modules: &BTreeSet<String>,
    cfg: &MemoryConfig,
) -> Result<MemoryReport> {
    cfg.validate()?;
    if owner.len() != spec.len() {
        return Err(Error::MemoryConfig(format!(
            "{} owners for {} modules",
            owner.len(),
            spec.len()
        )));
    }
    if let Some(&p) = owner.iter().find(|&&p| p >= topo.pp_degree) {
        return Err(Error::MemoryConfig(format!(
            "partition {p} does not exist with pp_degree {}",
            topo.pp_degree
        )));
    }
    let t = topo.tp_degree as f64;

    let mut distributed = BTreeSet::new();
    for id in tp_modules {
        let m = spec
            .index_of(id)
            .ok_or_else(|| Error::MemoryConfig(format!("unknown tensor-parallel module `{id}`")))?;
        distributed.extend(spec.subtree(m));
    }

    // Elements per partition, split into replicated and tensor-parallel. A
    // parameter lives with the first module that uses it.
    let mut replicated = vec![0.0; topo.pp_degree];
    let mut sharded = vec![0.0; topo.pp_degree];
    let mut placed = vec![false; spec.params().len()];
    for m in 0..spec.len() {
        for &p in spec.params_of(m) {
            if std::mem::replace(&mut placed[p], true) {
                continue;
            }
            let elements = spec.params()[p].bytes as f64 / 4.0;
            if distributed.contains(&m) {
                sharded[owner[m]] += elements;
            } else {
                replicated[owner[m]] += elements;
            }
        }
    }

    let activation = |m: usize| {
        let bytes = spec.module(m).activation_bytes as f64;
        if cfg.optimize == Optimize::Memory && distributed.contains(&m) {
            bytes / t
        } else {
            bytes
        }
    };
    let plan = CheckpointPlan::build(spec, owner, &cfg.checkpoints)?;
    let mut checkpoint_acts = vec![0.0; topo.pp_degree];
    let mut other_acts = vec![0.0; topo.pp_degree];
    for g in &plan.groups {
        let last = *g.last().expect("groups are nonempty");
        checkpoint_acts[owner[last]] += activation(last);
    }
    for m in 0..spec.len() {
        if !plan.recomputed.contains(&m) {
            other_acts[owner[m]] += activation(m);
        }
    }

    let optimizer_divisor = if cfg.shard_optimizer_state {
        topo.rdp_degree as f64
    } else {
        1.0
    };
    let resident = cfg.resident_microbatches() as f64;
    let m = cfg.microbatches as f64;
    let ranks = topo
        .ranks
        .iter()
        .map(|c| {
            let p = c.pp_rank;
            let elements = replicated[p] + sharded[p] / t;
            let checkpoint = checkpoint_acts[p] * resident;
            let mem = RankMemory {
                pp_rank: p,
                tp_rank: c.tp_rank,
                rdp_rank: c.rdp_rank,
                param_bytes: elements * cfg.param_bytes_per_param(),
                distributed_param_bytes: sharded[p] / t * cfg.param_bytes_per_param(),
                grad_bytes: elements * cfg.grad_bytes_per_param,
                optimizer_bytes: elements * cfg.optimizer_bytes_per_param / optimizer_divisor,
                activation_bytes: checkpoint + other_acts[p] * m,
                checkpoint_activation_bytes: checkpoint,
            };
            (c.rank, mem)
        })
        .collect();
    Ok(MemoryReport { ranks })
}
