//! Run configuration shared by the command-line front end.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{CheckpointSpec, MemoryConfig};
use crate::pipeline::{SchedulePolicy, SimConfig};
use crate::tensor_parallel::Optimize;
use crate::topology::{build_topology, Topology};

/// Settings for a partition or simulation run.
///
/// Field names follow the model-parallel library's configuration keys where
/// one exists; the rest are simulator knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline_parallel_degree: usize,
    pub tensor_parallel_degree: usize,
    pub microbatches: usize,
    pub pipeline: SchedulePolicy,
    pub placement_strategy: String,
    pub optimize: Optimize,
    pub static_mode: bool,
    pub fast_mode: bool,
    pub shard_optimizer_state: bool,
    pub offload_activations: bool,
    pub activation_loading_horizon: usize,
    pub fp16_params: bool,
    #[serde(rename = "_prescaled_batch")]
    pub prescaled_batch: bool,
    pub alpha: f64,
    pub bwd_factor: f64,

    /// Total ranks; defaults to `pipeline_parallel_degree * tensor_parallel_degree`.
    pub world_size: Option<usize>,
    pub steps: usize,
    pub record_steps: usize,
    pub jitter: f64,
    pub seed: u64,
    /// Module ids marked for tensor parallelism (the mark covers the subtree).
    pub tensor_parallel: Vec<String>,
    pub checkpoints: Vec<CheckpointSpec>,
    pub optimizer_bytes_per_param: f64,
    pub grad_bytes_per_param: f64,
    pub recompute_factor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let mem = MemoryConfig::default();
        Self {
            pipeline_parallel_degree: 1,
            tensor_parallel_degree: 1,
            microbatches: 1,
            pipeline: SchedulePolicy::Interleaved,
            placement_strategy: "cluster".into(),
            optimize: Optimize::default(),
            static_mode: false,
            fast_mode: false,
            shard_optimizer_state: false,
            offload_activations: false,
            activation_loading_horizon: mem.activation_loading_horizon,
            fp16_params: false,
            prescaled_batch: false,
            alpha: 0.2,
            bwd_factor: sim.bwd_factor,
            world_size: None,
            steps: sim.steps,
            record_steps: sim.record_steps,
            jitter: sim.jitter,
            seed: sim.seed,
            tensor_parallel: Vec::new(),
            checkpoints: Vec::new(),
            optimizer_bytes_per_param: mem.optimizer_bytes_per_param,
            grad_bytes_per_param: mem.grad_bytes_per_param,
            recompute_factor: mem.recompute_factor,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pipeline_parallel_degree == 0 {
            return Err(Error::PipelineDegree(0));
        }
        if self.tensor_parallel_degree == 0 {
            return Err(Error::Degree("tensor_parallel_degree must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Alpha(self.alpha));
        }
        self.sim_config().validate()?;
        self.memory_config().validate()?;
        Ok(())
    }

    pub fn world_size(&self) -> usize {
        self.world_size
            .unwrap_or(self.pipeline_parallel_degree * self.tensor_parallel_degree)
    }

    pub fn topology(&self) -> Result<Topology> {
        build_topology(
            self.world_size(),
            self.pipeline_parallel_degree,
            self.tensor_parallel_degree,
            &self.placement_strategy,
            self.prescaled_batch,
        )
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            microbatches: self.microbatches,
            policy: self.pipeline,
            static_mode: self.static_mode,
            fast_mode: self.fast_mode,
            bwd_factor: self.bwd_factor,
            record_steps: self.record_steps,
            steps: self.steps,
            jitter: self.jitter,
            seed: self.seed,
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            optimizer_bytes_per_param: self.optimizer_bytes_per_param,
            grad_bytes_per_param: self.grad_bytes_per_param,
            fp16_params: self.fp16_params,
            shard_optimizer_state: self.shard_optimizer_state,
            offload_activations: self.offload_activations,
            activation_loading_horizon: self.activation_loading_horizon,
            microbatches: self.microbatches,
            checkpoints: self.checkpoints.clone(),
            recompute_factor: self.recompute_factor,
            optimize: self.optimize,
        }
    }

    pub fn tensor_parallel_marks(&self) -> BTreeSet<String> {
        self.tensor_parallel.iter().cloned().collect()
    }
}
