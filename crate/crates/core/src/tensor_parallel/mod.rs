//! Tensor parallelism over a simulated group of tp_ranks, in fp64, with
//! single-rank reference oracles.
//!
//! Every distributed operation takes one input per tp_rank and returns one
//! output per tp_rank. Each rank's output covers exactly the samples it
//! supplied, so the group behaves like data parallelism from the outside.

mod collectives;
mod layers;
mod linear;
mod ops;
pub mod oracle;
pub mod reference;
mod replace;

use ndarray::{Array, Dimension};

pub use collectives::{
    allgather, allreduce, concat, reduce_scatter, scatter_and_merge, split, sum_ascending,
    Collective, RankTensor,
};
pub use layers::{
    dist_layernorm_forward, shard_by_channel, unshard_by_channel, DistAttention, DistEmbedding,
    DistMlp, DistTransformer, DistTransformerLayer,
};
pub use linear::{reference_linear_backward, DistLinear, DistLinearParams, LinearGrads};
pub use ops::{affine, max_rel_err, random_array, random_matrix, random_vector, rel_err};
pub use reference::{
    Activation, AttentionParams, LayerNormParams, MlpParams, Optimize, TransformerLayerConfig,
    TransformerLayerParams,
};
pub use replace::{plan_replacement, Registry, Replacement};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};

/// A tensor-parallel group of `degree` ranks. `policy` controls whether the
/// per-rank local work runs on the thread pool; collectives always reduce in
/// ascending rank order, so results do not depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TpGroup {
    pub degree: usize,
    pub policy: ExecPolicy,
}

impl TpGroup {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Degree("tensor parallel degree must be at least 1".into()));
        }
        Ok(Self {
            degree,
            policy: ExecPolicy::Sequential,
        })
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Runs `f` for every tp_rank and collects the results in rank order.
    pub fn per_rank<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(usize) -> Result<R> + Sync + Send,
    {
        exec::map_range(self.policy, self.degree, f).into_iter().collect()
    }

    /// One input per rank, all of the same shape.
    pub fn check_inputs<A, D: Dimension>(&self, xs: &[Array<A, D>]) -> Result<()> {
        if xs.len() != self.degree {
            return Err(Error::Shape(format!(
                "expected one input per tp_rank ({}), got {}",
                self.degree,
                xs.len()
            )));
        }
        for (r, x) in xs.iter().enumerate().skip(1) {
            if x.shape() != xs[0].shape() {
                return Err(Error::Shape(format!(
                    "tp_rank {r} input has shape {:?}, tp_rank 0 has {:?}",
                    x.shape(),
                    xs[0].shape()
                )));
            }
        }
        Ok(())
    }
}
