//! Distributed transformer building blocks.
//!
//! Per-rank inputs and outputs are `[batch, seq, hidden]` tensors holding
//! that rank's own samples. Inside a memory-optimized layer, activations are
//! instead sharded by channel: rank j holds channel slice j of every sample
//! in the group, `[T * batch, seq, hidden / T]`.

use ndarray::{Array1, Array2, ArrayD};

use super::collectives::{allgather, split, Collective, RankTensor};
use super::ops::{affine, as_rows, col_block, from_rows, lead_shape, row_block, take_rows, vec_block};
use super::reference::{
    attention_core, check_causal, embedding_lookup, layernorm, moments_to_stats,
    AttentionParams, LayerNormParams, MlpParams, Optimize, TransformerLayerConfig,
    TransformerLayerParams,
};
use super::TpGroup;
use crate::error::{Error, Result};

/// Embedding table split across the embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DistEmbedding {
    pub shards: Vec<Array2<f64>>,
}

impl DistEmbedding {
    pub fn from_full(table: &Array2<f64>, degree: usize) -> Result<Self> {
        Ok(Self {
            shards: split(table, 1, degree)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.shards.first().map_or(0, |s| s.nrows())
    }

    /// Looks up per-rank index tensors (`[batch, ...]`).
    ///
    /// Indices are allgathered, each rank looks up its embedding-dim slice
    /// for every gathered index, and an all-to-all splitting by batch and
    /// merging by embedding dim hands each rank full-width rows for its own
    /// samples. With `prescaled_batch` every rank already holds the same
    /// indices, so the gather is skipped and the slices are allgathered along
    /// the embedding dim instead.
    pub fn forward(
        &self,
        group: &TpGroup,
        indices: &[ArrayD<usize>],
        prescaled_batch: bool,
    ) -> Result<Vec<RankTensor>> {
        group.check_inputs(indices)?;
        if self.shards.len() != group.degree {
            return Err(Error::Shape(format!(
                "{} embedding shards for a group of {}",
                self.shards.len(),
                group.degree
            )));
        }
        if indices[0].ndim() == 0 {
            return Err(Error::Shape("embedding indices need a batch dimension".into()));
        }
        let vocab = self.vocab();
        for (rank, idx) in indices.iter().enumerate() {
            if let Some((position, &index)) = idx.iter().enumerate().find(|(_, &i)| i >= vocab) {
                return Err(Error::IndexOutOfRange {
                    index,
                    rank,
                    position,
                    vocab,
                });
            }
        }
        if prescaled_batch {
            if indices.iter().any(|i| i != indices[0]) {
                return Err(Error::Shape(
                    "prescaled batch requires identical indices on every tp_rank".into(),
                ));
            }
            let local = group.per_rank(|j| embedding_lookup(&self.shards[j], &indices[j], j))?;
            let last = local[0].ndim() - 1;
            return (0..group.degree)
                .map(|_| super::collectives::concat(&local, last))
                .collect();
        }
        let gathered = allgather(indices, 0)?;
        let local = group.per_rank(|j| embedding_lookup(&self.shards[j], &gathered[j], j))?;
        let last = local[0].ndim() - 1;
        Collective::ScatterAndMerge {
            split_dim: 0,
            merge_dim: last,
        }
        .forward(&local)
    }
}

/// Layer norm over a channel-sharded activation. Every rank holds the same
/// rows and a contiguous slice of channels; slices may differ in width.
///
/// Each rank computes per-row `sum x` and `sum x^2` over its slice, the
/// moments are allreduced, and the normalization is applied to the local
/// slice with the matching slice of the affine parameters.
pub fn dist_layernorm_forward(
    group: &TpGroup,
    shards: &[RankTensor],
    p: &LayerNormParams,
) -> Result<Vec<RankTensor>> {
    if shards.len() != group.degree || shards.is_empty() {
        return Err(Error::Shape(format!(
            "expected {} shards, got {}",
            group.degree,
            shards.len()
        )));
    }
    let lead = lead_shape(&shards[0]).to_vec();
    if shards.iter().any(|s| lead_shape(s) != lead.as_slice()) {
        return Err(Error::Shape("layer norm shards disagree on their rows".into()));
    }
    let widths: Vec<usize> = shards.iter().map(|s| s.shape().last().copied().unwrap_or(0)).collect();
    let n: usize = widths.iter().sum();
    if n == 0 {
        return Err(Error::Shape("layer norm over zero channels".into()));
    }
    if p.gamma.len() != n || p.beta.len() != n {
        return Err(Error::Shape(format!(
            "layer norm over {n} channels with {} affine parameters",
            p.gamma.len()
        )));
    }
    let offsets: Vec<usize> = widths
        .iter()
        .scan(0, |acc, w| {
            let start = *acc;
            *acc += w;
            Some(start)
        })
        .collect();
    let rows = shards.iter().map(as_rows).collect::<Result<Vec<_>>>()?;
    let local_moments = group.per_rank(|j| {
        let r = &rows[j];
        let mut m = Array2::zeros((r.nrows(), 2));
        for (i, row) in r.rows().into_iter().enumerate() {
            m[[i, 0]] = row.iter().sum::<f64>();
            m[[i, 1]] = row.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(m.into_dyn())
    })?;
    let moments = Collective::FwdAllreduce.forward(&local_moments)?;
    group.per_rank(|j| {
        let m = &moments[j];
        let mut out = rows[j].clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (mean, var) = moments_to_stats(m[[i, 0]], m[[i, 1]], n);
            let inv = 1.0 / (var + p.eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                let g = offsets[j] + c;
                *v = (*v - mean) * inv * p.gamma[g] + p.beta[g];
            }
        }
        Ok(from_rows(out, &lead))
    })
}

/// Channel-sharded memory-mode activations from per-rank samples.
pub fn shard_by_channel(xs: &[RankTensor]) -> Result<Vec<RankTensor>> {
    let last = xs.first().map_or(0, |x| x.ndim().saturating_sub(1));
    Collective::ScatterAndMerge {
        split_dim: last,
        merge_dim: 0,
    }
    .forward(xs)
}

/// Inverse of [`shard_by_channel`].
pub fn unshard_by_channel(shards: &[RankTensor]) -> Result<Vec<RankTensor>> {
    let last = shards.first().map_or(0, |x| x.ndim().saturating_sub(1));
    Collective::ScatterAndMerge {
        split_dim: 0,
        merge_dim: last,
    }
    .forward(shards)
}

fn check_masks(xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<()> {
    if let Some(masks) = masks {
        if masks.len() != xs.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} ranks",
                masks.len(),
                xs.len()
            )));
        }
        for (r, (m, x)) in masks.iter().zip(xs).enumerate() {
            if x.ndim() != 3 || m.shape() != &x.shape()[..2] {
                return Err(Error::Shape(format!(
                    "tp_rank {r}: mask shape {:?} does not match input {:?}",
                    m.shape(),
                    x.shape()
                )));
            }
        }
    }
    Ok(())
}

fn check_hidden(xs: &[RankTensor], hidden: usize) -> Result<()> {
    for (r, x) in xs.iter().enumerate() {
        if x.ndim() != 3 || x.shape()[2] != hidden {
            return Err(Error::Shape(format!(
                "tp_rank {r}: expected [batch, seq, {hidden}], got {:?}",
                x.shape()
            )));
        }
    }
    Ok(())
}

/// Rank i's own rows out of a tensor covering the whole group's batch.
fn own_rows(full: &[RankTensor], batch: usize) -> Vec<RankTensor> {
    full.iter()
        .enumerate()
        .map(|(i, f)| take_rows(f, i * batch, batch))
        .collect()
}

#[derive(Clone, Debug)]
struct AttentionShard {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    bq: Option<Array1<f64>>,
    bk: Option<Array1<f64>>,
    bv: Option<Array1<f64>>,
    o: Array2<f64>,
    bo: Option<Array1<f64>>,
}

/// Self-attention distributed across a tensor-parallel group.
///
/// Speed mode splits the Q/K/V projections by output channel (whole heads
/// per rank) and the output projection by input channel, then sums the
/// partial outputs with a forward allreduce. Memory mode splits every
/// projection by input channel and follows each with a reduce-scatter, so no
/// activation is replicated.
#[derive(Clone, Debug)]
pub struct DistAttention {
    pub cfg: TransformerLayerConfig,
    pub group: TpGroup,
    shards: Vec<AttentionShard>,
}

impl DistAttention {
    pub fn new(group: TpGroup, cfg: &TransformerLayerConfig, p: &AttentionParams) -> Result<Self> {
        cfg.validate(group.degree)?;
        let t = group.degree;
        let h = cfg.hidden_size;
        for w in [&p.wq, &p.wk, &p.wv, &p.wo] {
            if w.dim() != (h, h) {
                return Err(Error::Shape(format!(
                    "attention weight has shape {:?}, expected [{h}, {h}]",
                    w.shape()
                )));
            }
        }
        let rank0 = |j: usize, b: &Array1<f64>| (j == 0).then(|| b.clone());
        let shards = (0..t)
            .map(|j| match cfg.optimize {
                Optimize::Speed => AttentionShard {
                    q: row_block(&p.wq, t, j),
                    k: row_block(&p.wk, t, j),
                    v: row_block(&p.wv, t, j),
                    bq: Some(vec_block(&p.bq, t, j)),
                    bk: Some(vec_block(&p.bk, t, j)),
                    bv: Some(vec_block(&p.bv, t, j)),
                    o: col_block(&p.wo, t, j),
                    bo: rank0(j, &p.bo),
                },
                Optimize::Memory => AttentionShard {
                    q: col_block(&p.wq, t, j),
                    k: col_block(&p.wk, t, j),
                    v: col_block(&p.wv, t, j),
                    bq: rank0(j, &p.bq),
                    bk: rank0(j, &p.bk),
                    bv: rank0(j, &p.bv),
                    o: col_block(&p.wo, t, j),
                    bo: rank0(j, &p.bo),
                },
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            group,
            shards,
        })
    }

    /// Per-rank `[batch, seq, hidden]` in and out. `masks` are per-rank
    /// `[batch, seq]` key masks.
    pub fn forward(&self, xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<Vec<RankTensor>> {
        self.group.check_inputs(xs)?;
        check_hidden(xs, self.cfg.hidden_size)?;
        check_masks(xs, masks)?;
        match self.cfg.optimize {
            Optimize::Speed => self.forward_speed(xs, masks),
            Optimize::Memory => {
                let shards = shard_by_channel(xs)?;
                let out = self.forward_sharded(&shards, masks)?;
                unshard_by_channel(&out)
            }
        }
    }

    fn forward_speed(&self, xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<Vec<RankTensor>> {
        let t = self.group.degree;
        let batch = xs[0].shape()[0];
        let causal = check_causal(&self.cfg, xs[0].shape()[1])?;
        let gathered = allgather(xs, 0)?;
        let gathered_masks = masks.map(|m| allgather(m, 0)).transpose()?;
        let heads = self.cfg.num_attention_heads / t;
        let partial = self.group.per_rank(|j| {
            let s = &self.shards[j];
            let x = &gathered[j];
            let q = affine(x, &s.q, s.bq.as_ref())?;
            let k = affine(x, &s.k, s.bk.as_ref())?;
            let v = affine(x, &s.v, s.bv.as_ref())?;
            let mask = gathered_masks.as_ref().map(|m| &m[j]);
            let ctx = attention_core(&q, &k, &v, heads, self.cfg.attention_head_size, mask, causal)?;
            affine(&ctx, &s.o, s.bo.as_ref())
        })?;
        let summed = Collective::FwdAllreduce.forward(&partial)?;
        Ok(own_rows(&summed, batch))
    }

    /// Channel-sharded in and out (`[T * batch, seq, hidden / T]`).
    ///
    /// The Q/K/V reduce-scatters run over the batch so that each rank gets
    /// full-width projections of its own samples and can attend over all
    /// heads locally; the context is then re-sharded by channel for the
    /// output projection.
    pub(crate) fn forward_sharded(
        &self,
        shards: &[RankTensor],
        masks: Option<&[RankTensor]>,
    ) -> Result<Vec<RankTensor>> {
        let t = self.group.degree;
        let causal = check_causal(&self.cfg, shards[0].shape()[1])?;
        let project = |pick: fn(&AttentionShard) -> (&Array2<f64>, Option<&Array1<f64>>)| {
            let partial = self.group.per_rank(|j| {
                let (w, b) = pick(&self.shards[j]);
                affine(&shards[j], w, b)
            })?;
            Collective::ReduceScatter { dim: 0 }.forward(&partial)
        };
        let q = project(|s| (&s.q, s.bq.as_ref()))?;
        let k = project(|s| (&s.k, s.bk.as_ref()))?;
        let v = project(|s| (&s.v, s.bv.as_ref()))?;
        let ctx = self.group.per_rank(|i| {
            let mask = masks.map(|m| &m[i]);
            attention_core(
                &q[i],
                &k[i],
                &v[i],
                self.cfg.num_attention_heads,
                self.cfg.attention_head_size,
                mask,
                causal,
            )
        })?;
        let ctx = shard_by_channel(&ctx)?;
        let partial = self.group.per_rank(|j| {
            let s = &self.shards[j];
            affine(&ctx[j], &s.o, s.bo.as_ref())
        })?;
        debug_assert_eq!(partial.len(), t);
        Collective::ReduceScatter { dim: 2 }.forward(&partial)
    }
}

#[derive(Clone, Debug)]
struct MlpShard {
    w1: Array2<f64>,
    b1: Option<Array1<f64>>,
    w2: Array2<f64>,
    b2: Option<Array1<f64>>,
}

/// Two-layer MLP distributed across a tensor-parallel group. Speed mode
/// splits the first linear layer by output channel and the second by input
/// channel; memory mode splits both by input channel with a reduce-scatter
/// after each.
#[derive(Clone, Debug)]
pub struct DistMlp {
    pub cfg: TransformerLayerConfig,
    pub group: TpGroup,
    shards: Vec<MlpShard>,
}

impl DistMlp {
    pub fn new(group: TpGroup, cfg: &TransformerLayerConfig, p: &MlpParams) -> Result<Self> {
        cfg.validate(group.degree)?;
        let (h, inter) = (cfg.hidden_size, cfg.intermediate_size);
        if p.w1.dim() != (inter, h) || p.w2.dim() != (h, inter) {
            return Err(Error::Shape(format!(
                "MLP weights have shapes {:?} and {:?}, expected [{inter}, {h}] and [{h}, {inter}]",
                p.w1.shape(),
                p.w2.shape()
            )));
        }
        let t = group.degree;
        let shards = (0..t)
            .map(|j| match cfg.optimize {
                Optimize::Speed => MlpShard {
                    w1: row_block(&p.w1, t, j),
                    b1: Some(vec_block(&p.b1, t, j)),
                    w2: col_block(&p.w2, t, j),
                    b2: (j == 0).then(|| p.b2.clone()),
                },
                Optimize::Memory => MlpShard {
                    w1: col_block(&p.w1, t, j),
                    b1: (j == 0).then(|| p.b1.clone()),
                    w2: col_block(&p.w2, t, j),
                    b2: (j == 0).then(|| p.b2.clone()),
                },
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            group,
            shards,
        })
    }

    pub fn forward(&self, xs: &[RankTensor]) -> Result<Vec<RankTensor>> {
        self.group.check_inputs(xs)?;
        check_hidden(xs, self.cfg.hidden_size)?;
        match self.cfg.optimize {
            Optimize::Speed => self.forward_speed(xs),
            Optimize::Memory => {
                let shards = shard_by_channel(xs)?;
                let out = self.forward_sharded(&shards)?;
                unshard_by_channel(&out)
            }
        }
    }

    fn forward_speed(&self, xs: &[RankTensor]) -> Result<Vec<RankTensor>> {
        let batch = xs[0].shape()[0];
        let gathered = allgather(xs, 0)?;
        let act = self.cfg.activation;
        let partial = self.group.per_rank(|j| {
            let s = &self.shards[j];
            let h = affine(&gathered[j], &s.w1, s.b1.as_ref())?.mapv(|v| act.apply(v));
            affine(&h, &s.w2, s.b2.as_ref())
        })?;
        let summed = Collective::FwdAllreduce.forward(&partial)?;
        Ok(own_rows(&summed, batch))
    }

    pub(crate) fn forward_sharded(&self, shards: &[RankTensor]) -> Result<Vec<RankTensor>> {
        let last = shards[0].ndim() - 1;
        let act = self.cfg.activation;
        let partial = self.group.per_rank(|j| {
            let s = &self.shards[j];
            affine(&shards[j], &s.w1, s.b1.as_ref())
        })?;
        let hidden = Collective::ReduceScatter { dim: last }.forward(&partial)?;
        let partial = self.group.per_rank(|j| {
            let s = &self.shards[j];
            let h = hidden[j].mapv(|v| act.apply(v));
            affine(&h, &s.w2, s.b2.as_ref())
        })?;
        Collective::ReduceScatter { dim: last }.forward(&partial)
    }
}

/// One transformer layer: attention, residual, MLP, residual, with layer
/// norms placed by the pre/post flags. In memory mode the layer norms run
/// distributed on channel shards; in speed mode they run replicated.
#[derive(Clone, Debug)]
pub struct DistTransformerLayer {
    pub cfg: TransformerLayerConfig,
    pub group: TpGroup,
    pub attention: DistAttention,
    pub mlp: DistMlp,
    params: TransformerLayerParams,
}

impl DistTransformerLayer {
    pub fn new(group: TpGroup, cfg: &TransformerLayerConfig, p: &TransformerLayerParams) -> Result<Self> {
        cfg.validate(group.degree)?;
        Ok(Self {
            cfg: cfg.clone(),
            group,
            attention: DistAttention::new(group, cfg, &p.attention)?,
            mlp: DistMlp::new(group, cfg, &p.mlp)?,
            params: p.clone(),
        })
    }

    pub fn forward(&self, xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<Vec<RankTensor>> {
        self.cfg.reject_cross_attention()?;
        self.group.check_inputs(xs)?;
        check_hidden(xs, self.cfg.hidden_size)?;
        check_masks(xs, masks)?;
        match self.cfg.optimize {
            Optimize::Speed => self.forward_speed(xs, masks),
            Optimize::Memory => {
                let shards = shard_by_channel(xs)?;
                let out = self.forward_sharded(&shards, masks)?;
                unshard_by_channel(&out)
            }
        }
    }

    fn forward_speed(&self, xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<Vec<RankTensor>> {
        let p = &self.params;
        let pre = |ln| self.cfg.pre_layernorm.then_some(ln);
        let post = |ln| self.cfg.post_layernorm.then_some(ln);
        // Layer norms and residuals are replicated work on each rank's own
        // samples; only the attention and MLP cross ranks.
        let per_rank_block = |xs: &[RankTensor],
                              pre_ln: Option<&LayerNormParams>,
                              post_ln: Option<&LayerNormParams>,
                              f: &dyn Fn(&[RankTensor]) -> Result<Vec<RankTensor>>|
         -> Result<Vec<RankTensor>> {
            let h = match pre_ln {
                Some(ln) => xs.iter().map(|x| layernorm(x, ln)).collect::<Result<Vec<_>>>()?,
                None => xs.to_vec(),
            };
            let out = f(&h)?;
            xs.iter()
                .zip(out)
                .map(|(x, o)| {
                    let y = x + &o;
                    match post_ln {
                        Some(ln) => layernorm(&y, ln),
                        None => Ok(y),
                    }
                })
                .collect()
        };
        let x = per_rank_block(xs, pre(&p.attn_pre_ln), post(&p.attn_post_ln), &|h| {
            self.attention.forward_speed(h, masks)
        })?;
        per_rank_block(&x, pre(&p.mlp_pre_ln), post(&p.mlp_post_ln), &|h| self.mlp.forward_speed(h))
    }

    pub(crate) fn forward_sharded(
        &self,
        shards: &[RankTensor],
        masks: Option<&[RankTensor]>,
    ) -> Result<Vec<RankTensor>> {
        let p = &self.params;
        let group = &self.group;
        let block = |xs: &[RankTensor],
                     pre_ln: Option<&LayerNormParams>,
                     post_ln: Option<&LayerNormParams>,
                     f: &dyn Fn(&[RankTensor]) -> Result<Vec<RankTensor>>|
         -> Result<Vec<RankTensor>> {
            let h = match pre_ln {
                Some(ln) => dist_layernorm_forward(group, xs, ln)?,
                None => xs.to_vec(),
            };
            let out = f(&h)?;
            let y: Vec<RankTensor> = xs.iter().zip(out).map(|(x, o)| x + &o).collect();
            match post_ln {
                Some(ln) => dist_layernorm_forward(group, &y, ln),
                None => Ok(y),
            }
        };
        let pre = |ln| self.cfg.pre_layernorm.then_some(ln);
        let post = |ln| self.cfg.post_layernorm.then_some(ln);
        let x = block(shards, pre(&p.attn_pre_ln), post(&p.attn_post_ln), &|h| {
            self.attention.forward_sharded(h, masks)
        })?;
        block(&x, pre(&p.mlp_pre_ln), post(&p.mlp_post_ln), &|h| self.mlp.forward_sharded(h))
    }
}

/// A stack of distributed transformer layers. Memory mode shards by channel
/// once on entry and restores per-rank samples once on exit.
#[derive(Clone, Debug)]
pub struct DistTransformer {
    pub layers: Vec<DistTransformerLayer>,
}

impl DistTransformer {
    pub fn new(group: TpGroup, cfg: &TransformerLayerConfig, params: &[TransformerLayerParams]) -> Result<Self> {
        Ok(Self {
            layers: params
                .iter()
                .map(|p| DistTransformerLayer::new(group, cfg, p))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, xs: &[RankTensor], masks: Option<&[RankTensor]>) -> Result<Vec<RankTensor>> {
        let Some(first) = self.layers.first() else {
            return Ok(xs.to_vec());
        };
        first.cfg.reject_cross_attention()?;
        first.group.check_inputs(xs)?;
        check_hidden(xs, first.cfg.hidden_size)?;
        check_masks(xs, masks)?;
        match first.cfg.optimize {
            Optimize::Speed => {
                let mut h = xs.to_vec();
                for layer in &self.layers {
                    h = layer.forward_speed(&h, masks)?;
                }
                Ok(h)
            }
            Optimize::Memory => {
                let mut h = shard_by_channel(xs)?;
                for layer in &self.layers {
                    h = layer.forward_sharded(&h, masks)?;
                }
                unshard_by_channel(&h)
            }
        }
    }
}
