//! Randomized comparison of every distributed module against its
//! single-rank reference.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collectives::{allreduce, reduce_scatter, Collective, RankTensor};
use super::ops::{max_rel_err, random_array, random_matrix, random_vector, rel_err};
use super::reference::{self, *};
use super::*;
use crate::error::Result;
use crate::exec::{self, ExecPolicy};

/// Fault injected into the suite to prove it can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The last tp_rank of every distributed linear layer gets a corrupted
    /// weight shard.
    WrongShard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub degrees: Vec<usize>,
    /// Random instances per (check, degree).
    pub cases: usize,
    /// Random instances per degree for the finite-difference check.
    pub grad_cases: usize,
    pub seed: u64,
    pub max_batch: usize,
    pub max_seq: usize,
    pub max_head_size: usize,
    /// Heads per rank; the head count is a multiple of the degree.
    pub max_heads_per_rank: usize,
    /// Intermediate channels per rank, in units of the hidden size.
    pub max_ffn_multiple: usize,
    pub fault: Option<Fault>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            degrees: vec![1, 2, 4],
            cases: 50,
            grad_cases: 20,
            seed: 0,
            max_batch: 3,
            max_seq: 5,
            max_head_size: 4,
            max_heads_per_rank: 2,
            max_ffn_multiple: 4,
            fault: None,
        }
    }
}

/// Tolerances, relative to the largest reference magnitude.
pub mod tol {
    pub const COLLECTIVE: f64 = 0.0;
    pub const LINEAR: f64 = 1e-12;
    pub const EMBEDDING: f64 = 1e-12;
    pub const LAYERNORM: f64 = 1e-12;
    pub const ATTENTION: f64 = 1e-10;
    pub const MLP: f64 = 1e-10;
    pub const LAYER: f64 = 1e-10;
    pub const MODE_AGREEMENT: f64 = 1e-10;
    pub const GRAD_REFERENCE: f64 = 1e-10;
    pub const GRAD_FD: f64 = 1e-6;
    pub const FD_STEP: f64 = 1e-5;
}

/// Worst case seen for one check at one degree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    #[serde(rename = "T")]
    pub t: usize,
    /// Per-rank input shape of the worst case.
    pub shape: Vec<usize>,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl OracleReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

struct Sample {
    op: &'static str,
    shape: Vec<usize>,
    err: f64,
    tol: f64,
}

fn sample(op: &'static str, shape: &[usize], err: f64, tol: f64) -> Sample {
    Sample {
        op,
        shape: shape.to_vec(),
        err,
        tol,
    }
}

fn case_rng(seed: u64, salt: u64, t: usize, case: usize) -> ChaCha8Rng {
    let mut z = seed
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((t as u64) << 32)
        ^ case as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Runs the whole suite. Cases run under `policy`; the report is identical
/// either way.
pub fn run_suite(cfg: &OracleConfig, policy: ExecPolicy) -> Result<OracleReport> {
    let mut checks = Vec::new();
    for &t in &cfg.degrees {
        let group = TpGroup::new(t)?;
        let per_case = exec::map_range(policy, cfg.cases, |case| {
            let mut rng = case_rng(cfg.seed, 1, t, case);
            forward_case(cfg, group, &mut rng)
        });
        let per_grad = exec::map_range(policy, cfg.grad_cases, |case| {
            let mut rng = case_rng(cfg.seed, 2, t, case);
            gradient_case(cfg, group, &mut rng)
        });
        let mut worst: BTreeMap<&'static str, (Sample, usize)> = BTreeMap::new();
        let mut order: Vec<&'static str> = Vec::new();
        for samples in per_case.into_iter().chain(per_grad) {
            for s in samples? {
                match worst.get_mut(s.op) {
                    None => {
                        order.push(s.op);
                        worst.insert(s.op, (s, 1));
                    }
                    Some((w, n)) => {
                        *n += 1;
                        if !(s.err <= w.err) {
                            *w = s;
                        }
                    }
                }
            }
        }
        for op in order {
            let (s, n) = worst.remove(op).expect("recorded op");
            checks.push(CheckResult {
                op: op.to_string(),
                t,
                shape: s.shape,
                cases: n,
                max_rel_err: s.err,
                tol: s.tol,
                pass: s.err <= s.tol,
            });
        }
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(OracleReport { checks, pass })
}

fn corrupt(params: &mut DistLinearParams, fault: Option<Fault>) {
    if fault == Some(Fault::WrongShard) {
        if let Some(last) = params.shards.last_mut() {
            last.mapv_inplace(|w| w + 1e-3);
        }
    }
}

fn random_layer_cfg<R: Rng>(cfg: &OracleConfig, t: usize, rng: &mut R) -> TransformerLayerConfig {
    let heads = t * rng.random_range(1..=cfg.max_heads_per_rank.max(1));
    let head_size = rng.random_range(1..=cfg.max_head_size.max(1));
    let hidden = heads * head_size;
    let intermediate = t * rng.random_range(1..=(cfg.max_ffn_multiple.max(1) * hidden).div_ceil(t));
    TransformerLayerConfig {
        num_attention_heads: heads,
        attention_head_size: head_size,
        hidden_size: hidden,
        intermediate_size: intermediate,
        activation: if rng.random_bool(0.5) {
            Activation::Gelu
        } else {
            Activation::Relu
        },
        layernorm_epsilon: 1e-5,
        causal_mask_size: rng.random_bool(0.5).then_some(cfg.max_seq.max(1)),
        add_cross_attention: false,
        pre_layernorm: rng.random_bool(0.5),
        post_layernorm: rng.random_bool(0.5),
        optimize: Optimize::Speed,
    }
}

fn forward_case<R: Rng>(cfg: &OracleConfig, group: TpGroup, rng: &mut R) -> Result<Vec<Sample>> {
    let t = group.degree;
    let mut out = Vec::new();
    let batch = rng.random_range(1..=cfg.max_batch.max(1));
    let seq = rng.random_range(1..=cfg.max_seq.max(1));

    // Collective algebra.
    let cols = rng.random_range(1..=4);
    let xs: Vec<RankTensor> = (0..t).map(|_| random_array(rng, &[t * batch, cols])).collect();
    let rs_ag = Collective::Allgather { dim: 0 }.forward(&reduce_scatter(&xs, 0)?)?;
    out.push(sample(
        "reduce_scatter_then_allgather",
        xs[0].shape(),
        max_rel_err(&rs_ag, &allreduce(&xs)?),
        tol::COLLECTIVE,
    ));
    let cube: Vec<RankTensor> = (0..t)
        .map(|_| random_array(rng, &[t * batch, seq, t * cols]))
        .collect();
    let there = Collective::ScatterAndMerge {
        split_dim: 2,
        merge_dim: 0,
    };
    let back = there.dual().forward(&there.forward(&cube)?)?;
    out.push(sample(
        "scatter_and_merge_roundtrip",
        cube[0].shape(),
        max_rel_err(&back, &cube),
        tol::COLLECTIVE,
    ));

    // Linear.
    let in_dim = t * rng.random_range(1..=4);
    let out_dim = rng.random_range(1..=6);
    let w = random_matrix(rng, out_dim, in_dim);
    let b = random_vector(rng, out_dim);
    let xs: Vec<RankTensor> = (0..t).map(|_| random_array(rng, &[batch, seq, in_dim])).collect();
    let mut params = DistLinearParams::from_full(&w, Some(&b), t)?;
    corrupt(&mut params, cfg.fault);
    let mut layer = DistLinear::new(group, params)?;
    let ys = layer.forward(&xs)?;
    let refs = xs
        .iter()
        .map(|x| affine(x, &w, Some(&b)))
        .collect::<Result<Vec<_>>>()?;
    out.push(sample("dist_linear", xs[0].shape(), max_rel_err(&ys, &refs), tol::LINEAR));

    // Embedding.
    let vocab = rng.random_range(2..=10);
    let dim = t * rng.random_range(1..=4);
    let table = random_matrix(rng, vocab, dim);
    let emb = DistEmbedding::from_full(&table, t)?;
    let indices: Vec<ArrayD<usize>> = (0..t)
        .map(|_| ArrayD::from_shape_simple_fn(IxDyn(&[batch, seq]), || rng.random_range(0..vocab)))
        .collect();
    let ys = emb.forward(&group, &indices, false)?;
    let refs = indices
        .iter()
        .enumerate()
        .map(|(r, i)| reference::embedding_lookup(&table, i, r))
        .collect::<Result<Vec<_>>>()?;
    out.push(sample("dist_embedding", &[batch, seq, dim], max_rel_err(&ys, &refs), tol::EMBEDDING));
    let shared = vec![indices[0].clone(); t];
    let ys = emb.forward(&group, &shared, true)?;
    let refs = vec![refs[0].clone(); t];
    out.push(sample(
        "dist_embedding_prescaled",
        &[batch, seq, dim],
        max_rel_err(&ys, &refs),
        tol::EMBEDDING,
    ));

    // Layer norm on channel shards of one activation.
    let width = t * rng.random_range(1..=4);
    let x = random_array(rng, &[batch, seq, width]).mapv(|v| 3.0 * v + 0.5);
    let ln = LayerNormParams::random(rng, width, 1e-5);
    let shards = split(&x, 2, t)?;
    let ys = dist_layernorm_forward(&group, &shards, &ln)?;
    let full = concat(&ys, 2)?;
    out.push(sample(
        "dist_layernorm",
        x.shape(),
        rel_err(&full, &reference::layernorm(&x, &ln)?),
        tol::LAYERNORM,
    ));

    // Attention, MLP and full layer in both modes.
    let lcfg = random_layer_cfg(cfg, t, rng);
    let h = lcfg.hidden_size;
    let params = TransformerLayerParams::random(rng, &lcfg);
    let xs: Vec<RankTensor> = (0..t).map(|_| random_array(rng, &[batch, seq, h])).collect();
    let masks: Vec<RankTensor> = (0..t)
        .map(|_| ArrayD::from_shape_simple_fn(IxDyn(&[batch, seq]), || f64::from(u8::from(rng.random_bool(0.8)))))
        .collect();
    let shape = xs[0].shape().to_vec();
    let speed = lcfg.clone();
    let memory = TransformerLayerConfig {
        optimize: Optimize::Memory,
        ..lcfg.clone()
    };

    let ref_attn = xs
        .iter()
        .zip(&masks)
        .map(|(x, m)| reference::attention(x, &params.attention, &lcfg, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let a_speed = DistAttention::new(group, &speed, &params.attention)?.forward(&xs, Some(&masks))?;
    let a_mem = DistAttention::new(group, &memory, &params.attention)?.forward(&xs, Some(&masks))?;
    out.push(sample("attention_speed", &shape, max_rel_err(&a_speed, &ref_attn), tol::ATTENTION));
    out.push(sample("attention_memory", &shape, max_rel_err(&a_mem, &ref_attn), tol::ATTENTION));
    out.push(sample(
        "attention_speed_vs_memory",
        &shape,
        max_rel_err(&a_speed, &a_mem),
        tol::MODE_AGREEMENT,
    ));

    let ref_mlp = xs
        .iter()
        .map(|x| reference::mlp(x, &params.mlp, &lcfg))
        .collect::<Result<Vec<_>>>()?;
    let m_speed = DistMlp::new(group, &speed, &params.mlp)?.forward(&xs)?;
    let m_mem = DistMlp::new(group, &memory, &params.mlp)?.forward(&xs)?;
    out.push(sample("mlp_speed", &shape, max_rel_err(&m_speed, &ref_mlp), tol::MLP));
    out.push(sample("mlp_memory", &shape, max_rel_err(&m_mem, &ref_mlp), tol::MLP));
    out.push(sample("mlp_speed_vs_memory", &shape, max_rel_err(&m_speed, &m_mem), tol::MODE_AGREEMENT));

    let ref_layer = xs
        .iter()
        .zip(&masks)
        .map(|(x, m)| reference::transformer_layer(x, &params, &lcfg, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let l_speed = DistTransformerLayer::new(group, &speed, &params)?.forward(&xs, Some(&masks))?;
    let l_mem = DistTransformerLayer::new(group, &memory, &params)?.forward(&xs, Some(&masks))?;
    out.push(sample("transformer_layer_speed", &shape, max_rel_err(&l_speed, &ref_layer), tol::LAYER));
    out.push(sample("transformer_layer_memory", &shape, max_rel_err(&l_mem, &ref_layer), tol::LAYER));
    out.push(sample(
        "transformer_layer_speed_vs_memory",
        &shape,
        max_rel_err(&l_speed, &l_mem),
        tol::MODE_AGREEMENT,
    ));
    Ok(out)
}

/// Scalar loss `sum_i <c_i, y_i>` of a distributed linear layer.
fn linear_loss(
    group: TpGroup,
    w: &Array2<f64>,
    b: &ndarray::Array1<f64>,
    xs: &[RankTensor],
    cs: &[RankTensor],
    fault: Option<Fault>,
) -> Result<f64> {
    let mut params = DistLinearParams::from_full(w, Some(b), group.degree)?;
    corrupt(&mut params, fault);
    let ys = DistLinear::new(group, params)?.forward(xs)?;
    Ok(ys.iter().zip(cs).map(|(y, c)| (y * c).sum()).sum())
}

fn gradient_case<R: Rng>(cfg: &OracleConfig, group: TpGroup, rng: &mut R) -> Result<Vec<Sample>> {
    let t = group.degree;
    let batch = rng.random_range(1..=cfg.max_batch.max(1));
    let in_dim = t * rng.random_range(1..=3);
    let out_dim = rng.random_range(1..=4);
    let w = random_matrix(rng, out_dim, in_dim);
    let b = random_vector(rng, out_dim);
    let xs: Vec<RankTensor> = (0..t).map(|_| random_array(rng, &[batch, in_dim])).collect();
    let cs: Vec<RankTensor> = (0..t).map(|_| random_array(rng, &[batch, out_dim])).collect();
    let shape = [batch, in_dim, out_dim];

    let mut params = DistLinearParams::from_full(&w, Some(&b), t)?;
    corrupt(&mut params, cfg.fault);
    let mut layer = DistLinear::new(group, params)?;
    layer.forward(&xs)?;
    let grads = layer.backward(&cs)?;
    let dw = concat(&grads.weight_shards, 1)?.into_dyn();
    let db = grads.bias.clone().expect("bias present").into_dyn();

    // Against the single-rank reference backward.
    let mut ref_dw = Array2::zeros((out_dim, in_dim));
    let mut ref_db = ndarray::Array1::zeros(out_dim);
    let mut ref_dx = Vec::new();
    for (x, c) in xs.iter().zip(&cs) {
        let (dx, dw_i, db_i) = reference_linear_backward(x, &w, c)?;
        ref_dw += &dw_i;
        ref_db += &db_i;
        ref_dx.push(dx);
    }
    let reference_err = rel_err(&dw, &ref_dw.clone().into_dyn())
        .max(rel_err(&db, &ref_db.into_dyn()))
        .max(max_rel_err(&grads.inputs, &ref_dx));

    // Central differences of the distributed forward.
    let h = tol::FD_STEP;
    let loss = |w: &Array2<f64>, b: &ndarray::Array1<f64>, xs: &[RankTensor]| {
        linear_loss(group, w, b, xs, &cs, cfg.fault)
    };
    let mut fd_w = Array2::zeros(w.dim());
    for idx in ndarray::indices(w.dim()) {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[idx] += h;
        wm[idx] -= h;
        fd_w[idx] = (loss(&wp, &b, &xs)? - loss(&wm, &b, &xs)?) / (2.0 * h);
    }
    let mut fd_b = ndarray::Array1::zeros(out_dim);
    for k in 0..out_dim {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp[k] += h;
        bm[k] -= h;
        fd_b[k] = (loss(&w, &bp, &xs)? - loss(&w, &bm, &xs)?) / (2.0 * h);
    }
    let mut fd_x = Vec::new();
    for r in 0..t {
        let mut g = ArrayD::zeros(xs[r].raw_dim());
        for idx in 0..xs[r].len() {
            let (mut xp, mut xm) = (xs.to_vec(), xs.to_vec());
            xp[r].as_slice_mut().expect("contiguous")[idx] += h;
            xm[r].as_slice_mut().expect("contiguous")[idx] -= h;
            g.as_slice_mut().expect("contiguous")[idx] =
                (loss(&w, &b, &xp)? - loss(&w, &b, &xm)?) / (2.0 * h);
        }
        fd_x.push(g);
    }
    let fd_err = rel_err(&dw, &fd_w.into_dyn())
        .max(rel_err(&db, &fd_b.into_dyn()))
        .max(max_rel_err(&grads.inputs, &fd_x));

    Ok(vec![
        sample("dist_linear_grad_reference", &shape, reference_err, tol::GRAD_REFERENCE),
        sample("dist_linear_grad_fd", &shape, fd_err, tol::GRAD_FD),
    ])
}
