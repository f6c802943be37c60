//! Single-rank reference implementations used as oracles for the
//! distributed modules.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{affine, as_rows, from_rows, lead_shape, random_matrix, random_vector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    /// GELU uses the tanh approximation.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// Distribution mechanism for transformer layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimize {
    Speed,
    #[default]
    Memory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerLayerConfig {
    pub num_attention_heads: usize,
    pub attention_head_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub activation: Activation,
    pub layernorm_epsilon: f64,
    /// Maximum sequence length of a causal model; `None` means bidirectional.
    pub causal_mask_size: Option<usize>,
    pub add_cross_attention: bool,
    pub pre_layernorm: bool,
    pub post_layernorm: bool,
    pub optimize: Optimize,
}

impl Default for TransformerLayerConfig {
    fn default() -> Self {
        Self {
            num_attention_heads: 4,
            attention_head_size: 8,
            hidden_size: 32,
            intermediate_size: 128,
            activation: Activation::Gelu,
            layernorm_epsilon: 1e-5,
            causal_mask_size: None,
            add_cross_attention: false,
            pre_layernorm: false,
            post_layernorm: true,
            optimize: Optimize::Memory,
        }
    }
}

impl TransformerLayerConfig {
    /// Checks the shape rules for running at tensor-parallel degree `t`.
    pub fn validate(&self, t: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::TransformerConfig(msg));
        if t == 0 {
            return bad("tensor parallel degree must be at least 1".into());
        }
        if self.num_attention_heads == 0 || self.attention_head_size == 0 || self.intermediate_size == 0 {
            return bad("heads, head size and intermediate size must be positive".into());
        }
        if self.hidden_size != self.num_attention_heads * self.attention_head_size {
            return bad(format!(
                "hidden_size {} != num_attention_heads {} x attention_head_size {}",
                self.hidden_size, self.num_attention_heads, self.attention_head_size
            ));
        }
        if !(self.layernorm_epsilon > 0.0) {
            return bad(format!("layernorm_epsilon must be positive, got {}", self.layernorm_epsilon));
        }
        if !self.intermediate_size.is_multiple_of(t) {
            return bad(format!(
                "intermediate_size {} is not divisible by tensor parallel degree {t}",
                self.intermediate_size
            ));
        }
        match self.optimize {
            Optimize::Speed if !self.num_attention_heads.is_multiple_of(t) => bad(format!(
                "num_attention_heads {} is not divisible by tensor parallel degree {t}",
                self.num_attention_heads
            )),
            Optimize::Memory if !self.hidden_size.is_multiple_of(t) => bad(format!(
                "hidden_size {} is not divisible by tensor parallel degree {t}",
                self.hidden_size
            )),
            _ => Ok(()),
        }
    }

    pub(crate) fn reject_cross_attention(&self) -> Result<()> {
        if self.add_cross_attention {
            return Err(Error::TransformerConfig(
                "cross attention is not implemented; only self-attention layers can run".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn identity(n: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            eps,
        }
    }

    pub fn random<R: Rng>(rng: &mut R, n: usize, eps: f64) -> Self {
        Self {
            gamma: random_vector(rng, n).mapv(|g| 1.0 + 0.5 * g),
            beta: random_vector(rng, n),
            eps,
        }
    }
}

/// Weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

impl AttentionParams {
    pub fn random<R: Rng>(rng: &mut R, hidden: usize) -> Self {
        let mut w = || random_matrix(rng, hidden, hidden);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let mut b = || random_vector(rng, hidden);
        Self {
            wq,
            wk,
            wv,
            wo,
            bq: b(),
            bk: b(),
            bv: b(),
            bo: b(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn random<R: Rng>(rng: &mut R, hidden: usize, intermediate: usize) -> Self {
        Self {
            w1: random_matrix(rng, intermediate, hidden),
            b1: random_vector(rng, intermediate),
            w2: random_matrix(rng, hidden, intermediate),
            b2: random_vector(rng, hidden),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams {
    pub attention: AttentionParams,
    pub mlp: MlpParams,
    pub attn_pre_ln: LayerNormParams,
    pub attn_post_ln: LayerNormParams,
    pub mlp_pre_ln: LayerNormParams,
    pub mlp_post_ln: LayerNormParams,
}

impl TransformerLayerParams {
    pub fn random<R: Rng>(rng: &mut R, cfg: &TransformerLayerConfig) -> Self {
        let h = cfg.hidden_size;
        let eps = cfg.layernorm_epsilon;
        Self {
            attention: AttentionParams::random(rng, h),
            mlp: MlpParams::random(rng, h, cfg.intermediate_size),
            attn_pre_ln: LayerNormParams::random(rng, h, eps),
            attn_post_ln: LayerNormParams::random(rng, h, eps),
            mlp_pre_ln: LayerNormParams::random(rng, h, eps),
            mlp_post_ln: LayerNormParams::random(rng, h, eps),
        }
    }
}

/// Normalization from per-row sums. Shared by the reference and the
/// distributed layer norm so both apply identical arithmetic once the
/// moments are known.
pub(crate) fn moments_to_stats(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, var)
}

pub fn layernorm(x: &ArrayD<f64>, p: &LayerNormParams) -> Result<ArrayD<f64>> {
    let rows = as_rows(x)?;
    let n = rows.ncols();
    if n == 0 {
        return Err(Error::Shape("layer norm over zero channels".into()));
    }
    if p.gamma.len() != n || p.beta.len() != n {
        return Err(Error::Shape(format!(
            "layer norm over {n} channels with {} affine parameters",
            p.gamma.len()
        )));
    }
    let mut out = rows.clone();
    for mut row in out.rows_mut() {
        let sum: f64 = row.iter().sum();
        let sum_sq: f64 = row.iter().map(|v| v * v).sum();
        let (mean, var) = moments_to_stats(sum, sum_sq, n);
        let inv = 1.0 / (var + p.eps).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * p.gamma[c] + p.beta[c];
        }
    }
    Ok(from_rows(out, lead_shape(x)))
}

/// Scaled dot-product attention over `[N, S, heads * head_size]` tensors.
/// `key_mask` is `[N, S]` with nonzero meaning "attend"; `causal` hides
/// later positions.
pub fn attention_core(
    q: &ArrayD<f64>,
    k: &ArrayD<f64>,
    v: &ArrayD<f64>,
    heads: usize,
    head_size: usize,
    key_mask: Option<&ArrayD<f64>>,
    causal: bool,
) -> Result<ArrayD<f64>> {
    let shape = q.shape().to_vec();
    if shape.len() != 3 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "attention expects matching [batch, seq, hidden] q/k/v, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (n, s, width) = (shape[0], shape[1], shape[2]);
    if width != heads * head_size {
        return Err(Error::Shape(format!(
            "width {width} is not {heads} heads x {head_size}"
        )));
    }
    if let Some(m) = key_mask {
        if m.shape() != [n, s] {
            return Err(Error::Shape(format!(
                "attention mask has shape {:?}, expected [{n}, {s}]",
                m.shape()
            )));
        }
    }
    let scale = 1.0 / (head_size as f64).sqrt();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let mut scores = vec![0.0; s];
    for b in 0..n {
        for h in 0..heads {
            let cols = h * head_size..(h + 1) * head_size;
            for i in 0..s {
                let mut max = f64::NEG_INFINITY;
                for (j, score) in scores.iter_mut().enumerate() {
                    let hidden = (causal && j > i)
                        || key_mask.is_some_and(|m| m[[b, j]] == 0.0);
                    *score = if hidden {
                        f64::NEG_INFINITY
                    } else {
                        let mut dot = 0.0;
                        for c in cols.clone() {
                            dot += q[[b, i, c]] * k[[b, j, c]];
                        }
                        dot * scale
                    };
                    max = max.max(*score);
                }
                if max == f64::NEG_INFINITY {
                    // Every key hidden: the output row stays zero.
                    continue;
                }
                let mut total = 0.0;
                for score in scores.iter_mut() {
                    *score = (*score - max).exp();
                    total += *score;
                }
                for c in cols.clone() {
                    let mut acc = 0.0;
                    for (j, p) in scores.iter().enumerate() {
                        acc += p * v[[b, j, c]];
                    }
                    out[[b, i, c]] = acc / total;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_causal(cfg: &TransformerLayerConfig, seq: usize) -> Result<bool> {
    match cfg.causal_mask_size {
        Some(n) if seq > n => Err(Error::Shape(format!(
            "sequence length {seq} exceeds causal_mask_size {n}"
        ))),
        Some(_) => Ok(true),
        None => Ok(false),
    }
}

pub fn attention(
    x: &ArrayD<f64>,
    p: &AttentionParams,
    cfg: &TransformerLayerConfig,
    mask: Option<&ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    cfg.validate(1)?;
    let causal = check_causal(cfg, x.shape().get(1).copied().unwrap_or(0))?;
    let q = affine(x, &p.wq, Some(&p.bq))?;
    let k = affine(x, &p.wk, Some(&p.bk))?;
    let v = affine(x, &p.wv, Some(&p.bv))?;
    let ctx = attention_core(
        &q,
        &k,
        &v,
        cfg.num_attention_heads,
        cfg.attention_head_size,
        mask,
        causal,
    )?;
    affine(&ctx, &p.wo, Some(&p.bo))
}

pub fn mlp(x: &ArrayD<f64>, p: &MlpParams, cfg: &TransformerLayerConfig) -> Result<ArrayD<f64>> {
    let h = affine(x, &p.w1, Some(&p.b1))?.mapv(|v| cfg.activation.apply(v));
    affine(&h, &p.w2, Some(&p.b2))
}

/// `x + f(pre_ln(x))`, followed by `post_ln` when enabled.
pub(crate) fn residual_block(
    x: &ArrayD<f64>,
    pre: Option<&LayerNormParams>,
    post: Option<&LayerNormParams>,
    f: impl FnOnce(&ArrayD<f64>) -> Result<ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    let h = match pre {
        Some(p) => layernorm(x, p)?,
        None => x.clone(),
    };
    let y = x + &f(&h)?;
    match post {
        Some(p) => layernorm(&y, p),
        None => Ok(y),
    }
}

pub fn transformer_layer(
    x: &ArrayD<f64>,
    p: &TransformerLayerParams,
    cfg: &TransformerLayerConfig,
    mask: Option<&ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    cfg.reject_cross_attention()?;
    let pre = |ln| cfg.pre_layernorm.then_some(ln);
    let post = |ln| cfg.post_layernorm.then_some(ln);
    let x = residual_block(x, pre(&p.attn_pre_ln), post(&p.attn_post_ln), |h| {
        attention(h, &p.attention, cfg, mask)
    })?;
    residual_block(&x, pre(&p.mlp_pre_ln), post(&p.mlp_post_ln), |h| mlp(h, &p.mlp, cfg))
}

pub fn transformer(
    x: &ArrayD<f64>,
    layers: &[TransformerLayerParams],
    cfg: &TransformerLayerConfig,
    mask: Option<&ArrayD<f64>>,
) -> Result<ArrayD<f64>> {
    let mut h = x.clone();
    for p in layers {
        h = transformer_layer(&h, p, cfg, mask)?;
    }
    Ok(h)
}

/// Rows of `table` picked by `indices`, shaped `indices.shape ++ [dim]`.
pub fn embedding_lookup(table: &Array2<f64>, indices: &ArrayD<usize>, rank: usize) -> Result<ArrayD<f64>> {
    let vocab = table.nrows();
    let mut shape = indices.shape().to_vec();
    shape.push(table.ncols());
    let mut rows = Vec::with_capacity(indices.len() * table.ncols());
    for (position, &index) in indices.iter().enumerate() {
        if index >= vocab {
            return Err(Error::IndexOutOfRange {
                index,
                rank,
                position,
                vocab,
            });
        }
        rows.extend(table.index_axis(Axis(0), index).iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&shape), rows).map_err(|e| Error::Shape(e.to_string()))
}
