use ndarray::{Array1, Array2, ArrayD, Axis};

use super::collectives::{concat, Collective, RankTensor};
use super::ops::{as_rows, from_rows, lead_shape};
use super::TpGroup;
use crate::error::{Error, Result};

/// Column-wise shards `W = [W_1 ... W_T]` of an `[out, in]` weight, with the
/// bias held by tp_rank 0 only.
#[derive(Clone, Debug, PartialEq)]
pub struct DistLinearParams {
    pub shards: Vec<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
}

impl DistLinearParams {
    pub fn from_full(w: &Array2<f64>, b: Option<&Array1<f64>>, degree: usize) -> Result<Self> {
        if degree == 0 || !w.ncols().is_multiple_of(degree) {
            return Err(Error::Divisibility {
                dim: 1,
                size: w.ncols(),
                parts: degree,
            });
        }
        let shards = super::collectives::split(w, 1, degree)?;
        Ok(Self {
            shards,
            bias: b.cloned(),
        })
    }

    pub fn degree(&self) -> usize {
        self.shards.len()
    }

    pub fn in_features(&self) -> usize {
        self.shards.iter().map(|s| s.ncols()).sum()
    }

    pub fn out_features(&self) -> usize {
        self.shards.first().map_or(0, |s| s.nrows())
    }

    /// Concatenates the shards back into the full weight.
    pub fn assemble(&self) -> Array2<f64> {
        concat(&self.shards, 1).expect("shards share their row count")
    }
}

/// Gradients of [`DistLinear`]: per-rank input gradients, per-rank weight
/// shard gradients, and the bias gradient (held by tp_rank 0).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub inputs: Vec<RankTensor>,
    pub weight_shards: Vec<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Clone, Debug)]
struct LinearCache {
    /// Per rank: its feature slice of every rank's samples, `[T*B, in/T]`.
    merged: Vec<Array2<f64>>,
    lead: Vec<usize>,
}

/// A linear layer split over its input channels across a tensor-parallel
/// group.
///
/// Forward: every rank slices its batch by feature, an all-to-all gives rank
/// j feature slice j of all samples, rank j applies its shard, and a
/// reduce-scatter over the batch sums the partial products and returns each
/// sample to the rank it came from. Backward runs the dual collectives in
/// reverse.
#[derive(Clone, Debug)]
pub struct DistLinear {
    pub group: TpGroup,
    pub params: DistLinearParams,
    cache: Option<LinearCache>,
}

impl DistLinear {
    pub fn new(group: TpGroup, params: DistLinearParams) -> Result<Self> {
        if params.degree() != group.degree {
            return Err(Error::Shape(format!(
                "{} weight shards for a group of {}",
                params.degree(),
                group.degree
            )));
        }
        Ok(Self {
            group,
            params,
            cache: None,
        })
    }

    pub fn forward(&mut self, xs: &[RankTensor]) -> Result<Vec<RankTensor>> {
        let t = self.group.degree;
        self.group.check_inputs(xs)?;
        let in_dim = xs[0].shape().last().copied().unwrap_or(0);
        if in_dim != self.params.in_features() {
            return Err(Error::Shape(format!(
                "input has {in_dim} features, layer expects {}",
                self.params.in_features()
            )));
        }
        let lead = lead_shape(&xs[0]).to_vec();
        let rows = xs
            .iter()
            .map(|x| as_rows(x).map(|r| r.into_dyn()))
            .collect::<Result<Vec<_>>>()?;
        let merged = Collective::ScatterAndMerge {
            split_dim: 1,
            merge_dim: 0,
        }
        .forward(&rows)?;
        let merged: Vec<Array2<f64>> = merged
            .into_iter()
            .map(|m| m.into_dimensionality().expect("two-dimensional"))
            .collect();
        let params = &self.params;
        let partial = self.group.per_rank(|j| {
            let mut z = merged[j].dot(&params.shards[j].t());
            if j == 0 {
                if let Some(b) = &params.bias {
                    z += b;
                }
            }
            Ok(z.into_dyn())
        })?;
        let ys = Collective::ReduceScatter { dim: 0 }.forward(&partial)?;
        debug_assert_eq!(ys.len(), t);
        self.cache = Some(LinearCache {
            merged,
            lead: lead.clone(),
        });
        Ok(ys
            .into_iter()
            .map(|y| from_rows(y.into_dimensionality().expect("two-dimensional"), &lead))
            .collect())
    }

    pub fn backward(&self, grads: &[RankTensor]) -> Result<LinearGrads> {
        let cache = self.cache.as_ref().ok_or(Error::NoForward)?;
        self.group.check_inputs(grads)?;
        let out_dim = self.params.out_features();
        if grads[0].shape().last().copied() != Some(out_dim) || lead_shape(&grads[0]) != cache.lead {
            return Err(Error::Shape(format!(
                "upstream gradient has shape {:?}, forward output was {:?} x {out_dim}",
                grads[0].shape(),
                cache.lead
            )));
        }
        let rows = grads
            .iter()
            .map(|g| as_rows(g).map(|r| r.into_dyn()))
            .collect::<Result<Vec<_>>>()?;
        // Dual of the output reduce-scatter.
        let gathered: Vec<Array2<f64>> = Collective::ReduceScatter { dim: 0 }
            .backward(&rows)?
            .into_iter()
            .map(|g| g.into_dimensionality().expect("two-dimensional"))
            .collect();
        let params = &self.params;
        let local = self.group.per_rank(|j| {
            let g = &gathered[j];
            let dw = g.t().dot(&cache.merged[j]);
            let dx = g.dot(&params.shards[j]);
            Ok((dw, dx.into_dyn()))
        })?;
        let (weight_shards, dx_merged): (Vec<_>, Vec<_>) = local.into_iter().unzip();
        // Dual of the input all-to-all.
        let dx = Collective::ScatterAndMerge {
            split_dim: 1,
            merge_dim: 0,
        }
        .backward(&dx_merged)?;
        let bias = params
            .bias
            .as_ref()
            .map(|_| gathered[0].sum_axis(Axis(0)));
        Ok(LinearGrads {
            inputs: dx
                .into_iter()
                .map(|d| from_rows(d.into_dimensionality().expect("two-dimensional"), &cache.lead))
                .collect(),
            weight_shards,
            bias,
        })
    }
}

/// Single-rank linear layer gradients for a batch `x` and upstream `g`:
/// `(dx, dW, db)`.
pub fn reference_linear_backward(
    x: &ArrayD<f64>,
    w: &Array2<f64>,
    g: &ArrayD<f64>,
) -> Result<(ArrayD<f64>, Array2<f64>, Array1<f64>)> {
    let xr = as_rows(x)?;
    let gr = as_rows(g)?;
    let dx = from_rows(gr.dot(w), lead_shape(x));
    Ok((dx, gr.t().dot(&xr), gr.sum_axis(Axis(0))))
}
