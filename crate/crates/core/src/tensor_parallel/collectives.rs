//! Collectives over a simulated tensor-parallel group. Element `i` of every
//! input or output slice belongs to tp_rank `i`. Sums always run in
//! ascending rank order.

use ndarray::{concatenate, ArrayD, ArrayView, Axis, Dimension, RemoveAxis};
use serde::Serialize;

use crate::error::{Error, Result};

/// A dense fp64 tensor held by one tp_rank; its rank is its position in the
/// slice it travels in.
pub type RankTensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Collective {
    /// Concatenate every rank's tensor along `dim`; all ranks get the result.
    Allgather { dim: usize },
    /// Sum in forward, identity in backward.
    FwdAllreduce,
    /// Identity in forward, sum in backward.
    BwdAllreduce,
    /// Split along `split_dim` into T slices, send slice j to rank j, and
    /// concatenate what arrives along `merge_dim` in rank order.
    ScatterAndMerge { split_dim: usize, merge_dim: usize },
    /// Split along `dim`; rank j receives the sum over ranks of slice j.
    ReduceScatter { dim: usize },
}

impl Collective {
    /// The collective that computes this one's backward pass.
    pub fn dual(self) -> Collective {
        match self {
            Collective::Allgather { dim } => Collective::ReduceScatter { dim },
            Collective::ReduceScatter { dim } => Collective::Allgather { dim },
            Collective::FwdAllreduce => Collective::BwdAllreduce,
            Collective::BwdAllreduce => Collective::FwdAllreduce,
            Collective::ScatterAndMerge {
                split_dim,
                merge_dim,
            } => Collective::ScatterAndMerge {
                split_dim: merge_dim,
                merge_dim: split_dim,
            },
        }
    }

    pub fn forward(self, inputs: &[RankTensor]) -> Result<Vec<RankTensor>> {
        match self {
            Collective::Allgather { dim } => allgather(inputs, dim),
            Collective::FwdAllreduce => allreduce(inputs),
            Collective::BwdAllreduce => {
                nonempty(inputs)?;
                Ok(inputs.to_vec())
            }
            Collective::ScatterAndMerge {
                split_dim,
                merge_dim,
            } => scatter_and_merge(inputs, split_dim, merge_dim),
            Collective::ReduceScatter { dim } => reduce_scatter(inputs, dim),
        }
    }

    pub fn backward(self, grads: &[RankTensor]) -> Result<Vec<RankTensor>> {
        self.dual().forward(grads)
    }
}

fn nonempty<T>(inputs: &[T]) -> Result<()> {
    if inputs.is_empty() {
        Err(Error::Shape("collective over an empty group".into()))
    } else {
        Ok(())
    }
}

fn check_dim(shape: &[usize], dim: usize) -> Result<()> {
    if dim >= shape.len() {
        return Err(Error::Shape(format!(
            "dimension {dim} does not exist for shape {shape:?}"
        )));
    }
    Ok(())
}

fn same_shapes<A, D: Dimension>(inputs: &[ndarray::Array<A, D>]) -> Result<()> {
    let first = inputs[0].shape();
    for (r, x) in inputs.iter().enumerate().skip(1) {
        if x.shape() != first {
            return Err(Error::Shape(format!(
                "tp_rank {r} holds shape {:?}, tp_rank 0 holds {first:?}",
                x.shape()
            )));
        }
    }
    Ok(())
}

/// Splits `x` into `parts` equal slices along `dim`.
pub fn split<A: Clone, D: RemoveAxis>(
    x: &ndarray::Array<A, D>,
    dim: usize,
    parts: usize,
) -> Result<Vec<ndarray::Array<A, D>>> {
    check_dim(x.shape(), dim)?;
    let size = x.shape()[dim];
    if parts == 0 || !size.is_multiple_of(parts) {
        return Err(Error::Divisibility { dim, size, parts });
    }
    let chunk = size / parts;
    Ok(x
        .axis_chunks_iter(Axis(dim), chunk.max(1))
        .map(|c| c.to_owned())
        .chain(std::iter::repeat_with(|| {
            // Zero-length axis: axis_chunks_iter yields nothing.
            let mut shape = x.raw_dim();
            shape[dim] = 0;
            ndarray::Array::from_shape_vec(shape, Vec::new()).expect("empty array")
        }))
        .take(parts)
        .collect())
}

pub fn concat<A: Clone, D: RemoveAxis>(
    parts: &[ndarray::Array<A, D>],
    dim: usize,
) -> Result<ndarray::Array<A, D>> {
    let views: Vec<ArrayView<A, D>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(dim), &views).map_err(|e| Error::Shape(format!("cannot concatenate: {e}")))
}

/// Elementwise sum in ascending rank order.
pub fn sum_ascending<D: Dimension>(parts: &[ndarray::Array<f64, D>]) -> Result<ndarray::Array<f64, D>> {
    nonempty(parts)?;
    same_shapes(parts)?;
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc += p;
    }
    Ok(acc)
}

pub fn allgather<A: Clone>(inputs: &[ArrayD<A>], dim: usize) -> Result<Vec<ArrayD<A>>> {
    nonempty(inputs)?;
    for x in inputs {
        check_dim(x.shape(), dim)?;
    }
    let full = concat(inputs, dim)?;
    Ok(vec![full; inputs.len()])
}

pub fn allreduce(inputs: &[RankTensor]) -> Result<Vec<RankTensor>> {
    let total = sum_ascending(inputs)?;
    Ok(vec![total; inputs.len()])
}

pub fn scatter_and_merge(
    inputs: &[RankTensor],
    split_dim: usize,
    merge_dim: usize,
) -> Result<Vec<RankTensor>> {
    nonempty(inputs)?;
    same_shapes(inputs)?;
    check_dim(inputs[0].shape(), merge_dim)?;
    let t = inputs.len();
    let sliced = inputs
        .iter()
        .map(|x| split(x, split_dim, t))
        .collect::<Result<Vec<_>>>()?;
    (0..t)
        .map(|j| {
            let received: Vec<RankTensor> = sliced.iter().map(|s| s[j].clone()).collect();
            concat(&received, merge_dim)
        })
        .collect()
}

pub fn reduce_scatter(inputs: &[RankTensor], dim: usize) -> Result<Vec<RankTensor>> {
    nonempty(inputs)?;
    same_shapes(inputs)?;
    let t = inputs.len();
    let sliced = inputs
        .iter()
        .map(|x| split(x, dim, t))
        .collect::<Result<Vec<_>>>()?;
    (0..t)
        .map(|j| {
            let parts: Vec<RankTensor> = sliced.iter().map(|s| s[j].clone()).collect();
            sum_ascending(&parts)
        })
        .collect()
}
