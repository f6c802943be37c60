use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};

/// Views `x` as `[rows, last]`.
pub(crate) fn as_rows(x: &ArrayD<f64>) -> Result<Array2<f64>> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("scalar has no feature dimension".into()))?;
    let rows: usize = x.shape()[..x.ndim() - 1].iter().product();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, last))
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Reshapes `[rows, features]` back to `lead ++ [features]`.
pub(crate) fn from_rows(y: Array2<f64>, lead: &[usize]) -> ArrayD<f64> {
    let mut shape = lead.to_vec();
    shape.push(y.ncols());
    y.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&shape))
        .expect("row count matches leading dims")
}

pub(crate) fn lead_shape(x: &ArrayD<f64>) -> &[usize] {
    &x.shape()[..x.ndim().saturating_sub(1)]
}

/// `x W^T + b` over the last dimension of `x`, with `w` shaped `[out, in]`.
pub fn affine(x: &ArrayD<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Result<ArrayD<f64>> {
    let in_dim = x.shape().last().copied().unwrap_or(0);
    if in_dim != w.ncols() {
        return Err(Error::Shape(format!(
            "input has {in_dim} features, weight expects {}",
            w.ncols()
        )));
    }
    let mut y = as_rows(x)?.dot(&w.t());
    if let Some(b) = b {
        if b.len() != w.nrows() {
            return Err(Error::Shape(format!(
                "bias has {} entries, weight has {} outputs",
                b.len(),
                w.nrows()
            )));
        }
        y += b;
    }
    Ok(from_rows(y, lead_shape(x)))
}

/// Rows `[start, start + len)` of the leading axis.
pub(crate) fn take_rows(x: &ArrayD<f64>, start: usize, len: usize) -> ArrayD<f64> {
    x.slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
        .to_owned()
}

pub(crate) fn row_block(w: &Array2<f64>, parts: usize, j: usize) -> Array2<f64> {
    let n = w.nrows() / parts;
    w.slice(s![j * n..(j + 1) * n, ..]).to_owned()
}

pub(crate) fn col_block(w: &Array2<f64>, parts: usize, j: usize) -> Array2<f64> {
    let n = w.ncols() / parts;
    w.slice(s![.., j * n..(j + 1) * n]).to_owned()
}

pub(crate) fn vec_block(b: &Array1<f64>, parts: usize, j: usize) -> Array1<f64> {
    let n = b.len() / parts;
    b.slice(s![j * n..(j + 1) * n]).to_owned()
}

/// Uniform entries in `[-1, 1)`.
pub fn random_array<R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0))
}

/// `max|a - b| / max|b|`, zero when both are zero. Shape mismatch is infinite.
pub fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 || diff.is_nan() {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Largest [`rel_err`] over paired rank tensors.
pub fn max_rel_err(a: &[ArrayD<f64>], b: &[ArrayD<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}
