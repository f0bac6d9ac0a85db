//! Pure forward kernels. The tape in [`super::tape`] calls these for its
//! forward values, so inference and training share one arithmetic path.

use crate::error::{Error, Result};

use super::Tensor;

/// Floor applied to graph degrees before the inverse square root.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Sums values in ascending order so the result does not depend on the
/// order the terms arrive in. Reductions over sequence positions use this,
/// which keeps the model exactly equivariant under reordering of items.
pub fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Row/column view of a tensor taking part in a matrix product. Rank-1
/// tensors act as a row vector on the left and a column vector on the right.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (m, k) = match a {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })
        }
    };
    let (k2, n) = match b {
        [k2] => (*k2, 1),
        [k2, n] => (*k2, *n),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })
        }
    };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let out = match (a.len(), b.len()) {
        (1, 1) => vec![],
        (1, 2) => vec![n],
        (2, 1) => vec![m],
        _ => vec![m, n],
    };
    Ok((m, k, n, out))
}

/// Matrix product. Rank-1 operands are promoted to row (left) or column
/// (right) vectors and the result drops the promoted dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Matrix product whose inner reductions do not depend on the order of the
/// shared index. The shared index is visited in an order fixed by the
/// values themselves (rows of `b`, then columns of `a`, lexicographically),
/// so permuting it permutes nothing in the result. Indices that tie on both
/// contribute identical terms, which makes their relative order irrelevant.
pub fn matmul_canonical(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_unstable_by(|&p, &q| {
        let rows = bd[p * n..(p + 1) * n].iter().zip(&bd[q * n..(q + 1) * n]);
        let cols = (0..m).map(|i| (&ad[i * k + p], &ad[i * k + q]));
        rows.chain(cols)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for &p in &order {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(shape, out)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "hadamard")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Logistic function, clamped into the open interval (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Masked softmax of a slice into `out`. Masked entries are exactly zero.
pub(crate) fn softmax_into(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut terms = Vec::with_capacity(x.len());
    for (i, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if keep(i) {
            *o = (v - max).exp();
            terms.push(*o);
        } else {
            *o = 0.0;
        }
    }
    let total = canonical_sum(&mut terms);
    for (i, o) in out.iter_mut().enumerate() {
        if keep(i) {
            *o /= total;
        }
    }
    Ok(())
}

/// Softmax over the last dimension, optionally masking entries of that
/// dimension. Rank-2 inputs are normalised row by row with the same mask.
pub fn softmax(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let width = *x.shape().last().unwrap_or(&1);
    if let Some(m) = mask {
        if m.len() != width {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x
        .data()
        .chunks(width)
        .zip(out.data_mut().chunks_mut(width))
    {
        softmax_into(src, mask, dst)?;
    }
    Ok(out)
}

/// `deg^{-1/2}` per valid row of a square matrix, where `deg` is the row
/// sum over valid columns floored at [`DEGREE_FLOOR`]. The second vector
/// flags rows where the floor was applied. Invalid rows get zero.
pub fn degree_inv_sqrt(a: &Tensor, mask: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let m = a.rows();
    let mut inv_sqrt = vec![0.0; m];
    let mut floored = vec![false; m];
    let mut terms = Vec::with_capacity(m);
    for i in (0..m).filter(|&i| mask[i]) {
        terms.clear();
        terms.extend((0..m).filter(|&j| mask[j]).map(|j| a.at(i, j)));
        let deg = canonical_sum(&mut terms);
        if deg < DEGREE_FLOOR {
            floored[i] = true;
        }
        inv_sqrt[i] = 1.0 / deg.max(DEGREE_FLOOR).sqrt();
    }
    (inv_sqrt, floored)
}

/// Capsule squashing `(|v|^2 / (1 + |v|^2)) * v / |v|`; zero maps to zero.
pub fn squash(v: &Tensor) -> Tensor {
    let n2 = v.sum_squares();
    if n2 == 0.0 {
        return Tensor::zeros(v.shape());
    }
    let n = n2.sqrt();
    let s = n / (1.0 + n2);
    v.map(|x| s * x)
}
