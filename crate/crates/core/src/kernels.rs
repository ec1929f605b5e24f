//! Row kernels shared by the tape operations and the value-level helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance floor added under the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Max-subtracted softmax of one row. Entries equal to `-inf` map to exactly 0.
pub fn softmax_row<S: Scalar>(x: &[S], y: &mut [S]) -> Result<()> {
    let max = x
        .iter()
        .copied()
        .filter(|v| *v != S::neg_infinity())
        .fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return Err(Error::DegenerateDistribution(format!(
            "all {} positions are masked",
            x.len()
        )));
    }
    let mut total = S::zero();
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v == S::neg_infinity() {
            S::zero()
        } else {
            (v - max).exp()
        };
        total += *o;
    }
    for o in y.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Log-softmax of one row; `-inf` inputs stay `-inf`.
pub fn log_softmax_row<S: Scalar>(x: &[S], y: &mut [S]) -> Result<()> {
    let max = x
        .iter()
        .copied()
        .filter(|v| *v != S::neg_infinity())
        .fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return Err(Error::DegenerateDistribution(format!(
            "all {} positions are masked",
            x.len()
        )));
    }
    let total: S = x
        .iter()
        .filter(|v| **v != S::neg_infinity())
        .map(|&v| (v - max).exp())
        .sum();
    let log_z = max + total.ln();
    for (o, &v) in y.iter_mut().zip(x) {
        *o = v - log_z;
    }
    Ok(())
}

/// Normalizes one row to zero mean and unit variance, then applies the affine
/// transform. Writes the normalized row into `xhat` and returns `1/std`.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S], y: &mut [S], xhat: &mut [S]) -> S {
    let d = S::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let rstd = S::one() / (var + S::lit(LAYER_NORM_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}

/// Index of the largest entry, first occurrence on ties.
pub fn argmax<S: Scalar>(x: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
