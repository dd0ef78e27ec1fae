//! Probability vectors, softmax and entropy (natural log throughout).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied before every `ln` in losses, so `ln 0` never appears.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    libm::log(if p > LOG_FLOOR { p } else { LOG_FLOOR })
}

/// A discrete distribution: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `p` is a distribution within 1e-9.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Empty("probability vector"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::NonFinite("probability entry outside [0, 1]".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NonFinite(alloc::format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(c: usize) -> Self {
        Self(alloc::vec![1.0 / c as f64; c])
    }

    pub fn one_hot(c: usize, k: usize) -> Self {
        let mut p = alloc::vec![0.0; c];
        p[k] = 1.0;
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    Ok(ProbVector(out))
}

pub(crate) fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - m);
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        softmax_inplace(p.row_mut(i));
    }
    p
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * libm::log(v))
        .sum::<f64>()
}

/// Softmax over the first `c` logits only. A `(C+1)`-way head uses this to
/// expose its known-class distribution.
pub fn softmax_prefix(logits: &[f64], c: usize) -> ProbVector {
    let mut v = logits[..c].to_vec();
    softmax_inplace(&mut v);
    ProbVector(v)
}

/// Pulls `dL/dp` back through a softmax row: `dL/dz_j = p_j (g_j − Σ_k p_k g_k)`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((z, &pj), &gj) in dz.iter_mut().zip(p).zip(dp) {
        *z = pj * (gj - inner);
    }
}
