//! Dense embedding vectors and the numeric kernels every other module builds on.
//!
//! All accumulation is done in `f64`. Means use Neumaier-compensated summation
//! so the result does not depend on input order beyond the last ulp.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShedError};

/// Norm floor used wherever a norm is inverted.
pub const DEFAULT_EPS: f64 = 1e-12;

/// A finite real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(index) = entries.iter().position(|x| !x.is_finite()) {
            return Err(ShedError::NonFinite { index });
        }
        Ok(Vector(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    /// Builds a vector from entries already known to be finite (results of
    /// arithmetic on finite inputs).
    pub(crate) fn from_finite(entries: Vec<f64>) -> Self {
        debug_assert!(entries.iter().all(|x| x.is_finite()));
        Vector(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = ShedError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.0
    }
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(ShedError::DimMismatch { expected, found });
    }
    Ok(())
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ShedError::InvalidTemperature(tau));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Vector> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(ShedError::NonFinite { index });
    }
    let n = norm(v);
    if n.is_nan() || n < eps || n == 0.0 {
        return Err(ShedError::DegenerateEmbedding { norm: n, eps });
    }
    Ok(Vector::from_finite(v.iter().map(|x| x / n).collect()))
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default, Debug)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Componentwise arithmetic mean of a nonempty set of equal-length vectors.
pub fn mean_vector<'a, I>(vs: I) -> Result<Vector>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(ShedError::EmptyInput)?;
    let dim = first.len();
    let mut acc = vec![CompensatedSum::default(); dim];
    let mut count = 0usize;
    for v in std::iter::once(first).chain(iter) {
        check_dims(dim, v.len())?;
        for (a, &x) in acc.iter_mut().zip(v) {
            a.add(x);
        }
        count += 1;
    }
    let n = count as f64;
    Vector::new(acc.iter().map(|a| a.value() / n).collect())
}

/// Cosine similarity of two unit vectors, i.e. their dot product.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    Ok(dot(a, b))
}

/// `softmax(scores / tau)` with max subtraction.
pub fn tempered_softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if scores.is_empty() {
        return Err(ShedError::EmptyInput);
    }
    if let Some(index) = scores.iter().position(|x| !x.is_finite()) {
        return Err(ShedError::NonFinite { index });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// `log softmax(scores / tau)`, computed with the log-sum-exp shift.
pub fn tempered_log_softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if scores.is_empty() {
        return Err(ShedError::EmptyInput);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| ((s - max) / tau).exp()).sum::<f64>().ln();
    Ok(scores.iter().map(|s| (s - max) / tau - lse).collect())
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
