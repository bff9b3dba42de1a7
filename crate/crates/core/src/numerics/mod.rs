//! Scalar abstraction, elementary functions and the differentiation tape.
//!
//! Everything in the loss path is written against [`Real`], which is
//! implemented by plain `f64` (inference, finite differences) and by
//! [`Var`] (recorded on a [`Tape`] for backpropagation). The two paths
//! therefore share one implementation of every formula.

mod shadow;
mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub use shadow::Shadow;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Scalar type usable in the differentiable code paths.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(value: f64) -> Self;
    fn value(&self) -> f64;
    /// True when no gradient can flow through this scalar.
    fn is_constant(&self) -> bool;
    /// Same value, cut from the differentiation graph.
    fn detach(&self) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;

    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter()
            .zip(b)
            .fold(Self::constant(0.0), |acc, (&x, &y)| acc + x * y)
    }

    fn dot_const(a: &[Self], b: &[f64]) -> Self {
        a.iter()
            .zip(b)
            .fold(Self::constant(0.0), |acc, (&x, &y)| acc + x * y)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::constant(0.0), |acc, &x| acc + x)
    }
}

impl Real for f64 {
    fn constant(value: f64) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
    fn is_constant(&self) -> bool {
        true
    }
    fn detach(&self) -> Self {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn dot_const(a: &[Self], b: &[f64]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is strictly positive");
    y + (-(-y).exp_m1()).ln()
}

pub fn values<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(Real::value).collect()
}

pub fn norm<T: Real>(a: &[T]) -> T {
    T::dot(a, a).sqrt()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x >= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// a·b / (|a||b|).
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na.value() == 0.0 || nb.value() == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(T::dot(a, b) / (na * nb))
}

pub fn logsumexp<T: Real>(logits: &[T]) -> Result<T> {
    let m = logits
        .iter()
        .map(Real::value)
        .fold(f64::NEG_INFINITY, f64::max);
    if logits.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    let shifted: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    Ok(T::sum(&shifted).ln() + m)
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let m = logits
        .iter()
        .map(Real::value)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let total = T::sum(&exps);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    let lse = logsumexp(logits)?;
    Ok(logits.iter().map(|&v| v - lse).collect())
}
