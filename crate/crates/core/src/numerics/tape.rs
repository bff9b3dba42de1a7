//! Reverse-accumulation tape over scalar nodes.
//!
//! Every operation appends one node holding the partial derivatives with
//! respect to its inputs. Dot products and sums are single n-ary nodes so an
//! episode of a few hundred frames stays in the low hundreds of thousands of
//! edges. A tape lives for one episode and is dropped after the update.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Real;
use crate::error::{Error, Result};

const CONSTANT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    edge_start: u32,
    edge_end: u32,
}

#[derive(Default, Debug)]
struct Inner {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    params: Vec<u32>,
}

/// Record of primitive operations with cached partials.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("edges", &inner.edges.len())
            .field("params", &inner.params.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input. Gradients are reported in
    /// registration order.
    pub fn param(&self, value: f64) -> Var<'_> {
        let index = self.push(std::iter::empty());
        self.inner.borrow_mut().params.push(index);
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    pub fn params(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.param(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().params.len()
    }

    fn push(&self, edges: impl IntoIterator<Item = (u32, f64)>) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let edge_start = inner.edges.len() as u32;
        inner.edges.extend(edges);
        let edge_end = inner.edges.len() as u32;
        let index = inner.nodes.len() as u32;
        assert!(index != CONSTANT, "tape node index overflow");
        inner.nodes.push(Node {
            edge_start,
            edge_end,
        });
        index
    }

    fn owns(&self, var: &Var<'_>) -> bool {
        matches!(var.tape, Some(t) if std::ptr::eq(t, self))
    }

    /// Backpropagates from `loss`, returning d(loss)/d(p) for every
    /// registered parameter.
    pub fn grad(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(&loss) {
            return Err(Error::NotOnTape);
        }
        let inner = self.inner.borrow();
        let mut adjoint = vec![0.0; loss.index as usize + 1];
        adjoint[loss.index as usize] = 1.0;
        for i in (0..=loss.index as usize).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for &(parent, partial) in &inner.edges[node.edge_start as usize..node.edge_end as usize]
            {
                adjoint[parent as usize] += a * partial;
            }
        }
        let params = inner
            .params
            .iter()
            .map(|&p| adjoint.get(p as usize).copied().unwrap_or(0.0))
            .collect();
        Ok(Gradients { adjoint, params })
    }
}

/// Result of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoint: Vec<f64>,
    params: Vec<f64>,
}

impl Gradients {
    /// Gradients of the registered parameters, in registration order.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Gradient with respect to any node of the tape. Constants and nodes
    /// created after the loss report zero.
    pub fn wrt(&self, var: &Var<'_>) -> f64 {
        if var.index == CONSTANT {
            return 0.0;
        }
        self.adjoint.get(var.index as usize).copied().unwrap_or(0.0)
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index == CONSTANT {
            write!(f, "Var(const {})", self.value)
        } else {
            write!(f, "Var(#{} = {})", self.index, self.value)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            index: CONSTANT,
            value,
        }
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(tape) => {
                let index = tape.push([(self.index, partial)]);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(value),
            (Some(tape), None) => {
                let index = tape.push([(self.index, da)]);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
            (None, Some(tape)) => {
                let index = tape.push([(other.index, db)]);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
            (Some(tape), Some(t2)) => {
                debug_assert!(std::ptr::eq(tape, t2), "mixing vars from two tapes");
                let index = tape.push([(self.index, da), (other.index, db)]);
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }

    fn nary(value: f64, terms: impl Iterator<Item = (Var<'t>, f64)>) -> Self {
        let mut tape = None;
        let mut edges: Vec<(u32, f64)> = Vec::new();
        for (v, partial) in terms {
            if let Some(t) = v.tape {
                tape = Some(t);
                edges.push((v.index, partial));
            }
        }
        match tape {
            None => Var::constant(value),
            Some(t) => {
                let index = t.push(edges);
                Var {
                    tape: Some(t),
                    index,
                    value,
                }
            }
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn constant(value: f64) -> Self {
        Var::constant(value)
    }

    fn value(&self) -> f64 {
        self.value
    }

    fn is_constant(&self) -> bool {
        self.index == CONSTANT
    }

    fn detach(&self) -> Self {
        Var::constant(self.value)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn relu(self) -> Self {
        if self.value > 0.0 {
            self.unary(self.value, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }

    fn sigmoid(self) -> Self {
        let s = super::sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    fn softplus(self) -> Self {
        self.unary(super::softplus(self.value), super::sigmoid(self.value))
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
        Var::nary(
            value,
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| [(*x, y.value), (*y, x.value)]),
        )
    }

    fn dot_const(a: &[Self], b: &[f64]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let value = a.iter().zip(b).map(|(x, y)| x.value * y).sum();
        Var::nary(value, a.iter().zip(b).map(|(x, y)| (*x, *y)))
    }

    fn sum(xs: &[Self]) -> Self {
        let value = xs.iter().map(|x| x.value).sum();
        Var::nary(value, xs.iter().map(|x| (*x, 1.0)))
    }
}
