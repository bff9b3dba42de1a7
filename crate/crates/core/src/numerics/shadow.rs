//! A scalar evaluated at two points of parameter space at once.
//!
//! `base` follows the unperturbed parameters and `live` the perturbed ones.
//! Detaching pins both to the base value, so a finite difference of the
//! live components differentiates exactly the function the tape sees, with
//! stop-gradient quantities held fixed. A ReLU whose two inputs fall on
//! opposite sides of zero marks its output, and every value computed from
//! it, as `kinked`: the difference quotient across a kink is no derivative.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{sigmoid, softplus, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shadow {
    pub base: f64,
    pub live: f64,
    pub kinked: bool,
}

impl Shadow {
    pub fn new(base: f64, live: f64) -> Self {
        Self {
            base,
            live,
            kinked: false,
        }
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            base: f(self.base),
            live: f(self.live),
            kinked: self.kinked,
        }
    }
}

macro_rules! binary {
    ($trait:ident, $method:ident, $op:tt) => {
        impl $trait for Shadow {
            type Output = Shadow;
            fn $method(self, rhs: Shadow) -> Shadow {
                Shadow {
                    base: self.base $op rhs.base,
                    live: self.live $op rhs.live,
                    kinked: self.kinked || rhs.kinked,
                }
            }
        }
        impl $trait<f64> for Shadow {
            type Output = Shadow;
            fn $method(self, rhs: f64) -> Shadow {
                self.map(|x| x $op rhs)
            }
        }
    };
}

binary!(Add, add, +);
binary!(Sub, sub, -);
binary!(Mul, mul, *);
binary!(Div, div, /);

impl Neg for Shadow {
    type Output = Shadow;
    fn neg(self) -> Shadow {
        self.map(|x| -x)
    }
}

impl Real for Shadow {
    fn constant(value: f64) -> Self {
        Self::new(value, value)
    }
    fn value(&self) -> f64 {
        self.live
    }
    /// Shadow scalars always count as variable.
    fn is_constant(&self) -> bool {
        false
    }
    fn detach(&self) -> Self {
        Self::new(self.base, self.base)
    }
    fn exp(self) -> Self {
        self.map(f64::exp)
    }
    fn ln(self) -> Self {
        self.map(f64::ln)
    }
    fn sqrt(self) -> Self {
        self.map(f64::sqrt)
    }
    fn tanh(self) -> Self {
        self.map(f64::tanh)
    }
    fn relu(self) -> Self {
        let mut out = self.map(|x| if x > 0.0 { x } else { 0.0 });
        out.kinked |= (self.base > 0.0) != (self.live > 0.0);
        out
    }
    fn sigmoid(self) -> Self {
        self.map(sigmoid)
    }
    fn softplus(self) -> Self {
        self.map(softplus)
    }
}
