//! Scalar abstraction that lets the network code run on plain floats or on
//! forward-mode dual numbers (for exact Hessian-vector products).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::operators::LinearOp;

pub trait Scalar:
    Copy
    + Debug
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
{
    fn constant(v: f64) -> Self;
    /// Primal value.
    fn re(self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn exp(self) -> Self;
    /// Applies a linear operator (or its adjoint) componentwise.
    fn apply_op(op: &LinearOp, x: &[Self], adjoint: bool) -> Vec<Self>;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }

    fn re(self) -> f64 {
        self
    }

    fn scale(self, k: f64) -> Self {
        self * k
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn apply_op(op: &LinearOp, x: &[Self], adjoint: bool) -> Vec<Self> {
        if adjoint {
            op.adjoint_raw(x)
        } else {
            op.apply_raw(x)
        }
    }
}

/// `re + eps * du` with `eps^2 = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }

    fn re(self) -> f64 {
        self.re
    }

    fn scale(self, k: f64) -> Self {
        Dual::new(self.re * k, self.du * k)
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }

    fn apply_op(op: &LinearOp, x: &[Self], adjoint: bool) -> Vec<Self> {
        let re: Vec<f64> = x.iter().map(|d| d.re).collect();
        let du: Vec<f64> = x.iter().map(|d| d.du).collect();
        let (a, b) = if adjoint {
            (op.adjoint_raw(&re), op.adjoint_raw(&du))
        } else {
            (op.apply_raw(&re), op.apply_raw(&du))
        };
        a.into_iter().zip(b).map(|(r, d)| Dual::new(r, d)).collect()
    }
}
