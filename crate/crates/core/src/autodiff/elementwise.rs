//! Scalar functions applied elementwise inside the graph.
//!
//! Every function knows its own derivative as another elementwise function,
//! which is what lets the reverse pass record itself as graph nodes and be
//! differentiated again.

use std::fmt::Debug;
use std::rc::Rc;

use crate::Real;

pub trait Elementwise<T: Real>: Debug {
    fn name(&self) -> &'static str;
    fn apply(&self, x: T) -> T;
    /// `None` means the derivative is identically zero (piecewise constant functions).
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>>;
}

/// `scale * x^power`, with `x^0 = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledPow<T> {
    pub scale: T,
    pub power: T,
}

impl<T: Real> Elementwise<T> for ScaledPow<T> {
    fn name(&self) -> &'static str {
        "pow"
    }

    fn apply(&self, x: T) -> T {
        if self.power == T::zero() {
            return self.scale;
        }
        let p = self.power;
        let v = if p == p.round() && p.abs() < T::lit(64.0) {
            x.powi(p.to_i32().unwrap_or(0))
        } else {
            x.powf(p)
        };
        self.scale * v
    }

    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        if self.power == T::zero() || self.scale == T::zero() {
            return None;
        }
        Some(Rc::new(ScaledPow {
            scale: self.scale * self.power,
            power: self.power - T::one(),
        }))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Exp;

impl<T: Real> Elementwise<T> for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn apply(&self, x: T) -> T {
        x.exp()
    }
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        Some(Rc::new(Exp))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Relu;

impl<T: Real> Elementwise<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn apply(&self, x: T) -> T {
        if x > T::zero() {
            x
        } else {
            T::zero()
        }
    }
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        Some(Rc::new(Step))
    }
}

/// Heaviside step, `1[x > 0]`.
#[derive(Debug, Clone, Copy)]
pub struct Step;

impl<T: Real> Elementwise<T> for Step {
    fn name(&self) -> &'static str {
        "step"
    }
    fn apply(&self, x: T) -> T {
        if x > T::zero() {
            T::one()
        } else {
            T::zero()
        }
    }
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        None
    }
}

/// `ln(1 + exp(beta x)) / beta`.
#[derive(Debug, Clone, Copy)]
pub struct Softplus<T> {
    pub beta: T,
}

impl<T: Real> Elementwise<T> for Softplus<T> {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn apply(&self, x: T) -> T {
        let bx = self.beta * x;
        if bx > T::lit(30.0) {
            x
        } else if bx < T::lit(-30.0) {
            bx.exp() / self.beta
        } else {
            bx.exp().ln_1p() / self.beta
        }
    }
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        Some(Rc::new(SigmoidPoly {
            beta: self.beta,
            coeffs: vec![T::zero(), T::one()],
        }))
    }
}

/// Polynomial in `s = sigmoid(beta x)`: `sum_k coeffs[k] s^k`.
///
/// Closed under differentiation since `ds/dx = beta (s - s^2)`.
#[derive(Debug, Clone)]
pub struct SigmoidPoly<T> {
    pub beta: T,
    pub coeffs: Vec<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Elementwise<T> for SigmoidPoly<T> {
    fn name(&self) -> &'static str {
        "sigmoid-poly"
    }
    fn apply(&self, x: T) -> T {
        let s = sigmoid(self.beta * x);
        self.coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * s + c)
    }
    fn derivative(&self) -> Option<Rc<dyn Elementwise<T>>> {
        let mut out = vec![T::zero(); self.coeffs.len() + 1];
        for (k, &a) in self.coeffs.iter().enumerate().skip(1) {
            let c = self.beta * a * T::from_usize_lossy(k);
            out[k] = out[k] + c;
            out[k + 1] = out[k + 1] - c;
        }
        if out.iter().all(|c| *c == T::zero()) {
            return None;
        }
        Some(Rc::new(SigmoidPoly {
            beta: self.beta,
            coeffs: out,
        }))
    }
}
