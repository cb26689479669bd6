//! Forward-mode automatic differentiation with fixed-size dual numbers.
//!
//! A [`Dual<N>`] carries a value together with `N` partial derivatives.
//! Geometry and texture kernels are written once against the [`Real`]
//! scalar abstraction and evaluated either with plain `f64` (cheap, value
//! only) or with duals seeded on the parameters of interest (exact
//! analytic derivatives, no finite differencing).

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction shared by `f64` and [`Dual<N>`].
pub trait Real:
    Copy
    + fmt::Debug
    + Send
    + Sync
    + 'static
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
    fn constant(x: f64) -> Self;
    /// The value part (real component) of the scalar.
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn erf(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn constant(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dual number with `N` derivative slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// A variable seeded with derivative 1 in `slot`.
    #[inline]
    pub fn variable(value: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Dual { re: value, eps }
    }

    #[inline]
    pub fn new(re: f64, eps: [f64; N]) -> Self {
        Dual { re, eps }
    }

    /// Chain rule for a univariate function: `f(self)` given `f(re)` and `f'(re)`.
    #[inline]
    fn lift(self, value: f64, deriv: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= deriv;
        }
        Dual { re: value, eps }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn constant(x: f64) -> Self {
        Dual {
            re: x,
            eps: [0.0; N],
        }
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.lift(s, 0.5 / s)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.lift(e, e)
    }
    #[inline]
    fn erf(self) -> Self {
        // d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
        let d = std::f64::consts::FRAC_2_SQRT_PI * (-self.re * self.re).exp();
        self.lift(libm::erf(self.re), d)
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for ((e, a), b) in eps.iter_mut().zip(self.eps.iter()).zip(rhs.eps.iter()) {
            *e = a * rhs.re + self.re * b;
        }
        Dual {
            re: self.re * rhs.re,
            eps,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        // value part uses plain division so it matches the f64 code path exactly
        let re = self.re / rhs.re;
        let inv = 1.0 / rhs.re;
        let mut eps = [0.0; N];
        for ((e, a), b) in eps.iter_mut().zip(self.eps.iter()).zip(rhs.eps.iter()) {
            *e = (a - re * b) * inv;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re *= rhs;
        for e in self.eps.iter_mut() {
            *e *= rhs;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(mut self, rhs: f64) -> Self {
        self.re /= rhs;
        let inv = 1.0 / rhs;
        for e in self.eps.iter_mut() {
            *e *= inv;
        }
        self
    }
}
