//! Forward-mode dual numbers `a + b*eps` with `eps^2 = 0`.
//!
//! Evaluating a function on [`Dual`] inputs propagates one directional
//! derivative exactly (to machine precision), which is how the filter obtains
//! second-order Lie derivatives: the first derivative of the barrier is
//! assembled in closed form, and its directional derivative along the belief
//! drift/input directions is taken by a single dual-valued sweep. System
//! models therefore expose their dynamics and Jacobians as closures over
//! `Dual` so both plain evaluation (derivative part zero) and directional
//! differentiation share one code path.
//!
//! Only the operations the crate actually differentiates are provided
//! (arithmetic, `sqrt`, `sin`, `cos`, `exp`); the type deliberately stays
//! minimal rather than emulating all of `f64`.

use num_traits::{One, Zero};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// A dual number: `re` carries the value, `du` the directional derivative.
#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct Dual {
    /// Value part.
    pub re: f64,
    /// Derivative part.
    pub du: f64,
}

impl Dual {
    /// A dual with both parts given.
    #[inline]
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }

    /// A constant (derivative part zero).
    #[inline]
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }

    /// A seed variable (derivative part one).
    #[inline]
    pub fn variable(re: f64) -> Self {
        Dual { re, du: 1.0 }
    }

    /// Square root; `d sqrt(a) = da / (2 sqrt(a))`.
    #[inline]
    pub fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual {
            re: r,
            du: if self.du == 0.0 { 0.0 } else { self.du / (2.0 * r) },
        }
    }

    /// Sine.
    #[inline]
    pub fn sin(self) -> Self {
        Dual {
            re: self.re.sin(),
            du: self.du * self.re.cos(),
        }
    }

    /// Cosine.
    #[inline]
    pub fn cos(self) -> Self {
        Dual {
            re: self.re.cos(),
            du: -self.du * self.re.sin(),
        }
    }

    /// Exponential.
    #[inline]
    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Dual {
            re: e,
            du: self.du * e,
        }
    }
}

impl fmt::Display for Dual {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}eps", self.re, self.du)
    }
}

impl From<f64> for Dual {
    #[inline]
    fn from(re: f64) -> Self {
        Dual::constant(re)
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.re;
        Dual::new(
            self.re * inv,
            (self.du - self.re * rhs.du * inv) * inv,
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, rhs: Dual) {
        *self = *self - rhs;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, rhs: Dual) {
        *self = *self * rhs;
    }
}

impl DivAssign for Dual {
    #[inline]
    fn div_assign(&mut self, rhs: Dual) {
        *self = *self / rhs;
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: f64) -> Dual {
        Dual::new(self.re * rhs, self.du * rhs)
    }
}

impl Mul<Dual> for f64 {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self * rhs.re, self * rhs.du)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: f64) -> Dual {
        Dual::new(self.re + rhs, self.du)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: f64) -> Dual {
        Dual::new(self.re - rhs, self.du)
    }
}

impl Sum for Dual {
    fn sum<I: Iterator<Item = Dual>>(iter: I) -> Dual {
        iter.fold(Dual::zero(), |a, b| a + b)
    }
}

/// Lift an `f64` vector to constant duals.
pub fn lift_vector(v: &nalgebra::DVector<f64>) -> nalgebra::DVector<Dual> {
    v.map(Dual::constant)
}

/// Lift an `f64` matrix to constant duals.
pub fn lift_matrix(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<Dual> {
    m.map(Dual::constant)
}

/// Value parts of a dual vector.
pub fn value_vector(v: &nalgebra::DVector<Dual>) -> nalgebra::DVector<f64> {
    v.map(|d| d.re)
}

/// Value parts of a dual matrix.
pub fn value_matrix(m: &nalgebra::DMatrix<Dual>) -> nalgebra::DMatrix<f64> {
    m.map(|d| d.re)
}

/// Derivative parts of a dual vector.
pub fn derivative_vector(v: &nalgebra::DVector<Dual>) -> nalgebra::DVector<f64> {
    v.map(|d| d.du)
}

/// Derivative parts of a dual matrix.
pub fn derivative_matrix(m: &nalgebra::DMatrix<Dual>) -> nalgebra::DMatrix<f64> {
    m.map(|d| d.du)
}

impl Zero for Dual {
    #[inline]
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    #[inline]
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.du == 0.0
    }
}

impl One for Dual {
    #[inline]
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
}
