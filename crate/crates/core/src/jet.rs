//! Forward-mode dual numbers for exact derivatives of geometric losses.
//!
//! A [`Jet<N>`] carries a value together with its partial derivatives with
//! respect to `N` seed variables. Geometry code is written once against the
//! [`Scalar`] trait and instantiated with `f64` (plain evaluation) or
//! `Jet<N>` (evaluation plus gradient). Branch decisions (`min`, `max`,
//! comparisons, clipping side tests) are taken on the value part, which
//! yields the one-sided derivative at kinks.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and [`Jet`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Value part (derivatives dropped).
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn atan2(self, x: Self) -> Self;

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }
    /// Clamp the value into `[lo, hi]`; derivative is zero outside.
    fn clamp_val(self, lo: f64, hi: f64) -> Self {
        self.max(Self::from_f64(lo)).min(Self::from_f64(hi))
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// Value plus partial derivatives w.r.t. `N` seed variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Seed variable `i`: value `v`, derivative 1 in slot `i`.
    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = dv * self.d[i];
        }
        Self { v, d }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] + rhs.d[i];
        }
        Self {
            v: self.v + rhs.v,
            d,
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] - rhs.d[i];
        }
        Self {
            v: self.v - rhs.v,
            d,
        }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.v + self.v * rhs.d[i];
        }
        Self {
            v: self.v * rhs.v,
            d,
        }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * rhs.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = -self.d[i];
        }
        Self { v: -self.v, d }
    }
}

impl<const N: usize> Scalar for Jet<N> {
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }
    fn ln(self) -> Self {
        self.map(self.v.ln(), 1.0 / self.v)
    }
    fn atan2(self, x: Self) -> Self {
        let y = self;
        let denom = x.v * x.v + y.v * y.v;
        let v = y.v.atan2(x.v);
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (x.v * y.d[i] - y.v * x.d[i]) / denom;
        }
        Self { v, d }
    }
}

/// Central finite-difference gradient of `f` at `point`.
pub fn finite_diff<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let hi = f(&probe);
        probe[i] = point[i] - eps;
        let lo = f(&probe);
        probe[i] = point[i];
        grads.push((hi - lo) / (2.0 * eps));
    }
    grads
}

/// Relative error between an analytic and a reference gradient component.
///
/// The denominator is floored at 1e-5 so that near-zero components are not
/// dominated by central-difference rounding noise (~1e-10 at eps 1e-6).
pub fn grad_rel_err(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(1e-5);
    (analytic - reference).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<S: Scalar>(x: S, y: S) -> S {
        // x^2 y + sin(x y) / sqrt(y)
        x * x * y + (x * y).sin() / y.sqrt()
    }

    #[test]
    fn jet_matches_finite_difference() {
        let (x0, y0) = (0.7, 1.9);
        let j = poly(Jet::<2>::variable(x0, 0), Jet::<2>::variable(y0, 1));
        let fd = finite_diff(|p| poly(p[0], p[1]), &[x0, y0], 1e-6);
        assert!((j.v - poly(x0, y0)).abs() < 1e-12);
        for i in 0..2 {
            assert!(grad_rel_err(j.d[i], fd[i]) < 1e-7, "slot {i}");
        }
    }

    #[test]
    fn jet_atan2_all_quadrants() {
        for &(y, x) in &[(1.0, 2.0), (1.0, -2.0), (-1.5, -0.5), (-1.5, 0.5)] {
            let jy = Jet::<2>::variable(y, 0);
            let jx = Jet::<2>::variable(x, 1);
            let j = jy.atan2(jx);
            let fd = finite_diff(|p| p[0].atan2(p[1]), &[y, x], 1e-7);
            assert!((j.v - y.atan2(x)).abs() < 1e-12);
            assert!(grad_rel_err(j.d[0], fd[0]) < 1e-6);
            assert!(grad_rel_err(j.d[1], fd[1]) < 1e-6);
        }
    }

    #[test]
    fn min_max_take_one_sided_derivative() {
        let a = Jet::<2>::variable(1.0, 0);
        let b = Jet::<2>::variable(2.0, 1);
        let m = a.min(b);
        assert_eq!(m.d, [1.0, 0.0]);
        let m = a.max(b);
        assert_eq!(m.d, [0.0, 1.0]);
    }
}
