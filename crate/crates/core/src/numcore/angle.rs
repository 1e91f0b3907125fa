use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An angle in radians.
///
/// Values produced by [`wrap_pi`] lie in `[-π, π)`; values produced by
/// [`atan2_phase`] follow the two-argument arctangent range `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Angle<F>(F);

impl<F: Scalar> Angle<F> {
    /// Wraps an already-finite value.
    pub(crate) fn from_wrapped(x: F) -> Self {
        Angle(x)
    }

    pub fn value(self) -> F {
        self.0
    }

    pub fn cos(self) -> F {
        self.0.cos()
    }

    pub fn sin(self) -> F {
        self.0.sin()
    }
}

/// `((x + π) mod 2π) − π` with a nonnegative modulo. Input must be finite.
#[inline]
pub fn wrap<F: Scalar>(x: F) -> F {
    let two_pi = F::TAU();
    let mut r = (x + F::PI()) % two_pi;
    if r < F::zero() {
        r += two_pi;
    }
    if r >= two_pi {
        r -= two_pi;
    }
    r - F::PI()
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_pi<F: Scalar>(x: F) -> Result<Angle<F>> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot wrap non-finite angle {x}")));
    }
    Ok(Angle(wrap(x)))
}

/// Phase of the point `(cos_c, sin_c)`; the origin has no phase.
pub fn atan2_phase<F: Scalar>(sin_c: F, cos_c: F) -> Result<Angle<F>> {
    if !sin_c.is_finite() || !cos_c.is_finite() {
        return Err(Error::Domain("non-finite circular components".into()));
    }
    if sin_c == F::zero() && cos_c == F::zero() {
        return Err(Error::Domain("atan2 of (0, 0) is undefined".into()));
    }
    Ok(Angle(sin_c.atan2(cos_c)))
}

/// Shortest signed distance `a − b` on the circle, in `[-π, π)`.
#[inline]
pub fn circular_diff<F: Scalar>(a: F, b: F) -> F {
    wrap(a - b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_pi(0.0f64).unwrap().value(), 0.0);
        assert!((wrap_pi(1.5 * PI).unwrap().value() + PI / 2.0).abs() < 1e-12);
        assert!((wrap_pi(2.0 * PI - 0.2).unwrap().value() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn wrap_range_is_half_open() {
        assert_eq!(wrap_pi(PI).unwrap().value(), -PI);
        assert_eq!(wrap_pi(-PI).unwrap().value(), -PI);
        for k in -20..20 {
            let v = wrap_pi(k as f64 * 0.7345).unwrap().value();
            assert!((-PI..PI).contains(&v));
        }
    }

    #[test]
    fn wrap_rejects_non_finite() {
        assert!(wrap_pi(f64::NAN).is_err());
        assert!(wrap_pi(f64::INFINITY).is_err());
    }

    #[test]
    fn atan2_examples() {
        assert_eq!(atan2_phase(0.0f64, 1.0).unwrap().value(), 0.0);
        assert!((atan2_phase(1.0f64, 0.0).unwrap().value() - PI / 2.0).abs() < 1e-15);
        // reference value 0.927295218001612 = atan(4/3)
        assert!((atan2_phase(0.8f64, 0.6).unwrap().value() - 0.927_295_218_001_612_2).abs() < 1e-9);
        assert!(atan2_phase(0.0f64, 0.0).is_err());
    }
}
