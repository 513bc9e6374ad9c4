//! Closed real intervals for range bounding of expressions over boxes.
//!
//! Bounds are computed in ordinary round-to-nearest arithmetic and then widened
//! by a few ulps, which is enough for the certification thresholds used in this
//! crate (all of them compare against margins far above rounding noise).

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

fn widen(lo: f64, hi: f64) -> Interval {
    Interval {
        lo: lo - lo.abs() * 4.0 * f64::EPSILON - f64::MIN_POSITIVE,
        hi: hi + hi.abs() * 4.0 * f64::EPSILON + f64::MIN_POSITIVE,
    }
}

impl Interval {
    pub const ENTIRE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    /// `None` when the reciprocal is unbounded.
    pub fn recip(&self) -> Option<Interval> {
        if self.contains_zero() {
            return None;
        }
        Some(widen(1.0 / self.hi, 1.0 / self.lo))
    }

    pub fn div(&self, rhs: &Interval) -> Option<Interval> {
        rhs.recip().map(|r| *self * r)
    }

    pub fn powi(&self, k: i32) -> Option<Interval> {
        if k == 0 {
            return Some(Interval::point(1.0));
        }
        if k < 0 {
            return self.powi(-k)?.recip();
        }
        let a = self.lo.powi(k);
        let b = self.hi.powi(k);
        if k % 2 == 0 {
            if self.contains_zero() {
                Some(widen(0.0, a.max(b)).clamp_lo(0.0))
            } else {
                Some(widen(a.min(b), a.max(b)).clamp_lo(0.0))
            }
        } else {
            Some(widen(a, b))
        }
    }

    fn clamp_lo(self, lo: f64) -> Interval {
        Interval {
            lo: self.lo.max(lo),
            hi: self.hi,
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Interval {
        Interval {
            lo: self.lo.max(lo),
            hi: self.hi.min(hi),
        }
    }

    pub fn abs(&self) -> Interval {
        if self.lo >= 0.0 {
            *self
        } else if self.hi <= 0.0 {
            Interval::new(-self.hi, -self.lo)
        } else {
            Interval::new(0.0, (-self.lo).max(self.hi))
        }
    }

    pub fn exp(&self) -> Interval {
        widen(self.lo.exp(), self.hi.exp()).clamp_lo(0.0)
    }

    pub fn ln(&self) -> Option<Interval> {
        if self.lo <= 0.0 {
            return None;
        }
        Some(widen(self.lo.ln(), self.hi.ln()))
    }

    pub fn sqrt(&self) -> Option<Interval> {
        if self.lo < 0.0 {
            return None;
        }
        Some(widen(self.lo.sqrt(), self.hi.sqrt()).clamp_lo(0.0))
    }

    pub fn tanh(&self) -> Interval {
        widen(self.lo.tanh(), self.hi.tanh()).clamp(-1.0, 1.0)
    }

    pub fn sin(&self) -> Interval {
        // sin(x) = cos(x - pi/2)
        (*self - Interval::point(FRAC_PI_2)).cos()
    }

    pub fn cos(&self) -> Interval {
        if !self.is_finite() || self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        // Shift so that lo lies in [0, 2pi).
        let k = (self.lo / TAU).floor();
        let lo = self.lo - k * TAU;
        let hi = self.hi - k * TAU;
        let (a, b) = (lo.cos(), hi.cos());
        let mut out_lo = a.min(b);
        let mut out_hi = a.max(b);
        // Extrema of cos at multiples of pi inside [lo, hi].
        if lo <= PI && PI <= hi || lo <= 3.0 * PI && 3.0 * PI <= hi {
            out_lo = -1.0;
        }
        if lo <= TAU && TAU <= hi {
            out_hi = 1.0;
        }
        widen(out_lo, out_hi).clamp(-1.0, 1.0)
    }

    pub fn min(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.min(other.hi))
    }

    pub fn max(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.max(other.lo), self.hi.max(other.hi))
    }

    /// Split at the midpoint.
    pub fn bisect(&self) -> (Interval, Interval) {
        let m = self.mid();
        (Interval::new(self.lo, m), Interval::new(m, self.hi))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        widen(self.lo + rhs.lo, self.hi + rhs.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        widen(self.lo - rhs.hi, self.hi - rhs.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        // 0 * inf is NaN; treat as 0 which is the correct limit for bounded factors.
        let p = p.map(|v| if v.is_nan() { 0.0 } else { v });
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        widen(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encloses(iv: Interval, samples: impl Iterator<Item = f64>) -> bool {
        samples.into_iter().all(|v| iv.contains(v))
    }

    #[test]
    fn cos_encloses_samples() {
        for &(lo, hi) in &[(-0.3, 0.4), (1.0, 4.0), (-7.0, -2.0), (3.0, 3.2), (5.0, 12.0)] {
            let iv = Interval::new(lo, hi).cos();
            let pts = (0..=200).map(|i| (lo + (hi - lo) * i as f64 / 200.0).cos());
            assert!(encloses(iv, pts), "cos [{lo},{hi}] -> {iv}");
        }
    }

    #[test]
    fn sin_encloses_samples() {
        for &(lo, hi) in &[(-0.3, 0.4), (1.0, 2.0), (-7.0, -2.0), (4.0, 5.0)] {
            let iv = Interval::new(lo, hi).sin();
            let pts = (0..=200).map(|i| (lo + (hi - lo) * i as f64 / 200.0).sin());
            assert!(encloses(iv, pts), "sin [{lo},{hi}] -> {iv}");
        }
        let s = Interval::new(0.1, 0.2).sin();
        assert!(s.lo > 0.09 && s.hi < 0.2);
    }

    #[test]
    fn even_power_straddling_zero() {
        let p = Interval::new(-2.0, 1.0).powi(2).unwrap();
        assert_eq!(p.lo, 0.0);
        assert!(p.hi >= 4.0 && p.hi < 4.0 + 1e-12);
    }

    #[test]
    fn reciprocal_through_zero_is_unbounded() {
        assert!(Interval::new(-1.0, 1.0).recip().is_none());
        assert!(Interval::new(0.0, 1.0).ln().is_none());
    }
}
