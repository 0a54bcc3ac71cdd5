//! Double-double scalar (about 106 significand bits) for the finite-difference
//! side of gradient checks. A central difference in plain `f64` loses about
//! `ulp(loss) / step` to round-off, which swamps small gradient entries.
//!
//! Arithmetic, `sqrt`, `exp` and `ln` run at full double-double precision.
//! Trigonometric and hyperbolic functions fall back to `f64` on the leading
//! word; nothing on the model path uses them.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};

use crate::tensor::{Precision, Scalar};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Dd { hi, lo }
    }

    pub const fn lift(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Self {
        let (p1, p2) = two_prod(self.hi, b);
        Dd::norm(p1, p2 + self.lo * b)
    }

    #[inline]
    fn sqr(a: f64) -> Self {
        let (p, e) = two_prod(a, a);
        Dd { hi: p, lo: e }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn exp_dd(self) -> Self {
        if self.hi > 709.8 {
            return Dd::lift(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Dd::zero();
        }
        if self.hi == 0.0 && self.lo == 0.0 {
            return Dd::one();
        }
        // exp(x) = 2^k · exp(r)^(2^10), |r| <= ln2 / 2^11
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.mul_f64(k)).ldexp(-10);
        // s = exp(r) - 1 by Taylor series
        let mut s = r;
        let mut term = r;
        for n in 2..20 {
            term = term * r / Dd::lift(n as f64);
            s += term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            // (1 + s)² - 1 = 2s + s²
            s = s.mul_f64(2.0) + s * s;
        }
        (s + Dd::one()).ldexp(k as i32)
    }

    fn ln_dd(self) -> Self {
        if self.hi.is_nan() || self.hi < 0.0 {
            return Dd::lift(f64::NAN);
        }
        if self.hi == 0.0 {
            return Dd::lift(f64::NEG_INFINITY);
        }
        if self.hi.is_infinite() {
            return self;
        }
        // Newton on exp(y) = x; each step doubles the correct bits
        let mut y = Dd::lift(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp_dd() - Dd::one();
        }
        y
    }

    fn sqrt_dd(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { Dd::zero() } else { Dd::lift(f64::NAN) };
        }
        if self.hi.is_infinite() {
            return self;
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        Dd::lift(ax) + Dd::lift((self - Dd::sqr(ax)).hi * (x * 0.5))
    }

    fn floor_dd(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Dd::norm(hi, self.lo.floor())
        } else {
            Dd::lift(hi)
        }
    }

    fn lead(self, f: impl Fn(f64) -> f64) -> Self {
        Dd::lift(f(self.hi))
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::lift(x)
    }
}

impl fmt::Debug for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dd({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        if !s1.is_finite() {
            return Dd::lift(s1);
        }
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        if !p1.is_finite() {
            return Dd::lift(p1);
        }
        Dd::norm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi.is_infinite() {
            return Dd::lift(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        Dd::norm(q1, q2) + Dd::lift(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, b: Dd) -> Dd {
        self - (self / b).trunc() * b
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, b: Dd) {
        *self = *self + b;
    }
}

impl SubAssign for Dd {
    fn sub_assign(&mut self, b: Dd) {
        *self = *self - b;
    }
}

impl MulAssign for Dd {
    fn mul_assign(&mut self, b: Dd) {
        *self = *self * b;
    }
}

impl DivAssign for Dd {
    fn div_assign(&mut self, b: Dd) {
        *self = *self / b;
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd { hi: 0.0, lo: 0.0 }
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::lift(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::lift)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }

    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for Dd {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Dd::lift)
    }
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::lift(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::lift(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::lift(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::lift(-0.0)
    }
    fn min_value() -> Self {
        Dd::lift(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::lift(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Dd::lift(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        self.floor_dd()
    }
    fn ceil(self) -> Self {
        -(-self).floor_dd()
    }
    fn round(self) -> Self {
        (self + Dd::lift(0.5)).floor_dd()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Dd::lift(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln_dd()).exp_dd()
    }
    fn sqrt(self) -> Self {
        self.sqrt_dd()
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn exp2(self) -> Self {
        (self * LN2).exp_dd()
    }
    fn ln(self) -> Self {
        self.ln_dd()
    }
    fn log(self, base: Self) -> Self {
        self.ln_dd() / base.ln_dd()
    }
    fn log2(self) -> Self {
        self.ln_dd() / LN2
    }
    fn log10(self) -> Self {
        self.ln_dd() / Dd::lift(10.0).ln_dd()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn cbrt(self) -> Self {
        if self.hi < 0.0 {
            -(-self).powf(Dd::one() / Dd::lift(3.0))
        } else {
            self.powf(Dd::one() / Dd::lift(3.0))
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt_dd()
    }
    fn sin(self) -> Self {
        self.lead(f64::sin)
    }
    fn cos(self) -> Self {
        self.lead(f64::cos)
    }
    fn tan(self) -> Self {
        self.lead(f64::tan)
    }
    fn asin(self) -> Self {
        self.lead(f64::asin)
    }
    fn acos(self) -> Self {
        self.lead(f64::acos)
    }
    fn atan(self) -> Self {
        self.lead(f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Dd::lift(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp_dd() - Dd::one()
    }
    fn ln_1p(self) -> Self {
        (self + Dd::one()).ln_dd()
    }
    fn sinh(self) -> Self {
        self.lead(f64::sinh)
    }
    fn cosh(self) -> Self {
        self.lead(f64::cosh)
    }
    fn tanh(self) -> Self {
        self.lead(f64::tanh)
    }
    fn asinh(self) -> Self {
        self.lead(f64::asinh)
    }
    fn acosh(self) -> Self {
        self.lead(f64::acosh)
    }
    fn atanh(self) -> Self {
        self.lead(f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {
    const PRECISION: Precision = Precision::Double;

    fn of(x: f64) -> Self {
        Dd::lift(x)
    }

    fn as_f64(self) -> f64 {
        self.hi + self.lo
    }
}
