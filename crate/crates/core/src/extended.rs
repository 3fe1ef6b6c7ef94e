//! Double-double scalar for finite-difference references.
//!
//! Arithmetic and `sqrt` come from [`twofloat`]; `exp`, `ln`, `ln_1p`,
//! `exp_m1` and `tanh` are evaluated here to full double-double accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use twofloat::TwoFloat;

use crate::scalar::Scalar;

/// About 106 significant bits.
#[derive(Clone, Copy, Debug, Default)]
pub struct Extended(pub TwoFloat);

impl PartialEq for Extended {
    fn eq(&self, other: &Self) -> bool {
        self.0.hi() == other.0.hi() && (self.0.lo() == other.0.lo() || self.0.hi().is_infinite())
    }
}

/// Lexicographic on `(hi, lo)`, which orders normalised pairs and infinities.
impl PartialOrd for Extended {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.0.hi().partial_cmp(&other.0.hi())? {
            Ordering::Equal if self.0.hi().is_infinite() => Some(Ordering::Equal),
            Ordering::Equal => self.0.lo().partial_cmp(&other.0.lo()),
            o => Some(o),
        }
    }
}

impl Extended {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }

    fn f(v: f64) -> Self {
        Extended(<TwoFloat as From<f64>>::from(v))
    }

    fn ldexp(self, k: i32) -> Self {
        // Two factors keep each power of two inside the f64 range.
        let a = k / 2;
        let b = k - a;
        Extended(self.0 * 2f64.powi(a) * 2f64.powi(b))
    }

    /// Taylor series of `exp(x) - 1`; accurate for `|x| <= 1`.
    fn expm1_series(x: Self) -> Self {
        let mut term = x;
        let mut sum = x;
        for n in 2..40 {
            term = term * x / Self::f(n as f64);
            sum += term;
            if term.0.hi().abs() < 1e-34 * sum.0.hi().abs().max(1e-300) {
                break;
            }
        }
        sum
    }

    fn exp_dd(self) -> Self {
        let x = self.0.hi();
        if x.is_nan() {
            return self;
        }
        if x > 709.7 {
            return Self::f(f64::INFINITY);
        }
        if x < -745.2 {
            return Self::zero();
        }
        let ln2 = Extended(twofloat::consts::LN_2);
        let k = (x / std::f64::consts::LN_2).round();
        let r = self - ln2 * Self::f(k);
        // exp(r) = (exp(r / 2^10))^(2^10)
        let s = Extended(r.0 * (1.0 / 1024.0));
        let mut e = Self::expm1_series(s) + Self::one();
        for _ in 0..10 {
            e = e * e;
        }
        e.ldexp(k as i32)
    }

    fn ln_dd(self) -> Self {
        let x = self.0.hi();
        if x.is_nan() || x < 0.0 {
            return Self::f(f64::NAN);
        }
        if x == 0.0 {
            return Self::f(f64::NEG_INFINITY);
        }
        if x.is_infinite() {
            return self;
        }
        let mut y = Self::f(x.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp_dd() - Self::one();
        }
        y
    }

    fn expm1_dd(self) -> Self {
        if self.0.hi().abs() <= 1.0 {
            Self::expm1_series(self)
        } else {
            self.exp_dd() - Self::one()
        }
    }

    fn ln1p_dd(self) -> Self {
        let x = self.0.hi();
        if x.abs() < 0.5 {
            // Newton on expm1(y) = x from the f64 estimate.
            let mut y = Self::f(x.ln_1p());
            for _ in 0..2 {
                let e = y.expm1_dd();
                y -= (e - self) / (e + Self::one());
            }
            y
        } else {
            (self + Self::one()).ln_dd()
        }
    }

    fn tanh_dd(self) -> Self {
        let x = self.0.hi();
        if x.is_nan() {
            return self;
        }
        let a = self.abs();
        let t = if a.0.hi() <= 0.5 {
            let e = (a + a).expm1_dd();
            e / (e + Self::f(2.0))
        } else {
            let e = (-(a + a)).exp_dd();
            (Self::one() - e) / (Self::one() + e)
        };
        if x < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.0.hi() + self.0.lo()), f)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $atr:ident, $am:ident, $op:tt) => {
        impl $tr for Extended {
            type Output = Extended;
            #[inline]
            fn $m(self, rhs: Extended) -> Extended {
                if self.0.hi().is_finite() && rhs.0.hi().is_finite() {
                    Extended(self.0 $op rhs.0)
                } else {
                    Extended::f(self.0.hi() $op rhs.0.hi())
                }
            }
        }
        impl $atr for Extended {
            #[inline]
            fn $am(&mut self, rhs: Extended) {
                *self = *self $op rhs;
            }
        }
    };
}

binop!(Add, add, AddAssign, add_assign, +);
binop!(Sub, sub, SubAssign, sub_assign, -);
binop!(Mul, mul, MulAssign, mul_assign, *);

/// Long division with three f64 quotient digits; the crate's own division
/// is only good to about 1e-17.
fn dd_div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    if !q1.is_finite() {
        return <TwoFloat as From<f64>>::from(q1);
    }
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

impl Div for Extended {
    type Output = Extended;
    #[inline]
    fn div(self, rhs: Extended) -> Extended {
        Extended(dd_div(self.0, rhs.0))
    }
}

impl DivAssign for Extended {
    #[inline]
    fn div_assign(&mut self, rhs: Extended) {
        self.0 = dd_div(self.0, rhs.0);
    }
}
binop!(Rem, rem, RemAssign, rem_assign, %);

impl Neg for Extended {
    type Output = Extended;
    #[inline]
    fn neg(self) -> Extended {
        Extended(-self.0)
    }
}

impl Zero for Extended {
    fn zero() -> Self {
        Extended(<TwoFloat as From<f64>>::from(0.0))
    }
    fn is_zero(&self) -> bool {
        self.0.hi() == 0.0
    }
}

impl One for Extended {
    fn one() -> Self {
        Extended(<TwoFloat as From<f64>>::from(1.0))
    }
}

impl Num for Extended {
    type FromStrRadixErr = <TwoFloat as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        TwoFloat::from_str_radix(s, radix).map(Extended)
    }
}

impl ToPrimitive for Extended {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0.hi() + self.0.lo())
    }
}

impl FromPrimitive for Extended {
    fn from_i64(n: i64) -> Option<Self> {
        TwoFloat::from_i64(n).map(Extended)
    }
    fn from_u64(n: u64) -> Option<Self> {
        TwoFloat::from_u64(n).map(Extended)
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::f(n))
    }
}

impl NumCast for Extended {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        <TwoFloat as NumCast>::from(n).map(Extended)
    }
}

macro_rules! delegate {
    ($($m:ident),*) => {
        $(fn $m(self) -> Self { Extended(<TwoFloat as Float>::$m(self.0)) })*
    };
}

macro_rules! delegate_const {
    ($($m:ident),*) => {
        $(fn $m() -> Self { Extended(<TwoFloat as Float>::$m()) })*
    };
}

macro_rules! delegate_pred {
    ($($m:ident),*) => {
        $(fn $m(self) -> bool { <TwoFloat as Float>::$m(self.0) })*
    };
}

impl Float for Extended {
    delegate_const!(neg_zero, min_value, min_positive_value, max_value);
    delegate_pred!(is_finite, is_normal, is_sign_positive, is_sign_negative);

    fn nan() -> Self {
        Self::f(f64::NAN)
    }

    fn infinity() -> Self {
        Self::f(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Self::f(f64::NEG_INFINITY)
    }

    fn is_nan(self) -> bool {
        self.0.hi().is_nan()
    }

    fn is_infinite(self) -> bool {
        self.0.hi().is_infinite()
    }
    delegate!(
        floor, ceil, round, trunc, fract, abs, signum, sqrt, exp2, log2, log10, cbrt, sin, cos, tan, asin,
        acos, atan, sinh, cosh, asinh, acosh, atanh
    );

    fn classify(self) -> FpCategory {
        self.0.classify()
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn powi(self, n: i32) -> Self {
        Extended(self.0.powi(n))
    }

    fn powf(self, n: Self) -> Self {
        (n * self.ln_dd()).exp_dd()
    }

    fn exp(self) -> Self {
        self.exp_dd()
    }

    fn ln(self) -> Self {
        self.ln_dd()
    }

    fn log(self, base: Self) -> Self {
        self.ln_dd() / base.ln_dd()
    }

    fn max(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Less) => other,
            Some(_) => self,
            None => if self.is_nan() { other } else { self },
        }
    }

    fn min(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Greater) => other,
            Some(_) => self,
            None => if self.is_nan() { other } else { self },
        }
    }

    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }

    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }

    fn atan2(self, other: Self) -> Self {
        Extended(self.0.atan2(other.0))
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn exp_m1(self) -> Self {
        self.expm1_dd()
    }

    fn ln_1p(self) -> Self {
        self.ln1p_dd()
    }

    fn tanh(self) -> Self {
        self.tanh_dd()
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.hi().integer_decode()
    }
}

impl Scalar for Extended {
    const NAME: &'static str = "f64x2";

    fn lit(v: f64) -> Self {
        Self::f(v)
    }

    fn to_f64_lossy(self) -> f64 {
        self.0.hi() + self.0.lo()
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f64_lossy() as f32
    }

    fn from_f32(v: f32) -> Self {
        Self::f(v as f64)
    }
}
