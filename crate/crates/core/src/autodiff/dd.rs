//! Double-double scalar: an unevaluated sum `hi + lo` of two `f64` with about
//! 106 significant bits. Used as the extended precision of finite-difference
//! oracles, where `f64` round-off swamps gradients far below the loss scale.
//!
//! Arithmetic, `sqrt`, `exp`, `exp_m1`, `ln` and `tanh` are accurate to a few
//! units of 2^-104. Functions the engine never calls (trigonometry, `cbrt`,
//! `hypot`) are evaluated in `f64` precision.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};
use std::sync::OnceLock;

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[cfg(not(target_feature = "fma"))]
const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};
/// Arguments of `exp_m1_reduced` are divided by 2^REDUCE before the series.
/// With `|r| ≤ 0.5` the first omitted term is below 1e-33 relative.
const REDUCE: i32 = 8;
const SERIES_TERMS: usize = 10;
/// Series length in `exp_parts`, where `|r| ≤ ln2/8192`.
const FAST_TERMS: usize = 7;

/// `1/n!` for `n` in `0..=SERIES_TERMS`, to full double-double accuracy.
fn inverse_factorials() -> &'static [Dd; SERIES_TERMS + 1] {
    static TABLE: OnceLock<[Dd; SERIES_TERMS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Dd::ONE; SERIES_TERMS + 1];
        for n in 1..=SERIES_TERMS {
            t[n] = t[n - 1] / Dd::new(n as f64);
        }
        t
    })
}

/// `2^(a/64)` and `2^(b/4096)` for `a, b` in `0..64`.
fn pow2_tables() -> &'static ([Dd; 64], [Dd; 64]) {
    static TABLES: OnceLock<([Dd; 64], [Dd; 64])> = OnceLock::new();
    TABLES.get_or_init(|| {
        let entry = |i: usize, shift: i32| {
            Dd::ONE + Dd::exp_m1_reduced(LN2.mul_f64(i as f64).ldexp(-shift))
        };
        (
            std::array::from_fn(|a| entry(a, 6)),
            std::array::from_fn(|b| entry(b, 12)),
        )
    })
}

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

#[cfg(not(target_feature = "fma"))]
#[inline]
fn split(a: f64) -> (f64, f64) {
    // Above 2^996 the product with SPLITTER would overflow.
    if a.abs() > 6.696_928_794_914_171e299 {
        let (hi, lo) = split(a * 3.725_290_298_461_914e-9);
        return (hi * 268_435_456.0, lo * 268_435_456.0);
    }
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

#[cfg(target_feature = "fma")]
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[cfg(not(target_feature = "fma"))]
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    /// Normalizes `hi + lo`; non-finite sums keep only the high word.
    #[inline]
    fn norm(hi: f64, lo: f64) -> Dd {
        let (s, e) = quick_two_sum(hi, lo);
        if s.is_finite() {
            Dd { hi: s, lo: e }
        } else {
            Dd { hi: s, lo: 0.0 }
        }
    }

    /// `self + a·b` with one rounding pass; the error is a few units of
    /// 2^-106 times `|self| + |a·b|` rather than of the result.
    #[inline]
    pub fn mul_acc(self, a: Dd, b: Dd) -> Dd {
        let (p, e) = two_prod(a.hi, b.hi);
        let e = e + (a.hi * b.lo + a.lo * b.hi);
        let (s, f) = two_sum(self.hi, p);
        Dd::norm(s, f + (self.lo + e))
    }

    pub const fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    /// Builds from two words, normalizing their sum.
    pub fn from_parts(hi: f64, lo: f64) -> Dd {
        if !hi.is_finite() {
            return Dd { hi, lo: 0.0 };
        }
        let (s, e) = two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        Dd::norm(p, e + self.lo * b)
    }

    /// Multiplies by 2^k exactly (barring overflow or underflow).
    fn ldexp(self, k: i32) -> Dd {
        let half = k / 2;
        let a = 2f64.powi(half);
        let b = 2f64.powi(k - half);
        Dd {
            hi: self.hi * a * b,
            lo: self.lo * a * b,
        }
    }

    /// `exp(r) − 1` for `|r| ≲ 1` by argument halving, a Taylor series and
    /// the doubling identity `e(2x) = 2e(x) + e(x)²`. Used to build the
    /// power-of-two tables.
    fn exp_m1_reduced(r: Dd) -> Dd {
        let s = r.ldexp(-REDUCE);
        let inv = inverse_factorials();
        let mut poly = inv[SERIES_TERMS];
        for c in inv[1..SERIES_TERMS].iter().rev() {
            poly = poly * s + *c;
        }
        let mut sum = poly * s;
        for _ in 0..REDUCE {
            sum = sum.mul_f64(2.0) + sum * sum;
        }
        sum
    }

    /// Splits `x = (4096·m + j)·ln2/4096 + r` with `|r| ≤ ln2/8192` and
    /// returns `(m, 2^(j/4096), exp(r) − 1, k)` where `k = 4096·m + j`.
    fn exp_parts(self) -> (i32, Dd, Dd, i64) {
        let kf = (self.hi * (4096.0 / LN2.hi)).round();
        let r = self - LN2.mul_f64(kf).ldexp(-12);
        let k = kf as i64;
        let j = k.rem_euclid(4096) as usize;
        let (coarse, fine) = pow2_tables();
        let inv = inverse_factorials();
        let mut poly = inv[FAST_TERMS];
        for c in inv[1..FAST_TERMS].iter().rev() {
            poly = poly * r + *c;
        }
        (
            k.div_euclid(4096) as i32,
            coarse[j >> 6] * fine[j & 63],
            poly * r,
            k,
        )
    }

    fn exp_impl(self) -> Dd {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi > 709.78 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Dd::ZERO;
        }
        let (m, t, p, _) = self.exp_parts();
        (t + t * p).ldexp(m)
    }

    /// Exact series when `|x| ≤ ln2/8192`; otherwise `exp(x) − 1`, whose
    /// cancellation costs at most about four digits of the 32.
    fn exp_m1_impl(self) -> Dd {
        if self.hi.abs() < 0.5 {
            let (_, _, p, k) = self.exp_parts();
            if k == 0 {
                return p;
            }
        }
        self.exp_impl() - Dd::ONE
    }

    fn ln_impl(self) -> Dd {
        if self.hi.is_nan() || self.hi < 0.0 {
            return Dd::new(f64::NAN);
        }
        if self.hi == 0.0 {
            return Dd::new(f64::NEG_INFINITY);
        }
        if self.hi.is_infinite() {
            return self;
        }
        // Newton on exp(y) = x, quadratic from a double-precision start.
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp_impl() - Dd::ONE;
        }
        y
    }

    fn sqrt_impl(self) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        if self.hi < 0.0 || self.hi.is_nan() {
            return Dd::new(f64::NAN);
        }
        if self.hi.is_infinite() {
            return self;
        }
        let x = 1.0 / self.hi.sqrt();
        let y = self.hi * x;
        let (yy, e) = two_prod(y, y);
        let resid = (self - Dd { hi: yy, lo: e }).hi;
        Dd::from_parts(y, resid * (x * 0.5))
    }

    fn tanh_impl(self) -> Dd {
        if self.hi.is_nan() {
            return self;
        }
        let a = self.abs_impl();
        let t = if a.hi < 0.25 {
            let em = Dd::exp_m1_reduced(a.mul_f64(2.0));
            em / (em + Dd::new(2.0))
        } else if a.hi > 40.0 {
            Dd::ONE
        } else {
            let e = (-a.mul_f64(2.0)).exp_impl();
            (Dd::ONE - e) / (Dd::ONE + e)
        };
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    fn abs_impl(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    fn floor_impl(self) -> Dd {
        let hi = self.hi.floor();
        if hi == self.hi {
            Dd::norm(hi, self.lo.floor())
        } else {
            Dd { hi, lo: 0.0 }
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl PartialEq for Dd {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
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

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&Dd::to_f64(*self), f)
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
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Dd { hi: s, lo: 0.0 };
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
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
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Dd { hi: p, lo: 0.0 };
        }
        Dd::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi.is_infinite() {
            return Dd::new(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, b: Dd) -> Dd {
        let q = (self / b).trunc();
        self - q * b
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Dd {
            fn $m(&mut self, b: Dd) {
                *self = *self $op b;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);
assign_op!(RemAssign, rem_assign, %);

impl Zero for Dd {
    fn zero() -> Self {
        Dd::ZERO
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::ONE
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        let t = self.trunc();
        t.hi.to_i64().and_then(|h| h.checked_add(t.lo.to_i64()?))
    }
    fn to_u64(&self) -> Option<u64> {
        let t = self.trunc();
        if t.hi < 0.0 {
            return None;
        }
        let h = t.hi.to_u64()?;
        let l = t.lo.to_i64()?;
        if l >= 0 {
            h.checked_add(l as u64)
        } else {
            h.checked_sub(l.unsigned_abs())
        }
    }
    fn to_f64(&self) -> Option<f64> {
        Some(Dd::to_f64(*self))
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Dd::from_parts(hi, (n - hi as i64) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Dd::from_parts(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Dd::new(x))
    }
    fn from_f32(x: f32) -> Option<Self> {
        Some(Dd::new(x as f64))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::new)
    }
}

fn via_f64(x: Dd, f: impl Fn(f64) -> f64) -> Dd {
    Dd::new(f(x.to_f64()))
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::new(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::new(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::new(-0.0)
    }
    fn min_value() -> Self {
        Dd::new(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Dd::new(f64::MAX)
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
        self.floor_impl()
    }
    fn ceil(self) -> Self {
        -(-self).floor_impl()
    }
    fn round(self) -> Self {
        let f = self.floor_impl();
        let diff = self - f;
        if diff.hi > 0.5 || (diff.hi == 0.5 && diff.lo >= 0.0) {
            f + Dd::ONE
        } else {
            f
        }
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
        self.abs_impl()
    }
    fn signum(self) -> Self {
        Dd::new(self.hi.signum())
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
        Dd::ONE / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::ONE;
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
        (n * self.ln_impl()).exp_impl()
    }
    fn sqrt(self) -> Self {
        self.sqrt_impl()
    }
    fn exp(self) -> Self {
        self.exp_impl()
    }
    fn exp2(self) -> Self {
        (self * LN2).exp_impl()
    }
    fn ln(self) -> Self {
        self.ln_impl()
    }
    fn log(self, base: Self) -> Self {
        self.ln_impl() / base.ln_impl()
    }
    fn log2(self) -> Self {
        self.ln_impl() / LN2
    }
    fn log10(self) -> Self {
        self.ln_impl() / Dd::new(10.0).ln_impl()
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
            Dd::ZERO
        }
    }
    fn cbrt(self) -> Self {
        via_f64(self, f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt_impl()
    }
    fn sin(self) -> Self {
        via_f64(self, f64::sin)
    }
    fn cos(self) -> Self {
        via_f64(self, f64::cos)
    }
    fn tan(self) -> Self {
        via_f64(self, f64::tan)
    }
    fn asin(self) -> Self {
        via_f64(self, f64::asin)
    }
    fn acos(self) -> Self {
        via_f64(self, f64::acos)
    }
    fn atan(self) -> Self {
        via_f64(self, f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Dd::new(self.to_f64().atan2(other.to_f64()))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp_m1_impl()
    }
    fn ln_1p(self) -> Self {
        (Dd::ONE + self).ln_impl()
    }
    fn sinh(self) -> Self {
        let e = self.exp_impl();
        (e - e.recip()).mul_f64(0.5)
    }
    fn cosh(self) -> Self {
        let e = self.exp_impl();
        (e + e.recip()).mul_f64(0.5)
    }
    fn tanh(self) -> Self {
        self.tanh_impl()
    }
    fn asinh(self) -> Self {
        via_f64(self, f64::asinh)
    }
    fn acosh(self) -> Self {
        via_f64(self, f64::acosh)
    }
    fn atanh(self) -> Self {
        via_f64(self, f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
    fn epsilon() -> Self {
        Dd::new(4.930_380_657_631_324e-32) // 2^-104
    }
}
