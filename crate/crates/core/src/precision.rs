//! Exact-bit semantics and the scalar error propagation rules.
//!
//! An element carrying `e` exact bits satisfies `|v̂ − v| ≤ |v|·2^-e`, where
//! `v` is the value the same program would produce in exact real arithmetic.
//! Two counts are reserved:
//!
//! - `E_MAX` (24 for single, 53 for double) marks a value that is provably
//!   exact. Any result that went through a rounding step is capped at
//!   `E_MAX − 1`, so exactness is never claimed for a rounded value.
//! - `0` marks a value without a usable bound. Propagation treats it as an
//!   unbounded error, so it poisons every result it flows into (except a
//!   product with an exact zero).
//!
//! Sums and products work on enclosures of the exact value around the
//! computed one ([`Span`]) and only convert to bit counts at the result.
//! Quotients and elementwise functions work on relative bounds.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Working floating-point format of a computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    /// Mantissa width including the implicit bit (`E_MAX`).
    pub const fn max_bits(self) -> u8 {
        match self {
            Precision::Single => 24,
            Precision::Double => 53,
        }
    }

    /// Unit roundoff `u = 2^-E_MAX` for round-to-nearest.
    pub fn unit_roundoff(self) -> f64 {
        match self {
            Precision::Single => f64::from_bits(0x3E70_0000_0000_0000), // 2^-24
            Precision::Double => f64::from_bits(0x3CA0_0000_0000_0000), // 2^-53
        }
    }

    /// Rounds an `f64` to the nearest value representable in this format.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    #[inline]
    pub fn is_representable(self, x: f64) -> bool {
        self.round(x).to_bits() == x.to_bits() || (x.is_nan() && self.round(x).is_nan())
    }

    /// Largest absolute rounding error of a result in the subnormal range.
    fn underflow_abs(self) -> f64 {
        match self {
            Precision::Single => f64::from_bits(0x3690_0000_0000_0000), // 2^-150
            Precision::Double => f64::from_bits(1),                     // 2^-1074
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

/// Count of exact leading mantissa bits of one element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExactBits(pub u8);

impl ExactBits {
    pub fn max(p: Precision) -> Self {
        ExactBits(p.max_bits())
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for ExactBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `floor(-log2(r))` for finite `r > 0`, computed exactly from the bit pattern.
pub(crate) fn floor_neg_log2(r: f64) -> i64 {
    debug_assert!(r > 0.0 && r.is_finite());
    let raw = r.to_bits();
    let exp = ((raw >> 52) & 0x7ff) as i64;
    let mant = raw & ((1u64 << 52) - 1);
    if exp == 0 {
        // subnormal: r = mant * 2^-1074
        let floor_log2 = 63 - mant.leading_zeros() as i64;
        let ceil_log2 = if mant.is_power_of_two() {
            floor_log2
        } else {
            floor_log2 + 1
        };
        return 1074 - ceil_log2;
    }
    let e = exp - 1023;
    if mant == 0 {
        -e
    } else {
        -e - 1
    }
}

/// Converts a relative error bound into exact bits.
///
/// `r = 0` is the only input that yields `E_MAX`; any positive bound is
/// capped at `E_MAX − 1`. NaN and infinite bounds give 0.
pub fn bits_from_rel(r: f64, p: Precision) -> ExactBits {
    ExactBits(bits_from_rel_raw(r, p))
}

#[inline]
pub(crate) fn bits_from_rel_raw(r: f64, p: Precision) -> u8 {
    if r.is_nan() || r.is_infinite() {
        return 0;
    }
    if r <= 0.0 {
        return p.max_bits();
    }
    floor_neg_log2(r).clamp(0, p.max_bits() as i64 - 1) as u8
}

/// The relative bound `2^-e` named by a bit count; `E_MAX` maps to `u`.
///
/// This is the storage-level reading of a bit count. Propagation uses the
/// stricter internal reading in which `E_MAX` is exact and `0` is unbounded.
pub fn rel_from_bits(e: ExactBits, p: Precision) -> f64 {
    let e = e.0.min(p.max_bits());
    if e == p.max_bits() {
        p.unit_roundoff()
    } else {
        exp2i(-(e as i32))
    }
}

#[inline]
fn exp2i(k: i32) -> f64 {
    f64::from_bits(((1023 + k) as u64) << 52)
}

/// Relative bound against the exact value, as used by propagation.
#[inline]
pub(crate) fn rel_bound(e: u8, p: Precision) -> f64 {
    if e >= p.max_bits() {
        0.0
    } else if e == 0 {
        f64::INFINITY
    } else {
        exp2i(-(e as i32))
    }
}

/// Largest deviation `|x̂ − x|` of a computed value `x̂` with `e` exact bits.
///
/// The bound `|x̂ − x| ≤ |x|·r` is relative to the exact `x`; rewritten in
/// terms of the computed value it becomes `|x̂|·r/(1 − r)`.
#[inline]
pub fn abs_bound(x: f64, e: u8, p: Precision) -> f64 {
    if e >= p.max_bits() {
        0.0
    } else if e == 0 || !x.is_finite() {
        f64::INFINITY
    } else {
        let r = exp2i(-(e as i32));
        x.abs() * (r / (1.0 - r))
    }
}

/// Exact bits of a computed value `z` whose exact value is within `abs` of it.
#[inline]
pub fn bits_from_abs(z: f64, abs: f64, p: Precision) -> u8 {
    Span::symmetric(abs).bits(z, p)
}

/// Relative slack when comparing a propagated bound with a power of two.
///
/// Bounds are evaluated in `f64`; a pass-through operation can land a few
/// ulps above `2^-e` and would otherwise lose a whole bit.
const BOUND_SLACK: f64 = 1.0 + 1.0 / (1u64 << 44) as f64;

#[inline]
pub(crate) fn bits_from_bound(r: f64, p: Precision) -> u8 {
    bits_from_rel_raw(r / BOUND_SLACK, p)
}

/// Enclosure of an exact value around the computed one: the exact value
/// lies in `[z + lo, z + hi]`.
///
/// Keeping both sides matters: `e` bits on `x̂` allow the exact value to sit
/// further above `|x̂|` than below it, and a symmetric radius would cost a
/// bit on every pass-through operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl std::ops::Neg for Span {
    type Output = Span;

    #[inline]
    fn neg(self) -> Span {
        Span {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Span {
    pub const EXACT: Span = Span { lo: 0.0, hi: 0.0 };
    pub const UNBOUNDED: Span = Span {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    /// Enclosure implied by `e` exact bits on the computed value `x`.
    #[inline]
    pub fn of(x: f64, e: u8, p: Precision) -> Span {
        if !x.is_finite() || e == 0 {
            return Span::UNBOUNDED;
        }
        // with r < 1 a computed zero forces an exact zero
        if e >= p.max_bits() || x == 0.0 {
            return Span::EXACT;
        }
        let r = exp2i(-(e as i32));
        let a = x.abs();
        let (below, above) = (a * r / (1.0 + r), a * r / (1.0 - r));
        if x > 0.0 {
            Span { lo: -below, hi: above }
        } else {
            Span { lo: -above, hi: below }
        }
    }

    #[inline]
    pub fn symmetric(a: f64) -> Span {
        Span { lo: -a, hi: a }
    }

    #[inline]
    pub fn is_exact(self) -> bool {
        self.lo == 0.0 && self.hi == 0.0
    }

    #[inline]
    pub fn is_bounded(self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    /// Largest `|exact − computed|`.
    #[inline]
    pub fn radius(self) -> f64 {
        (-self.lo).max(self.hi)
    }

    /// Enclosure after the computed value moved by `d`.
    #[inline]
    pub fn shift(self, d: f64) -> Span {
        Span {
            lo: self.lo - d,
            hi: self.hi - d,
        }
    }

    #[inline]
    pub fn widen(self, a: f64) -> Span {
        Span {
            lo: self.lo - a,
            hi: self.hi + a,
        }
    }

    /// Scales the exact and computed values by the exact constant `c`.
    #[inline]
    pub fn scale(self, c: f64) -> Span {
        if c == 0.0 {
            return Span::EXACT;
        }
        let (a, b) = (self.lo * c, self.hi * c);
        if c > 0.0 {
            Span { lo: a, hi: b }
        } else {
            Span { lo: b, hi: a }
        }
    }

    /// Exact bits of the computed value `z` under this enclosure.
    pub fn bits(self, z: f64, p: Precision) -> u8 {
        if !z.is_finite() || self.lo.is_nan() || self.hi.is_nan() {
            return 0;
        }
        if self.is_exact() {
            return p.max_bits();
        }
        let (a, b) = (z + self.lo, z + self.hi);
        if a <= 0.0 && b >= 0.0 {
            return 0;
        }
        // |z/v − 1| is monotone on a sign-definite interval
        let r = (self.lo.abs() / a.abs()).max(self.hi.abs() / b.abs());
        bits_from_bound(r, p)
    }
}

impl std::ops::Add for Span {
    type Output = Span;

    #[inline]
    fn add(self, o: Span) -> Span {
        Span {
            lo: self.lo + o.lo,
            hi: self.hi + o.hi,
        }
    }
}

/// Absolute rounding error of storing `z` after one correctly rounded step.
#[inline]
pub fn rounding_abs(z: f64, p: Precision) -> f64 {
    (z.abs() * p.unit_roundoff()).max(p.underflow_abs())
}

/// `a * b` for non-negative magnitudes/bounds where a zero factor wins over ∞.
#[inline]
fn mul0(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// Error-free transformation: `a + b = s + t` exactly, `s = fl(a + b)`.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let t = (a - (s - bb)) + (b - bb);
    (s, t)
}

/// Error-free transformation: `a * b = p + e` exactly, `p = fl(a * b)`.
///
/// Dekker's splitting; valid while `|a|, |b| < 2^996` and the product stays
/// clear of the underflow range. Avoids `mul_add`, which falls back to a slow
/// software fma on targets without the instruction.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    if !p.is_finite() {
        return (p, 0.0);
    }
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    let e = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    (p, e)
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    const FACTOR: f64 = 134_217_729.0; // 2^27 + 1
    let c = FACTOR * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// `fl(x*y) == x*y` exactly for operands representable in `p`.
#[inline]
fn product_is(p: Precision, x: f64, y: f64, target: f64) -> bool {
    match p {
        // two 24-bit significands multiply exactly in f64
        Precision::Single => x * y == target,
        Precision::Double => {
            let (hi, lo) = two_prod(x, y);
            hi == target && lo == 0.0 && (hi == 0.0 || hi.abs() >= DEKKER_MIN)
        }
    }
}

/// Below this magnitude Dekker's error term may itself be rounded.
const DEKKER_MIN: f64 = 1.0e-290;

/// `z = fl(x + y)` and the enclosure of `x + y` around `z`.
#[inline]
pub fn sum_rounded(p: Precision, x: f64, y: f64) -> (f64, Span) {
    let (s, t) = two_sum(x, y);
    let z = p.round(s);
    if !z.is_finite() {
        return (z, Span::UNBOUNDED);
    }
    (z, Span::EXACT.shift((z - s) - t))
}

/// `z = fl(x * y)` and the enclosure of `x * y` around `z`.
#[inline]
pub fn prod_rounded(p: Precision, x: f64, y: f64) -> (f64, Span) {
    match p {
        Precision::Single => {
            let e = x * y;
            let z = p.round(e);
            if !z.is_finite() {
                return (z, Span::UNBOUNDED);
            }
            (z, Span::EXACT.shift(z - e))
        }
        Precision::Double => {
            let (z, lo) = two_prod(x, y);
            if !z.is_finite() {
                return (z, Span::UNBOUNDED);
            }
            if (z == 0.0 && lo == 0.0 && (x == 0.0 || y == 0.0)) || (z.abs() >= DEKKER_MIN && lo.is_finite()) {
                (z, Span::EXACT.shift(-lo))
            } else {
                (z, Span::symmetric(rounding_abs(z, p)))
            }
        }
    }
}

/// Rounded sum with the enclosure of the exact sum of the exact operands.
#[inline]
pub fn add_span(p: Precision, x: f64, sx: Span, y: f64, sy: Span) -> (f64, Span) {
    let (z, round) = sum_rounded(p, x, y);
    (z, sx + sy + round)
}

/// Rounded product with the enclosure of the exact product.
#[inline]
pub fn mul_span(p: Precision, x: f64, sx: Span, y: f64, sy: Span) -> (f64, Span) {
    let (z, round) = prod_rounded(p, x, y);
    (z, product_span(x, sx, y, sy) + round)
}

/// Enclosure of `(x̂ + ex)(ŷ + ey) − x̂ŷ`; extremes sit at the corners.
#[inline]
fn product_span(x: f64, sx: Span, y: f64, sy: Span) -> Span {
    let zero_x = x == 0.0 && sx.is_exact();
    let zero_y = y == 0.0 && sy.is_exact();
    if zero_x || zero_y {
        return Span::EXACT;
    }
    if sx.is_exact() {
        return sy.scale(x);
    }
    if sy.is_exact() {
        return sx.scale(y);
    }
    if !sx.is_bounded() || !sy.is_bounded() {
        return Span::UNBOUNDED;
    }
    let c = |ex: f64, ey: f64| x * ey + y * ex + ex * ey;
    let k = [c(sx.lo, sy.lo), c(sx.lo, sy.hi), c(sx.hi, sy.lo), c(sx.hi, sy.hi)];
    Span {
        lo: k.iter().copied().fold(f64::INFINITY, f64::min),
        hi: k.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `z = fl(x / c)` for an exact non-zero constant `c`, with the enclosure of the exact quotient.
#[inline]
pub fn div_exact_span(p: Precision, x: f64, sx: Span, c: f64) -> (f64, Span) {
    let z = p.round(x / c);
    if !z.is_finite() || !sx.is_bounded() {
        return (
            z,
            if x == 0.0 && sx.is_exact() {
                Span::EXACT
            } else {
                Span::UNBOUNDED
            },
        );
    }
    let base = Span {
        lo: sx.lo / c,
        hi: sx.hi / c,
    };
    let base = if c < 0.0 { -base } else { base };
    let round = if product_is(p, z, c, x) {
        Span::EXACT
    } else {
        Span::symmetric(rounding_abs(z, p))
    };
    (z, base + round)
}

/// Enclosure of `(d + e)² − d²` for `e` in `s`, before rounding the square.
#[inline]
pub fn square_span(d: f64, s: Span) -> Span {
    if s.is_exact() {
        return Span::EXACT;
    }
    if !s.is_bounded() {
        return Span {
            lo: -d * d,
            hi: f64::INFINITY,
        };
    }
    let f = |e: f64| 2.0 * d * e + e * e;
    let (a, b) = (f(s.lo), f(s.hi));
    let lo = if s.lo <= -d && -d <= s.hi { -d * d } else { a.min(b) };
    Span { lo, hi: a.max(b) }
}

/// A scalar paired with its exact-bit count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tracked {
    pub value: f64,
    pub bits: u8,
}

impl Tracked {
    pub fn new(value: f64, bits: u8) -> Self {
        Tracked { value, bits }
    }

    /// An exact literal; the value is rounded into `p` first.
    pub fn exact(value: f64, p: Precision) -> Self {
        let v = p.round(value);
        Tracked {
            value: v,
            bits: if v.is_finite() { p.max_bits() } else { 0 },
        }
    }

    #[inline]
    pub fn span(self, p: Precision) -> Span {
        Span::of(self.value, self.bits, p)
    }

    #[inline]
    pub fn from_span(z: f64, s: Span, p: Precision) -> Self {
        Tracked::new(z, s.bits(z, p))
    }
}

/// Bits of `z = fl(x + y)` (pass `−y` for subtraction).
pub fn combine_addsub(x: f64, ex: ExactBits, y: f64, ey: ExactBits, z: f64, p: Precision) -> ExactBits {
    if !z.is_finite() {
        return ExactBits(0);
    }
    let (s, t) = two_sum(x, y);
    let s = Span::of(x, ex.0, p) + Span::of(y, ey.0, p) + Span::EXACT.shift((z - s) - t);
    ExactBits(s.bits(z, p))
}

/// Value-free bits of a product or quotient, assuming the result was rounded.
pub fn combine_muldiv(ex: ExactBits, ey: ExactBits, p: Precision) -> ExactBits {
    let rx = rel_bound(ex.0, p);
    let ry = rel_bound(ey.0, p);
    let prop = rx + ry + mul0(rx, ry);
    let u = p.unit_roundoff();
    ExactBits(bits_from_bound(compose_rel(prop, u), p))
}

/// `(1 + a)(1 + b) − 1` for non-negative relative bounds.
#[inline]
fn compose_rel(a: f64, b: f64) -> f64 {
    a + b + mul0(a, b)
}

pub fn add(p: Precision, x: Tracked, y: Tracked) -> Tracked {
    let (z, s) = add_span(p, x.value, x.span(p), y.value, y.span(p));
    Tracked::from_span(z, s, p)
}

pub fn sub(p: Precision, x: Tracked, y: Tracked) -> Tracked {
    add(p, x, Tracked::new(-y.value, y.bits))
}

pub fn mul(p: Precision, x: Tracked, y: Tracked) -> Tracked {
    let (z, s) = mul_span(p, x.value, x.span(p), y.value, y.span(p));
    Tracked::from_span(z, s, p)
}

pub fn div(p: Precision, x: Tracked, y: Tracked) -> Tracked {
    let z = p.round(x.value / y.value);
    if !z.is_finite() {
        return Tracked::new(z, 0);
    }
    // x̂ = 0 with a bound means the exact numerator is 0 as well
    if x.value == 0.0 && x.bits > 0 && y.value != 0.0 && y.bits > 0 {
        return Tracked::new(z, p.max_bits());
    }
    let rx = rel_bound(x.bits, p);
    let ry = rel_bound(y.bits, p);
    let prop = if ry >= 1.0 {
        f64::INFINITY
    } else {
        (rx + ry) / (1.0 - ry)
    };
    let exact = product_is(p, z, y.value, x.value);
    Tracked::new(z, finish_rel(z, prop, if exact { 0.0 } else { 1.0 }, p))
}

/// Bits of `z` given a propagated relative bound and a rounding step of
/// `ulps_half` units of `u` (0 when the result is known to be exact).
fn finish_rel(z: f64, prop: f64, ulps_half: f64, p: Precision) -> u8 {
    if !z.is_finite() || prop.is_nan() {
        return 0;
    }
    if ulps_half == 0.0 {
        return bits_from_bound(prop, p);
    }
    let round = if z == 0.0 {
        f64::INFINITY
    } else {
        (ulps_half * p.unit_roundoff()).max(p.underflow_abs() / z.abs())
    };
    bits_from_bound(compose_rel(prop, round), p)
}

/// Elementwise functions with a known conditioning rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryFn {
    Relu,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Neg,
    Abs,
}

impl UnaryFn {
    pub const ALL: [UnaryFn; 8] = [
        UnaryFn::Relu,
        UnaryFn::Exp,
        UnaryFn::Log,
        UnaryFn::Tanh,
        UnaryFn::Sigmoid,
        UnaryFn::Sqrt,
        UnaryFn::Neg,
        UnaryFn::Abs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Relu => "relu",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Sqrt => "sqrt",
            UnaryFn::Neg => "neg",
            UnaryFn::Abs => "abs",
        }
    }

    /// The function evaluated in `f64`, before rounding to the working format.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            UnaryFn::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            UnaryFn::Exp => x.exp(),
            UnaryFn::Log => {
                if x > 0.0 {
                    x.ln()
                } else {
                    f64::NAN
                }
            }
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Sqrt => {
                if x >= 0.0 {
                    x.sqrt()
                } else {
                    f64::NAN
                }
            }
            UnaryFn::Neg => -x,
            UnaryFn::Abs => x.abs(),
        }
    }

    /// First-order condition number `|x·f′(x)/f(x)|`.
    pub fn condition_number(self, x: f64) -> f64 {
        match self {
            UnaryFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryFn::Exp => x.abs(),
            UnaryFn::Log => 1.0 / x.ln().abs(),
            UnaryFn::Tanh => {
                if x == 0.0 {
                    1.0
                } else {
                    let t = x.tanh();
                    (x * (1.0 - t * t) / t).abs()
                }
            }
            UnaryFn::Sigmoid => (x * (1.0 - sigmoid(x))).abs(),
            UnaryFn::Sqrt => 0.5,
            UnaryFn::Neg | UnaryFn::Abs => 1.0,
        }
    }
}

impl fmt::Display for UnaryFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnaryFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UnaryFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown function `{s}`")))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `f` in working precision and derives the result's exact bits.
pub fn unary(p: Precision, f: UnaryFn, x: Tracked) -> Tracked {
    let max = p.max_bits();
    let (xv, e) = (x.value, x.bits);
    match f {
        UnaryFn::Neg => return Tracked::new(-xv, if xv.is_finite() { e } else { 0 }),
        UnaryFn::Abs => return Tracked::new(xv.abs(), if xv.is_finite() { e } else { 0 }),
        UnaryFn::Relu => {
            return if xv.is_nan() {
                Tracked::new(xv, 0)
            } else if xv > 0.0 {
                Tracked::new(xv, if xv.is_finite() { e } else { 0 })
            } else if xv < 0.0 {
                // with any bound the exact input is negative too
                Tracked::new(0.0, if e > 0 { max } else { 0 })
            } else {
                Tracked::new(0.0, e)
            };
        }
        _ => {}
    }

    let z = p.round(f.eval(xv));
    if !z.is_finite() || !xv.is_finite() {
        return Tracked::new(z, 0);
    }
    let ax = abs_bound(xv, e, p);
    let r = rel_bound(e, p);
    // relative error of f(x̂) against f(x), before the final rounding
    let prop = match f {
        UnaryFn::Exp => ax.exp_m1(),
        UnaryFn::Log => {
            if r >= 1.0 {
                f64::INFINITY
            } else {
                let a = -(-r).ln_1p();
                let mag = xv.ln().abs();
                if a == 0.0 {
                    0.0
                } else if a >= mag {
                    f64::INFINITY
                } else {
                    a / (mag - a)
                }
            }
        }
        UnaryFn::Tanh => {
            if ax == 0.0 {
                0.0
            } else if ax.is_infinite() {
                f64::INFINITY
            } else {
                let xi = (xv.abs() - ax).max(0.0);
                let sech = 1.0 / xi.cosh();
                let a = ax * sech * sech;
                let mag = z.abs();
                let mvt = if a >= mag { f64::INFINITY } else { a / (mag - a) };
                mvt.min(r)
            }
        }
        UnaryFn::Sigmoid => {
            if ax.is_infinite() {
                f64::INFINITY
            } else {
                let slope = 1.0 - sigmoid(xv - ax);
                (ax * slope).exp_m1()
            }
        }
        UnaryFn::Sqrt => {
            if r >= 1.0 {
                f64::INFINITY
            } else {
                1.0 - (1.0 - r).sqrt()
            }
        }
        UnaryFn::Relu | UnaryFn::Neg | UnaryFn::Abs => unreachable!(),
    };

    // results known to be exact: exp(0) = 1, log(1) = 0, sqrt of a square
    let exact = match f {
        UnaryFn::Exp => xv == 0.0,
        UnaryFn::Log => xv == 1.0,
        UnaryFn::Tanh | UnaryFn::Sigmoid => xv == 0.0,
        UnaryFn::Sqrt => product_is(p, z, z, xv),
        _ => false,
    };
    if exact && prop == 0.0 {
        return Tracked::new(z, max);
    }
    if f == UnaryFn::Sqrt && xv == 0.0 && e > 0 {
        // a bounded zero is an exact zero
        return Tracked::new(z, max);
    }
    // sqrt is correctly rounded; libm transcendentals are only faithful
    let half_ulps = match f {
        UnaryFn::Sqrt => {
            if exact {
                0.0
            } else {
                1.0
            }
        }
        _ => 2.0,
    };
    Tracked::new(z, finish_rel(z, prop, half_ulps, p))
}

/// Bits of `f(x)` for a value `x` carrying `ex` exact bits.
pub fn unary_bits(f: UnaryFn, x: f64, ex: ExactBits, p: Precision) -> ExactBits {
    ExactBits(unary(p, f, Tracked::new(x, ex.0)).bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Precision = Precision::Single;
    const D: Precision = Precision::Double;

    fn pow2(k: i32) -> f64 {
        2f64.powi(k)
    }

    #[test]
    fn unit_roundoff_is_power_of_two() {
        assert_eq!(S.unit_roundoff(), pow2(-24));
        assert_eq!(D.unit_roundoff(), pow2(-53));
        assert_eq!(S.underflow_abs(), pow2(-150));
    }

    #[test]
    fn floor_neg_log2_matches_float_log() {
        for &r in &[0.3f64, 1.0, 0.5, 0.75, 1e-5, 3.0, 1e-310, 5e-324, 2.5e-320] {
            let expect = (-r.log2()).floor() as i64;
            assert_eq!(floor_neg_log2(r), expect, "r = {r}");
        }
        assert_eq!(floor_neg_log2(pow2(-10)), 10);
        assert_eq!(floor_neg_log2(pow2(-10) * 1.0000001), 9);
    }

    #[test]
    fn bits_from_rel_examples() {
        assert_eq!(bits_from_rel(0.0, S), ExactBits(24));
        assert_eq!(bits_from_rel(pow2(-10), S), ExactBits(10));
        assert_eq!(bits_from_rel(0.3, S), ExactBits(1));
        assert_eq!(bits_from_rel(f64::NAN, S), ExactBits(0));
        assert_eq!(bits_from_rel(7.0, S), ExactBits(0));
        // a positive bound never reaches the exact marker
        assert_eq!(bits_from_rel(pow2(-40), S), ExactBits(23));
        assert_eq!(bits_from_rel(pow2(-40), D), ExactBits(40));
    }

    #[test]
    fn rel_from_bits_examples() {
        assert_eq!(rel_from_bits(ExactBits(24), S), pow2(-24));
        assert_eq!(rel_from_bits(ExactBits(0), S), 1.0);
        assert_eq!(rel_from_bits(ExactBits(10), S), pow2(-10));
        assert_eq!(rel_from_bits(ExactBits(53), D), pow2(-53));
    }

    #[test]
    fn round_trip_loses_at_most_one_bit() {
        for p in [S, D] {
            for e in 1..p.max_bits() {
                let back = bits_from_rel(rel_from_bits(ExactBits(e), p), p).0;
                assert_eq!(back, e);
            }
            let top = bits_from_rel(rel_from_bits(ExactBits::max(p), p), p).0;
            assert_eq!(top, p.max_bits() - 1);
        }
    }

    #[test]
    fn addsub_adding_exact_zero_keeps_exactness() {
        assert_eq!(
            combine_addsub(1.0, ExactBits(24), 0.0, ExactBits(24), 1.0, S),
            ExactBits(24)
        );
    }

    #[test]
    fn addsub_exact_cancellation_is_exact() {
        // Sterbenz: the subtraction is exact and so are the operands
        let y = -(1.0 - pow2(-20));
        assert_eq!(
            combine_addsub(1.0, ExactBits(24), y, ExactBits(24), pow2(-20), S),
            ExactBits(24)
        );
    }

    #[test]
    fn addsub_cancellation_amplifies_inherited_error() {
        // operands carry 22 bits: bound (2^-22 + 2^-22)/2^-20 ≈ 2^-1
        let y = -(1.0 - pow2(-20));
        let e = combine_addsub(1.0, ExactBits(22), y, ExactBits(22), pow2(-20), S);
        assert_eq!(e, ExactBits(0));
        let e = combine_addsub(1.0, ExactBits(23), y, ExactBits(23), pow2(-20), S);
        assert_eq!(e, ExactBits(1));
    }

    #[test]
    fn addsub_with_insignificant_operand_is_insignificant() {
        assert_eq!(
            combine_addsub(1.0, ExactBits(0), 1.0, ExactBits(24), 2.0, S),
            ExactBits(0)
        );
    }

    #[test]
    fn addsub_half_significant_operand() {
        // x = 1 with one bit: exact x in [2/3, 2], sum in [5/3, 3], bound 1/3 → 1 bit;
        // two bits: exact x in [4/5, 4/3], sum in [9/5, 7/3], bound 1/7 → 2 bits
        assert_eq!(
            combine_addsub(1.0, ExactBits(1), 1.0, ExactBits(24), 2.0, S),
            ExactBits(1)
        );
        assert_eq!(
            combine_addsub(1.0, ExactBits(2), 1.0, ExactBits(24), 2.0, S),
            ExactBits(2)
        );
    }

    #[test]
    fn addsub_zero_result() {
        assert_eq!(
            combine_addsub(3.0, ExactBits(24), -3.0, ExactBits(24), 0.0, S),
            ExactBits(24)
        );
        assert_eq!(
            combine_addsub(3.0, ExactBits(20), -3.0, ExactBits(24), 0.0, S),
            ExactBits(0)
        );
        assert_eq!(
            combine_addsub(1.0, ExactBits(24), 1.0, ExactBits(24), f64::INFINITY, S),
            ExactBits(0)
        );
    }

    #[test]
    fn muldiv_examples() {
        // exact operands, one rounding: rel u → capped below E_MAX
        assert_eq!(combine_muldiv(ExactBits(24), ExactBits(24), S), ExactBits(23));
        assert_eq!(combine_muldiv(ExactBits(0), ExactBits(24), S), ExactBits(0));
        assert_eq!(combine_muldiv(ExactBits(0), ExactBits(13), S), ExactBits(0));
        // 2^-10 + u → just above 2^-10
        assert_eq!(combine_muldiv(ExactBits(10), ExactBits(24), S), ExactBits(9));
        // 2^-10 + 2^-10 = 2^-9 exactly, plus rounding
        assert_eq!(combine_muldiv(ExactBits(10), ExactBits(10), S), ExactBits(8));
    }

    #[test]
    fn mul_exact_products() {
        let two = Tracked::exact(2.0, S);
        let x = Tracked::exact(1.5, S);
        assert_eq!(mul(S, two, x), Tracked::new(3.0, 24));
        let third = Tracked::exact(1.0 / 3.0, S);
        let r = mul(S, third, Tracked::exact(3.0, S));
        assert_eq!(r.bits, 23);
        // exact zero annihilates even an insignificant factor
        let z = mul(S, Tracked::exact(0.0, S), Tracked::new(5.0, 0));
        assert_eq!(z, Tracked::new(0.0, 24));
    }

    #[test]
    fn mul_underflow_loses_everything() {
        let tiny = Tracked::exact(1e-30, S);
        let r = mul(S, tiny, tiny);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.bits, 0);
    }

    #[test]
    fn div_rules() {
        let r = div(S, Tracked::exact(1.0, S), Tracked::exact(4.0, S));
        assert_eq!(r, Tracked::new(0.25, 24));
        let r = div(S, Tracked::exact(1.0, S), Tracked::exact(3.0, S));
        assert_eq!(r.bits, 23);
        let r = div(S, Tracked::exact(1.0, S), Tracked::exact(0.0, S));
        assert!(r.value.is_infinite());
        assert_eq!(r.bits, 0);
        let r = div(S, Tracked::new(1.0, 12), Tracked::new(3.0, 12));
        // (2^-12 + 2^-12)/(1 − 2^-12) + u > 2^-11
        assert_eq!(r.bits, 10);
    }

    #[test]
    fn unary_examples() {
        assert_eq!(unary_bits(UnaryFn::Relu, 2.0, ExactBits(20), S), ExactBits(20));
        assert_eq!(unary_bits(UnaryFn::Neg, -3.0, ExactBits(7), S), ExactBits(7));
        // exact input, exp only suffers its own faithful rounding (2u)
        assert_eq!(unary_bits(UnaryFn::Exp, 16.0, ExactBits(24), S), ExactBits(23));
        // inherited error amplified by |x| = 16: 16·2^-20 → 2^-16
        assert_eq!(unary_bits(UnaryFn::Exp, 16.0, ExactBits(20), S), ExactBits(15));
        assert_eq!(unary_bits(UnaryFn::Exp, 0.0, ExactBits(24), S), ExactBits(24));
        assert_eq!(unary_bits(UnaryFn::Sqrt, 4.0, ExactBits(24), S), ExactBits(24));
        assert_eq!(unary_bits(UnaryFn::Sqrt, 2.0, ExactBits(24), S), ExactBits(23));
        assert_eq!(unary_bits(UnaryFn::Sqrt, 2.0, ExactBits(10), S), ExactBits(10));
    }

    #[test]
    fn relu_sign_rules() {
        assert_eq!(unary(S, UnaryFn::Relu, Tracked::new(-1.0, 3)), Tracked::new(0.0, 24));
        assert_eq!(unary(S, UnaryFn::Relu, Tracked::new(-1.0, 0)), Tracked::new(0.0, 0));
        assert_eq!(unary(S, UnaryFn::Relu, Tracked::new(0.0, 9)), Tracked::new(0.0, 9));
    }

    #[test]
    fn log_near_one_loses_significance() {
        assert_eq!(unary_bits(UnaryFn::Log, 1.0, ExactBits(23), S), ExactBits(0));
        // exactly one: ln 1 = 0 is computed exactly
        assert_eq!(unary_bits(UnaryFn::Log, 1.0, ExactBits(24), S), ExactBits(24));
        let r = unary(S, UnaryFn::Log, Tracked::exact(-1.0, S));
        assert!(r.value.is_nan());
        assert_eq!(r.bits, 0);
        let r = unary(S, UnaryFn::Log, Tracked::exact(0.0, S));
        assert!(r.value.is_nan());
        assert_eq!(r.bits, 0);
        let r = unary(S, UnaryFn::Sqrt, Tracked::exact(-4.0, S));
        assert!(r.value.is_nan());
        assert_eq!(r.bits, 0);
    }

    #[test]
    fn condition_numbers() {
        assert_eq!(UnaryFn::Exp.condition_number(-3.0), 3.0);
        assert_eq!(UnaryFn::Sqrt.condition_number(9.0), 0.5);
        assert!(UnaryFn::Log.condition_number(1.0).is_infinite());
        assert!((UnaryFn::Tanh.condition_number(1e-9) - 1.0).abs() < 1e-12);
        assert!(UnaryFn::Sigmoid.condition_number(0.0) == 0.0);
    }

    #[test]
    fn precision_parses() {
        assert_eq!("single".parse::<Precision>().unwrap(), S);
        assert_eq!("Double".parse::<Precision>().unwrap(), D);
        assert!("quad".parse::<Precision>().is_err());
        assert_eq!("sigmoid".parse::<UnaryFn>().unwrap(), UnaryFn::Sigmoid);
    }
}
