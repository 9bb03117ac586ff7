//! Exact fixed-point arithmetic.
//!
//! A [`FixedPointType`] describes a two's-complement (or unsigned) grid with
//! step `2^(I-W)`. Values are stored as integer payloads, never as floats.
//! Payloads are `i128`, so types are limited to [`MAX_WIDTH`] bits.

mod format;
mod interval;
pub mod real;

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use format::WeightFormat;
pub use interval::{interval_propagate, Interval, IntervalOp};
pub use real::Real;

/// Widest supported payload.
pub const MAX_WIDTH: u32 = 126;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxpError {
    #[error("invalid fixed-point type: {0}")]
    InvalidType(String),
    #[error("cannot parse type `{0}`")]
    BadSyntax(String),
    #[error("cannot parse number `{0}`")]
    BadNumber(String),
    #[error("payload {payload} out of range for {ty}")]
    PayloadOutOfRange { payload: i128, ty: FixedPointType },
    #[error("value is not finite")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Rounding {
    /// Floor toward negative infinity on the payload grid.
    #[default]
    Trn,
    /// Round to nearest, ties toward positive infinity.
    Rnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Overflow {
    #[default]
    Wrap,
    Sat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FixedPointType {
    width: u32,
    int_bits: i32,
    signed: bool,
    rounding: Rounding,
    overflow: Overflow,
}

impl FixedPointType {
    pub fn new(width: u32, int_bits: i32, signed: bool) -> Result<Self, FxpError> {
        if width == 0 || width > MAX_WIDTH {
            return Err(FxpError::InvalidType(format!(
                "width {width} outside 1..={MAX_WIDTH}"
            )));
        }
        Ok(Self {
            width,
            int_bits,
            signed,
            rounding: Rounding::default(),
            overflow: Overflow::default(),
        })
    }

    pub fn signed(width: u32, int_bits: i32) -> Result<Self, FxpError> {
        Self::new(width, int_bits, true)
    }

    pub fn unsigned(width: u32, int_bits: i32) -> Result<Self, FxpError> {
        Self::new(width, int_bits, false)
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_overflow(mut self, overflow: Overflow) -> Self {
        self.overflow = overflow;
        self
    }

    /// Same grid and range, different rounding/overflow modes.
    pub fn with_modes(self, rounding: Rounding, overflow: Overflow) -> Self {
        self.with_rounding(rounding).with_overflow(overflow)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn int_bits(&self) -> i32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> i32 {
        self.width as i32 - self.int_bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn overflow(&self) -> Overflow {
        self.overflow
    }

    /// Exponent of the value step: LSB = 2^lsb_exp.
    pub fn lsb_exp(&self) -> i32 {
        self.int_bits - self.width as i32
    }

    pub fn min_payload(&self) -> i128 {
        if self.signed {
            -(1i128 << (self.width - 1))
        } else {
            0
        }
    }

    pub fn max_payload(&self) -> i128 {
        if self.signed {
            (1i128 << (self.width - 1)) - 1
        } else {
            (1i128 << self.width) - 1
        }
    }

    pub fn contains_payload(&self, p: i128) -> bool {
        p >= self.min_payload() && p <= self.max_payload()
    }

    /// The representable range as an interval on this type's grid.
    pub fn range(&self) -> Interval {
        Interval::new(self.min_payload(), self.max_payload(), self.lsb_exp())
    }

    /// True when every value of `other` is exactly representable here.
    pub fn covers(&self, other: &FixedPointType) -> bool {
        self.lsb_exp() <= other.lsb_exp() && self.range().contains_interval(&other.range())
    }

    /// Same grid and range, ignoring rounding/overflow modes.
    pub fn same_grid(&self, other: &FixedPointType) -> bool {
        self.width == other.width && self.int_bits == other.int_bits && self.signed == other.signed
    }

    /// Applies this type's overflow rule to an integer on its grid.
    pub fn fit(&self, v: i128) -> i128 {
        if self.contains_payload(v) {
            return v;
        }
        match self.overflow {
            Overflow::Sat => v.clamp(self.min_payload(), self.max_payload()),
            Overflow::Wrap => {
                let mask = (1i128 << self.width) - 1;
                let u = v & mask;
                if self.signed && u >= (1i128 << (self.width - 1)) {
                    u - (1i128 << self.width)
                } else {
                    u
                }
            }
        }
    }

    fn fit_big(&self, v: &BigInt) -> i128 {
        if let Some(small) = v.to_i128() {
            return self.fit(small);
        }
        match self.overflow {
            Overflow::Sat => {
                if v.sign() == num_bigint::Sign::Minus {
                    self.min_payload()
                } else {
                    self.max_payload()
                }
            }
            Overflow::Wrap => {
                let modulus = BigInt::one() << self.width as usize;
                let r = v.mod_floor(&modulus).to_i128().expect("reduced below 2^126");
                self.fit(r)
            }
        }
    }
}

impl fmt::Display for FixedPointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "fixed<{},{},{},{},{}>",
            self.width,
            self.int_bits,
            if self.signed { "s" } else { "u" },
            match self.rounding {
                Rounding::Trn => "TRN",
                Rounding::Rnd => "RND",
            },
            match self.overflow {
                Overflow::Wrap => "WRAP",
                Overflow::Sat => "SAT",
            }
        )
    }
}

impl FromStr for FixedPointType {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FxpError::BadSyntax(s.to_string());
        let body = s
            .trim()
            .strip_prefix("fixed<")
            .and_then(|r| r.strip_suffix('>'))
            .ok_or_else(bad)?;
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() < 3 || parts.len() > 5 {
            return Err(bad());
        }
        let width: u32 = parts[0].parse().map_err(|_| bad())?;
        let int_bits: i32 = parts[1].parse().map_err(|_| bad())?;
        let signed = match parts[2] {
            "s" => true,
            "u" => false,
            _ => return Err(bad()),
        };
        let mut t = FixedPointType::new(width, int_bits, signed)?;
        let mut seen_round = false;
        let mut seen_ovf = false;
        for p in &parts[3..] {
            match p.to_ascii_uppercase().as_str() {
                "TRN" if !seen_round && !seen_ovf => {
                    t.rounding = Rounding::Trn;
                    seen_round = true;
                }
                "RND" if !seen_round && !seen_ovf => {
                    t.rounding = Rounding::Rnd;
                    seen_round = true;
                }
                "WRAP" if !seen_ovf => {
                    t.overflow = Overflow::Wrap;
                    seen_ovf = true;
                }
                "SAT" if !seen_ovf => {
                    t.overflow = Overflow::Sat;
                    seen_ovf = true;
                }
                _ => return Err(bad()),
            }
        }
        Ok(t)
    }
}

impl Serialize for FixedPointType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FixedPointType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedValue {
    payload: i128,
    ty: FixedPointType,
}

impl FixedValue {
    pub fn new(payload: i128, ty: FixedPointType) -> Result<Self, FxpError> {
        if !ty.contains_payload(payload) {
            return Err(FxpError::PayloadOutOfRange { payload, ty });
        }
        Ok(Self { payload, ty })
    }

    pub fn zero(ty: FixedPointType) -> Self {
        Self { payload: 0, ty }
    }

    pub fn payload(&self) -> i128 {
        self.payload
    }

    pub fn ty(&self) -> FixedPointType {
        self.ty
    }

    pub fn value(&self) -> Real {
        real::real_from_scaled(self.payload, self.ty.lsb_exp())
    }

    pub fn to_f64(&self) -> f64 {
        self.payload as f64 * 2f64.powi(self.ty.lsb_exp())
    }

    /// True when both denote the same real number, regardless of type.
    pub fn value_eq(&self, other: &FixedValue) -> bool {
        let e = self.ty.lsb_exp().min(other.ty.lsb_exp());
        shl_exact(self.payload, self.ty.lsb_exp() - e) == shl_exact(other.payload, other.ty.lsb_exp() - e)
    }
}

impl fmt::Display for FixedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&real::real_to_string(&self.value()))
    }
}

fn shl_exact(p: i128, k: i32) -> BigInt {
    BigInt::from(p) << k as usize
}

/// Represents `x` under `t`'s rounding rule, then its overflow rule.
pub fn quantize(x: &Real, t: FixedPointType) -> FixedValue {
    let scaled = real::scale_pow2(x, -t.lsb_exp());
    let int = round_rational(&scaled, t.rounding);
    FixedValue { payload: t.fit_big(&int), ty: t }
}

/// [`quantize`] for binary64 inputs (converted exactly first).
pub fn quantize_f64(x: f64, t: FixedPointType) -> Result<FixedValue, FxpError> {
    let r = real::real_from_f64(x).ok_or(FxpError::NonFinite)?;
    Ok(quantize(&r, t))
}

fn round_rational(x: &Real, mode: Rounding) -> BigInt {
    match mode {
        Rounding::Trn => x.floor().to_integer(),
        Rounding::Rnd => (x + Real::new(BigInt::one(), BigInt::from(2))).floor().to_integer(),
    }
}

/// Moves an integer from grid `2^from_exp` to `t`'s grid, rounding with `t`'s
/// rule, without applying overflow.
pub(crate) fn regrid(payload: i128, from_exp: i32, t: &FixedPointType) -> BigInt {
    let shift = t.lsb_exp() - from_exp;
    if shift <= 0 {
        let k = (-shift) as u32;
        if k < 127 {
            if let Some(v) = payload.checked_mul(1i128 << k) {
                return BigInt::from(v);
            }
        }
        return BigInt::from(payload) << k as usize;
    }
    let s = shift as u32;
    let r = match t.rounding {
        Rounding::Trn => {
            if s >= 127 {
                if payload < 0 { -1 } else { 0 }
            } else {
                payload >> s
            }
        }
        Rounding::Rnd => {
            let q = if s - 1 >= 127 {
                if payload < 0 { -1 } else { 0 }
            } else {
                payload >> (s - 1)
            };
            (q + 1) >> 1
        }
    };
    BigInt::from(r)
}

/// Requantizes a payload given on grid `2^from_exp` into `t`.
pub fn cast_payload(payload: i128, from_exp: i32, t: FixedPointType) -> i128 {
    t.fit_big(&regrid(payload, from_exp, &t))
}

/// Equivalent to `quantize(v.value(), t)`, computed on the payload.
pub fn cast(v: &FixedValue, t: FixedPointType) -> FixedValue {
    FixedValue { payload: cast_payload(v.payload, v.ty.lsb_exp(), t), ty: t }
}

/// Minimal type holding every sum of values of `a` and `b`.
pub fn add_type(a: &FixedPointType, b: &FixedPointType) -> FixedPointType {
    let iv = a.range().add(&b.range());
    min_type_for(&iv, a.lsb_exp().min(b.lsb_exp()))
}

/// Minimal type holding every product of values of `a` and `b`.
pub fn mul_type(a: &FixedPointType, b: &FixedPointType) -> FixedPointType {
    let iv = a.range().mul(&b.range());
    min_type_for(&iv, a.lsb_exp() + b.lsb_exp())
}

/// Lossless addition.
pub fn fx_add(a: &FixedValue, b: &FixedValue) -> FixedValue {
    let ty = add_type(&a.ty, &b.ty);
    let e = ty.lsb_exp();
    let sum = (a.payload << (a.ty.lsb_exp() - e)) + (b.payload << (b.ty.lsb_exp() - e));
    FixedValue { payload: sum, ty }
}

/// Lossless multiplication.
pub fn fx_mul(a: &FixedValue, b: &FixedValue) -> FixedValue {
    let ty = mul_type(&a.ty, &b.ty);
    FixedValue { payload: a.payload * b.payload, ty }
}

/// Number of bits needed to write `v >= 0` in binary (0 for 0).
pub(crate) fn bit_length(v: i128) -> u32 {
    debug_assert!(v >= 0);
    128 - v.leading_zeros()
}

/// Smallest type with LSB `2^lsb_exp` whose range contains `iv`.
///
/// Bounds that do not sit on the requested grid are widened outward.
pub fn min_type_for(iv: &Interval, lsb_exp: i32) -> FixedPointType {
    let (lo, hi) = iv.payload_bounds_at(lsb_exp);
    let (width, signed) = if lo >= BigInt::zero() {
        let hi = hi.to_i128().expect("interval bound exceeds 126-bit payload");
        (bit_length(hi).max(1), false)
    } else {
        let neg = (-lo - BigInt::one()).to_i128().expect("interval bound exceeds 126-bit payload");
        let pos = hi.to_i128().expect("interval bound exceeds 126-bit payload").max(0);
        (1 + bit_length(neg).max(bit_length(pos)), true)
    };
    assert!(width <= MAX_WIDTH, "required width {width} exceeds {MAX_WIDTH} bits");
    FixedPointType {
        width,
        int_bits: width as i32 + lsb_exp,
        signed,
        rounding: Rounding::default(),
        overflow: Overflow::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use real::parse_real;

    fn t(s: &str) -> FixedPointType {
        s.parse().unwrap()
    }

    fn r(s: &str) -> Real {
        parse_real(s).unwrap()
    }

    #[test]
    fn quantize_rounding_and_overflow() {
        let trn_sat = t("fixed<4,2,s,TRN,SAT>");
        let q = quantize(&r("0.375"), trn_sat);
        assert_eq!(q.payload(), 1);
        assert_eq!(q.value(), r("0.25"));

        let q = quantize(&r("0.375"), t("fixed<4,2,s,RND,SAT>"));
        assert_eq!(q.payload(), 2);
        assert_eq!(q.value(), r("0.5"));

        assert_eq!(quantize(&r("2.0"), trn_sat).value(), r("1.75"));
        assert_eq!(quantize(&r("2.0"), t("fixed<4,2,s,TRN,WRAP>")).value(), r("-2"));
    }

    #[test]
    fn rnd_ties_go_up() {
        let ty = t("fixed<8,8,s,RND,SAT>");
        assert_eq!(quantize(&r("2.5"), ty).payload(), 3);
        assert_eq!(quantize(&r("-2.5"), ty).payload(), -2);
        assert_eq!(cast(&FixedValue::new(-5, t("fixed<8,7,s>")).unwrap(), ty).payload(), -2);
    }

    #[test]
    fn one_bit_signed_holds_minus_one_and_zero() {
        let ty = FixedPointType::signed(1, 1).unwrap();
        assert_eq!((ty.min_payload(), ty.max_payload()), (-1, 0));
        assert!(FixedPointType::new(0, 0, true).is_err());
        assert!(FixedPointType::new(MAX_WIDTH + 1, 0, true).is_err());
    }

    #[test]
    fn range_and_step() {
        let s = t("fixed<4,2,s>");
        assert_eq!(s.range().lo_real(), r("-2"));
        assert_eq!(s.range().hi_real(), r("1.75"));
        let u = t("fixed<4,2,u>");
        assert_eq!(u.range().hi_real(), r("3.75"));
        // negative integer bits and I > W
        let tiny = t("fixed<4,-2,u>");
        assert_eq!(tiny.lsb_exp(), -6);
        let big = t("fixed<3,6,s>");
        assert_eq!(FixedValue::new(1, big).unwrap().value(), r("8"));
    }

    #[test]
    fn mul_example_exact() {
        let a = FixedValue::new(3, t("fixed<3,2,u>")).unwrap();
        assert_eq!(a.value(), r("1.5"));
        let b = FixedValue::new(-1, t("fixed<2,2,s>")).unwrap();
        let p = fx_mul(&a, &b);
        assert_eq!(p.value(), r("-1.5"));
        assert_eq!(p.ty(), t("fixed<5,4,s>"));
    }

    #[test]
    fn add_zero_is_identity_by_value() {
        let x = FixedValue::new(-7, t("fixed<6,3,s>")).unwrap();
        let z = FixedValue::zero(t("fixed<2,1,u>"));
        let s = fx_add(&x, &z);
        assert!(s.value_eq(&x));
        assert!(s.ty().width() >= x.ty().width());
    }

    #[test]
    fn cast_representable_and_idempotent() {
        let v = quantize(&r("0.25"), t("fixed<8,4,s>"));
        let target = t("fixed<4,2,s,TRN,SAT>");
        assert_eq!(cast(&v, target).value(), r("0.25"));
        let once = cast(&FixedValue::new(101, t("fixed<8,4,s>")).unwrap(), target);
        assert_eq!(cast(&once, target), once);
    }

    #[test]
    fn min_type_examples() {
        let iv = Interval::new(-45, 30, 0);
        assert_eq!(min_type_for(&iv, 0), t("fixed<7,7,s>"));
        assert_eq!(min_type_for(&Interval::new(0, 15, 0), 0), t("fixed<4,4,u>"));
        assert_eq!(min_type_for(&Interval::new(0, 0, 0), 0), t("fixed<1,1,u>"));
        assert_eq!(min_type_for(&Interval::new(-1, 0, 0), 0), t("fixed<1,1,s>"));
    }

    #[test]
    fn syntax_round_trips() {
        for s in ["fixed<16,6,s,TRN,WRAP>", "fixed<4,-2,u,RND,SAT>", "fixed<1,1,s,TRN,SAT>"] {
            assert_eq!(t(s).to_string(), s);
        }
        assert_eq!(t("fixed<8,3,u>").to_string(), "fixed<8,3,u,TRN,WRAP>");
        assert_eq!(t("fixed<8,3,u,SAT>").overflow(), Overflow::Sat);
        assert_eq!(t("fixed<8,3,u,rnd>").rounding(), Rounding::Rnd);
        for bad in ["fixed<0,1,s>", "fixed<8,3>", "fixed<8,3,x>", "fix<8,3,s>", "fixed<8,3,s,SAT,TRN>"] {
            assert!(bad.parse::<FixedPointType>().is_err(), "{bad}");
        }
    }

    #[test]
    fn huge_values_saturate_or_wrap() {
        let x = r("1e40");
        assert_eq!(quantize(&x, t("fixed<8,8,s,TRN,SAT>")).payload(), 127);
        // 10^40 mod 256 = 0
        assert_eq!(quantize(&x, t("fixed<8,8,s,TRN,WRAP>")).payload(), 0);
        assert!(quantize_f64(f64::NAN, t("fixed<8,8,s>")).is_err());
    }
}
