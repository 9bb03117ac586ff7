use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::real::{pow2, Real};
use super::{quantize, FixedPointType, FxpError};

/// Number format of a weight (or activation) tensor.
///
/// Binary and ternary values use the bipolar convention: binary payloads are
/// `{-1, +1}`, ternary payloads `{-1, 0, +1}`, both on an integer grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightFormat {
    Fixed(FixedPointType),
    /// `±2^k` or zero, with `k` a signed `exponent_bits`-bit integer.
    PowerOfTwo { exponent_bits: u32, signed: bool },
    Binary,
    Ternary,
}

impl WeightFormat {
    pub fn exponent_range(exponent_bits: u32) -> (i32, i32) {
        let half = 1i32 << (exponent_bits - 1);
        (-half, half - 1)
    }

    /// The fixed-point grid every value of this format lives on.
    pub fn container(&self) -> FixedPointType {
        match *self {
            WeightFormat::Fixed(t) => t,
            WeightFormat::Binary | WeightFormat::Ternary => {
                FixedPointType::signed(2, 2).expect("static type")
            }
            WeightFormat::PowerOfTwo { exponent_bits, signed } => {
                let (kmin, kmax) = Self::exponent_range(exponent_bits);
                let mag_bits = (kmax - kmin + 1) as u32;
                let width = if signed { mag_bits + 1 } else { mag_bits };
                FixedPointType::new(width, width as i32 + kmin, signed).expect("po2 container width")
            }
        }
    }

    /// Whether `payload` (on the container grid) is a legal value.
    pub fn admits(&self, payload: i128) -> bool {
        match *self {
            WeightFormat::Fixed(t) => t.contains_payload(payload),
            WeightFormat::Binary => payload == 1 || payload == -1,
            WeightFormat::Ternary => (-1..=1).contains(&payload),
            WeightFormat::PowerOfTwo { signed, .. } => {
                let c = self.container();
                if !c.contains_payload(payload) {
                    return false;
                }
                if payload < 0 && !signed {
                    return false;
                }
                payload == 0 || payload.unsigned_abs().is_power_of_two()
            }
        }
    }

    /// Payload on the container grid representing `x`.
    pub fn quantize(&self, x: &Real) -> i128 {
        match *self {
            WeightFormat::Fixed(t) => quantize(x, t).payload(),
            WeightFormat::Binary => {
                if x.is_negative() {
                    -1
                } else {
                    1
                }
            }
            WeightFormat::Ternary => {
                let half = Real::new(1.into(), 2.into());
                if x > &half {
                    1
                } else if x < &-half {
                    -1
                } else {
                    0
                }
            }
            WeightFormat::PowerOfTwo { exponent_bits, signed } => {
                let (kmin, kmax) = Self::exponent_range(exponent_bits);
                let c = self.container();
                if x.is_zero() || (x.is_negative() && !signed) {
                    return 0;
                }
                let mag = x.abs();
                if mag < pow2(kmin - 1) {
                    return 0;
                }
                // floor(log2(mag)) by bit lengths, corrected exactly.
                let mut k = mag.numer().bits() as i32 - mag.denom().bits() as i32;
                while pow2(k) > mag {
                    k -= 1;
                }
                while pow2(k + 1) <= mag {
                    k += 1;
                }
                // nearest of 2^k and 2^(k+1); ties go up
                let mid = pow2(k) + pow2(k - 1);
                if mag >= mid {
                    k += 1;
                }
                let k = k.clamp(kmin, kmax);
                let p = BigInt::from(1) << (k - c.lsb_exp()) as usize;
                let p = p.to_i128().expect("po2 payload");
                if x.is_negative() {
                    -p
                } else {
                    p
                }
            }
        }
    }

    pub fn is_binary_or_ternary(&self) -> bool {
        matches!(self, WeightFormat::Binary | WeightFormat::Ternary)
    }
}

impl From<FixedPointType> for WeightFormat {
    fn from(t: FixedPointType) -> Self {
        WeightFormat::Fixed(t)
    }
}

impl fmt::Display for WeightFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFormat::Fixed(t) => t.fmt(f),
            WeightFormat::Binary => f.write_str("binary"),
            WeightFormat::Ternary => f.write_str("ternary"),
            WeightFormat::PowerOfTwo { exponent_bits, signed } => {
                write!(f, "po2<{},{}>", exponent_bits, if *signed { "s" } else { "u" })
            }
        }
    }
}

impl FromStr for WeightFormat {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        match t {
            "binary" => return Ok(WeightFormat::Binary),
            "ternary" => return Ok(WeightFormat::Ternary),
            _ => {}
        }
        if let Some(body) = t.strip_prefix("po2<").and_then(|r| r.strip_suffix('>')) {
            let bad = || FxpError::BadSyntax(s.to_string());
            let (bits, sign) = body.split_once(',').ok_or_else(bad)?;
            let exponent_bits: u32 = bits.trim().parse().map_err(|_| bad())?;
            if exponent_bits == 0 || exponent_bits > 6 {
                return Err(FxpError::InvalidType(format!("po2 exponent bits {exponent_bits} outside 1..=6")));
            }
            let signed = match sign.trim() {
                "s" => true,
                "u" => false,
                _ => return Err(bad()),
            };
            return Ok(WeightFormat::PowerOfTwo { exponent_bits, signed });
        }
        Ok(WeightFormat::Fixed(t.parse()?))
    }
}

impl Serialize for WeightFormat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WeightFormat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::real::{parse_real, real_from_scaled};

    #[test]
    fn binary_and_ternary_values() {
        let b = WeightFormat::Binary;
        assert_eq!(b.quantize(&parse_real("0.2").unwrap()), 1);
        assert_eq!(b.quantize(&parse_real("-0.2").unwrap()), -1);
        assert!(!b.admits(0));
        let t = WeightFormat::Ternary;
        assert_eq!(t.quantize(&parse_real("0.2").unwrap()), 0);
        assert_eq!(t.quantize(&parse_real("-0.7").unwrap()), -1);
        assert!(t.admits(0));
    }

    #[test]
    fn power_of_two_values_are_powers() {
        let f = WeightFormat::PowerOfTwo { exponent_bits: 3, signed: true };
        let c = f.container();
        assert_eq!(c.lsb_exp(), -4);
        for s in ["0.3", "-5", "0.75", "100", "-0.01", "0"] {
            let p = f.quantize(&parse_real(s).unwrap());
            assert!(f.admits(p), "{s} -> {p}");
        }
        // 0.75 sits exactly between 0.5 and 1: ties go up
        assert_eq!(real_from_scaled(f.quantize(&parse_real("0.75").unwrap()), c.lsb_exp()), parse_real("1").unwrap());
        // clamps to 2^3
        assert_eq!(real_from_scaled(f.quantize(&parse_real("100").unwrap()), c.lsb_exp()), parse_real("8").unwrap());
        assert!(!f.admits(3));
    }

    #[test]
    fn text_round_trip() {
        for s in ["binary", "ternary", "po2<4,s>", "fixed<8,2,s,RND,SAT>"] {
            assert_eq!(s.parse::<WeightFormat>().unwrap().to_string(), s);
        }
    }
}
