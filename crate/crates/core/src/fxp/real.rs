//! Exact real numbers used for weights, attributes and report values.
//!
//! Everything that enters the compiler as a decimal string is kept as an
//! exact rational; only activation-table generation and batch-norm folding
//! ever go through binary64.

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::FxpError;

pub type Real = BigRational;

pub fn real_from_int(v: i128) -> Real {
    Real::from_integer(BigInt::from(v))
}

/// `v * 2^exp`, exactly.
pub fn real_from_scaled(v: i128, exp: i32) -> Real {
    scale_pow2(&real_from_int(v), exp)
}

/// Exact conversion; returns `None` for NaN and infinities.
pub fn real_from_f64(x: f64) -> Option<Real> {
    if !x.is_finite() {
        return None;
    }
    BigRational::from_float(x)
}

pub fn real_to_f64(x: &Real) -> f64 {
    // BigRational::to_f64 handles huge numerators/denominators correctly.
    x.to_f64().unwrap_or_else(|| {
        if x.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    })
}

pub fn pow2(exp: i32) -> Real {
    let one = BigInt::one();
    if exp >= 0 {
        Real::from_integer(one << exp as usize)
    } else {
        Real::new(one, BigInt::one() << (-exp) as usize)
    }
}

/// `x * 2^exp`, exactly.
pub fn scale_pow2(x: &Real, exp: i32) -> Real {
    if exp >= 0 {
        Real::new(x.numer() << exp as usize, x.denom().clone())
    } else {
        Real::new(x.numer().clone(), x.denom() << (-exp) as usize)
    }
}

/// If `x` is a dyadic rational, the exponent of its lowest set bit
/// (`x = m * 2^e` with `m` odd). Zero returns `None`.
pub fn dyadic_exponent(x: &Real) -> Option<i32> {
    if x.is_zero() {
        return None;
    }
    let den = x.denom();
    let den_tz = den.trailing_zeros().unwrap_or(0);
    if (den >> den_tz as usize) != BigInt::one() {
        return None;
    }
    let num_tz = x.numer().trailing_zeros().unwrap_or(0);
    Some(num_tz as i32 - den_tz as i32)
}

/// Parses `"-1.25"`, `"3e-2"`, `"7"`, `"3/8"` exactly.
pub fn parse_real(s: &str) -> Result<Real, FxpError> {
    let bad = || FxpError::BadNumber(s.to_string());
    let t = s.trim();
    if t.is_empty() {
        return Err(bad());
    }
    if let Some((n, d)) = t.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| bad())?;
        let d: BigInt = d.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(Real::new(n, d));
    }
    let (mantissa, exponent) = match t.find(['e', 'E']) {
        Some(i) => {
            let e: i32 = t[i + 1..].parse().map_err(|_| bad())?;
            (&t[..i], e)
        }
        None => (t, 0),
    };
    let (neg, digits) = match mantissa.as_bytes().first() {
        Some(b'-') => (true, &mantissa[1..]),
        Some(b'+') => (false, &mantissa[1..]),
        _ => (false, mantissa),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let all: String = format!("{int_part}{frac_part}");
    let mut num: BigInt = if all.is_empty() { BigInt::zero() } else { all.parse().map_err(|_| bad())? };
    if neg {
        num = -num;
    }
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Ok(if scale >= 0 {
        Real::from_integer(num * num_traits::pow(ten, scale as usize))
    } else {
        Real::new(num, num_traits::pow(ten, (-scale) as usize))
    })
}

/// Exact decimal rendering when the denominator is of the form 2^a 5^b,
/// otherwise `"p/q"`. Both forms are accepted by [`parse_real`].
pub fn real_to_string(x: &Real) -> String {
    if x.is_integer() {
        return x.numer().to_string();
    }
    let mut den = x.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let (mut twos, mut fives) = (0usize, 0usize);
    while den.is_even() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return format!("{}/{}", x.numer(), x.denom());
    }
    let digits = twos.max(fives);
    let scaled = x * Real::from_integer(num_traits::pow(BigInt::from(10), digits));
    debug_assert!(scaled.is_integer());
    let n = scaled.to_integer();
    let neg = n.is_negative();
    let mut s = n.abs().to_string();
    if s.len() <= digits {
        s = format!("{}{}", "0".repeat(digits + 1 - s.len()), s);
    }
    let (ip, fp) = s.split_at(s.len() - digits);
    let fp = fp.trim_end_matches('0');
    let body = if fp.is_empty() { ip.to_string() } else { format!("{ip}.{fp}") };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

pub(crate) mod serde_real {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &Real, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&real_to_string(x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Real, D::Error> {
        let s = String::deserialize(d)?;
        parse_real(&s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod serde_real_vec {
    use super::*;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[Real], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(real_to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Real>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter().map(|s| parse_real(s).map_err(serde::de::Error::custom)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimal_forms() {
        assert_eq!(parse_real("0.375").unwrap(), Real::new(3.into(), 8.into()));
        assert_eq!(parse_real("-2").unwrap(), real_from_int(-2));
        assert_eq!(parse_real("1e-1").unwrap(), Real::new(1.into(), 10.into()));
        assert_eq!(parse_real("3/4").unwrap(), Real::new(3.into(), 4.into()));
        assert_eq!(parse_real(".5").unwrap(), Real::new(1.into(), 2.into()));
        assert!(parse_real("abc").is_err());
        assert!(parse_real("1/0").is_err());
        assert!(parse_real("").is_err());
    }

    #[test]
    fn renders_exact_decimals() {
        assert_eq!(real_to_string(&parse_real("0.375").unwrap()), "0.375");
        assert_eq!(real_to_string(&parse_real("-0.05").unwrap()), "-0.05");
        assert_eq!(real_to_string(&real_from_int(12)), "12");
        assert_eq!(real_to_string(&Real::new(1.into(), 3.into())), "1/3");
        let x = real_from_f64(0.1).unwrap();
        assert_eq!(parse_real(&real_to_string(&x)).unwrap(), x);
    }

    #[test]
    fn dyadic_exponents() {
        assert_eq!(dyadic_exponent(&parse_real("0.375").unwrap()), Some(-3));
        assert_eq!(dyadic_exponent(&real_from_int(12)), Some(2));
        assert_eq!(dyadic_exponent(&parse_real("0.1").unwrap()), None);
        assert_eq!(dyadic_exponent(&real_from_int(0)), None);
    }
}
