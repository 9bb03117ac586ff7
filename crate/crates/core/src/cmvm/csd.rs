use std::fmt;

/// Canonical signed-digit form, most significant digit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsdDigits(pub Vec<i8>);

impl CsdDigits {
    pub fn value(&self) -> i128 {
        self.0.iter().fold(0i128, |acc, d| acc * 2 + *d as i128)
    }

    pub fn nonzeros(&self) -> usize {
        self.0.iter().filter(|d| **d != 0).count()
    }

    /// `(shift, sign)` for every nonzero digit, lowest shift first.
    pub fn terms(&self) -> Vec<(u32, i8)> {
        let n = self.0.len();
        let mut out: Vec<(u32, i8)> =
            self.0.iter().enumerate().filter(|(_, d)| **d != 0).map(|(i, d)| ((n - 1 - i) as u32, *d)).collect();
        out.reverse();
        out
    }

    pub fn is_canonical(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == 0 || w[1] == 0)
    }
}

impl fmt::Display for CsdDigits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            f.write_str(match d {
                1 => "+",
                -1 => "-",
                _ => "0",
            })?;
        }
        Ok(())
    }
}

/// Non-adjacent form of `v`.
pub fn csd(v: i128) -> CsdDigits {
    if v == 0 {
        return CsdDigits(vec![0]);
    }
    let mut digits = Vec::new();
    let mut n = v;
    while n != 0 {
        if n & 1 == 1 {
            // n mod 4 == 1 -> +1, == 3 -> -1
            let d: i8 = if n.rem_euclid(4) == 1 { 1 } else { -1 };
            digits.push(d);
            n -= d as i128;
        } else {
            digits.push(0);
        }
        n >>= 1;
    }
    digits.reverse();
    CsdDigits(digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven() {
        let d = csd(7);
        assert_eq!(d.to_string(), "+00-");
        assert_eq!(d.nonzeros(), 2);
        assert_eq!(d.terms(), vec![(0, -1), (3, 1)]);
    }

    #[test]
    fn zero() {
        assert_eq!(csd(0).value(), 0);
        assert_eq!(csd(0).nonzeros(), 0);
    }

    #[test]
    fn exhaustive_small_range() {
        for v in -255i128..=255 {
            let d = csd(v);
            assert_eq!(d.value(), v);
            assert!(d.is_canonical(), "{v} -> {d}");
            assert!(d.nonzeros() as u32 <= v.unsigned_abs().count_ones());
        }
    }

    #[test]
    fn extremes() {
        for v in [i64::MAX as i128, i64::MIN as i128, (1i128 << 100) - 1] {
            let d = csd(v);
            assert_eq!(d.value(), v);
            assert!(d.is_canonical());
        }
    }
}
