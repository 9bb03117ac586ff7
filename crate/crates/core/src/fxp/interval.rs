use num_bigint::BigInt;
use num_integer::Integer;

use super::real::{real_from_scaled, Real};
use super::FixedValue;

/// Closed interval `[lo * 2^exp, hi * 2^exp]` of dyadic rationals.
#[derive(Clone, Copy, Debug, Eq)]
pub struct Interval {
    lo: i128,
    hi: i128,
    exp: i32,
}

impl PartialEq for Interval {
    fn eq(&self, other: &Self) -> bool {
        let e = self.exp.min(other.exp);
        self.aligned(e) == other.aligned(e)
    }
}

fn shl(v: i128, k: i32) -> i128 {
    debug_assert!(k >= 0);
    if v == 0 {
        return 0;
    }
    assert!(k < 127, "interval bound exceeds 128-bit range");
    v.checked_mul(1i128 << k).expect("interval bound exceeds 128-bit range")
}

impl Interval {
    pub fn new(lo: i128, hi: i128, exp: i32) -> Self {
        assert!(lo <= hi, "interval with lo > hi");
        Self { lo, hi, exp }
    }

    pub fn point(v: i128, exp: i32) -> Self {
        Self::new(v, v, exp)
    }

    pub fn of_value(v: &FixedValue) -> Self {
        Self::point(v.payload(), v.ty().lsb_exp())
    }

    pub fn lo(&self) -> i128 {
        self.lo
    }

    pub fn hi(&self) -> i128 {
        self.hi
    }

    pub fn exp(&self) -> i32 {
        self.exp
    }

    pub fn lo_real(&self) -> Real {
        real_from_scaled(self.lo, self.exp)
    }

    pub fn hi_real(&self) -> Real {
        real_from_scaled(self.hi, self.exp)
    }

    /// Bounds expressed on the finer grid `2^e`, `e <= exp`.
    fn aligned(&self, e: i32) -> (i128, i128) {
        (shl(self.lo, self.exp - e), shl(self.hi, self.exp - e))
    }

    /// Integer bounds on grid `2^e`; off-grid bounds round outward.
    pub fn payload_bounds_at(&self, e: i32) -> (BigInt, BigInt) {
        if e <= self.exp {
            let k = (self.exp - e) as usize;
            (BigInt::from(self.lo) << k, BigInt::from(self.hi) << k)
        } else {
            let d = BigInt::from(1) << (e - self.exp) as usize;
            (
                BigInt::from(self.lo).div_floor(&d),
                BigInt::from(self.hi).div_ceil(&d),
            )
        }
    }

    pub fn add(&self, other: &Interval) -> Interval {
        let e = self.exp.min(other.exp);
        let (a0, a1) = self.aligned(e);
        let (b0, b1) = other.aligned(e);
        Interval::new(a0 + b0, a1 + b1, e)
    }

    pub fn mul(&self, other: &Interval) -> Interval {
        let c = [
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        ];
        Interval::new(
            *c.iter().min().unwrap(),
            *c.iter().max().unwrap(),
            self.exp + other.exp,
        )
    }

    pub fn neg(&self) -> Interval {
        Interval::new(-self.hi, -self.lo, self.exp)
    }

    pub fn relu(&self) -> Interval {
        Interval::new(self.lo.max(0), self.hi.max(0), self.exp)
    }

    /// Smallest interval containing both.
    pub fn hull(&self, other: &Interval) -> Interval {
        let e = self.exp.min(other.exp);
        let (a0, a1) = self.aligned(e);
        let (b0, b1) = other.aligned(e);
        Interval::new(a0.min(b0), a1.max(b1), e)
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        let e = self.exp.min(other.exp);
        let (a0, a1) = self.aligned(e);
        let (b0, b1) = other.aligned(e);
        a0 <= b0 && b1 <= a1
    }

    pub fn contains(&self, v: &FixedValue) -> bool {
        self.contains_interval(&Interval::of_value(v))
    }

    pub fn contains_real(&self, x: &Real) -> bool {
        &self.lo_real() <= x && x <= &self.hi_real()
    }
}

/// Operations understood by [`interval_propagate`].
#[derive(Clone, Debug)]
pub enum IntervalOp {
    Add,
    Mul,
    Relu,
    /// `sum_i w_i * x_i + b` with constant weights.
    Affine { weights: Vec<FixedValue>, bias: Option<FixedValue> },
}

/// Sound output interval of `op` applied to inputs ranging over `ins`.
///
/// Panics when the number of inputs does not match the operation's arity.
pub fn interval_propagate(op: &IntervalOp, ins: &[Interval]) -> Interval {
    match op {
        IntervalOp::Add => {
            let (first, rest) = ins.split_first().expect("add needs inputs");
            rest.iter().fold(*first, |acc, iv| acc.add(iv))
        }
        IntervalOp::Mul => {
            let (first, rest) = ins.split_first().expect("mul needs inputs");
            rest.iter().fold(*first, |acc, iv| acc.mul(iv))
        }
        IntervalOp::Relu => {
            assert_eq!(ins.len(), 1, "relu takes one input");
            ins[0].relu()
        }
        IntervalOp::Affine { weights, bias } => {
            assert_eq!(weights.len(), ins.len(), "affine arity mismatch");
            let mut acc = bias.as_ref().map(Interval::of_value).unwrap_or(Interval::point(0, 0));
            for (w, x) in weights.iter().zip(ins) {
                acc = acc.add(&Interval::of_value(w).mul(x));
            }
            acc
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::FixedPointType;

    fn int(v: i128) -> FixedValue {
        FixedValue::new(v, FixedPointType::signed(8, 8).unwrap()).unwrap()
    }

    #[test]
    fn mul_by_negative_weight() {
        let x = Interval::new(0, 15, 0);
        assert_eq!(interval_propagate(&IntervalOp::Mul, &[x, Interval::point(-3, 0)]), Interval::new(-45, 0, 0));
    }

    #[test]
    fn relu_clips() {
        assert_eq!(interval_propagate(&IntervalOp::Relu, &[Interval::new(-2, 3, 0)]), Interval::new(0, 3, 0));
    }

    #[test]
    fn affine_matches_brute_force() {
        let ws = [int(2), int(-3)];
        let op = IntervalOp::Affine { weights: ws.to_vec(), bias: None };
        let x = Interval::new(0, 15, 0);
        let got = interval_propagate(&op, &[x, x]);
        let (mut lo, mut hi) = (i128::MAX, i128::MIN);
        for a in 0..16 {
            for b in 0..16 {
                let y = 2 * a - 3 * b;
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        assert_eq!((lo, hi), (-45, 30));
        assert_eq!(got, Interval::new(lo, hi, 0));
    }

    #[test]
    fn equality_ignores_grid() {
        assert_eq!(Interval::new(1, 2, 0), Interval::new(4, 8, -2));
        assert_ne!(Interval::new(1, 2, 0), Interval::new(4, 9, -2));
    }

    #[test]
    fn outward_rounding() {
        let iv = Interval::new(-3, 3, -1); // [-1.5, 1.5]
        let (lo, hi) = iv.payload_bounds_at(0);
        assert_eq!((lo, hi), (BigInt::from(-2), BigInt::from(2)));
    }
}
