use serde::Serialize;

use crate::fxp::real::real_from_scaled;
use crate::fxp::{quantize_f64, FixedPointType, FixedValue};
use crate::ir::ActivationKind;

/// Function a lookup table samples.
#[derive(Clone, Debug, PartialEq)]
pub enum TableFn {
    Activation(ActivationKind),
    Exp,
    Reciprocal,
}

impl TableFn {
    pub fn name(&self) -> &'static str {
        match self {
            TableFn::Activation(k) => k.name(),
            TableFn::Exp => "exp",
            TableFn::Reciprocal => "reciprocal",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TableFn::Activation(k) => k.eval_f64(x),
            TableFn::Exp => x.exp(),
            TableFn::Reciprocal => 1.0 / x,
        }
    }
}

/// Lookup table over the full range of `in_type`.
///
/// Entry `i` covers input payloads `min + i·2^drop ..= min + (i+1)·2^drop - 1`
/// and holds the quantized function value at the first of them.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTable {
    pub func: TableFn,
    pub in_type: FixedPointType,
    pub out_type: FixedPointType,
    pub drop: u32,
    pub entries: Vec<i128>,
}

#[derive(Serialize)]
struct TableDump<'a> {
    function: &'a str,
    size: usize,
    in_type: String,
    out_type: String,
    drop_bits: u32,
    entries: Vec<String>,
}

pub fn build_activation_table(func: TableFn, in_type: FixedPointType, size: usize, out_type: FixedPointType) -> ActivationTable {
    assert!(size.is_power_of_two(), "table size must be a power of two");
    let w = in_type.width();
    let size_bits = size.trailing_zeros().min(w);
    let drop = w - size_bits;
    let n = 1usize << size_bits;
    let min = in_type.min_payload();
    let entries = (0..n)
        .map(|i| {
            let p = min + ((i as i128) << drop);
            let x = real_from_scaled(p, in_type.lsb_exp());
            let y = func.eval(crate::fxp::real::real_to_f64(&x));
            saturating_quantize(y, out_type)
        })
        .collect();
    ActivationTable { func, in_type, out_type, drop, entries }
}

fn saturating_quantize(y: f64, t: FixedPointType) -> i128 {
    match quantize_f64(y, t) {
        Ok(v) => v.payload(),
        Err(_) if y > 0.0 => t.max_payload(),
        Err(_) if y < 0.0 => t.min_payload(),
        Err(_) => 0,
    }
}

impl ActivationTable {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn index(&self, payload: i128) -> usize {
        debug_assert!(self.in_type.contains_payload(payload));
        ((payload - self.in_type.min_payload()) >> self.drop) as usize
    }

    /// Input payload an entry was computed at.
    pub fn grid_point(&self, i: usize) -> i128 {
        self.in_type.min_payload() + ((i as i128) << self.drop)
    }

    pub fn lookup_payload(&self, payload: i128) -> i128 {
        self.entries[self.index(payload)]
    }

    /// `x` is first cast into the table's input type.
    pub fn lookup(&self, x: &FixedValue) -> FixedValue {
        let p = crate::fxp::cast(x, self.in_type).payload();
        FixedValue::new(self.lookup_payload(p), self.out_type).expect("entry within out type")
    }

    pub fn to_json(&self) -> serde_json::Value {
        let dump = TableDump {
            function: self.func.name(),
            size: self.size(),
            in_type: self.in_type.to_string(),
            out_type: self.out_type.to_string(),
            drop_bits: self.drop,
            entries: self
                .entries
                .iter()
                .map(|p| crate::fxp::real::real_to_string(&real_from_scaled(*p, self.out_type.lsb_exp())))
                .collect(),
        };
        serde_json::to_value(dump).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> FixedPointType {
        s.parse().unwrap()
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let tab = build_activation_table(TableFn::Activation(ActivationKind::Tanh), t("fixed<8,3,s>"), 256, t("fixed<8,1,s>"));
        assert_eq!(tab.lookup_payload(0), 0);
    }

    #[test]
    fn full_size_table_is_direct() {
        let in_t = t("fixed<6,2,s>");
        let out_t = t("fixed<10,1,s,RND,SAT>");
        let f = TableFn::Activation(ActivationKind::Sigmoid);
        let tab = build_activation_table(f.clone(), in_t, 64, out_t);
        assert_eq!(tab.drop, 0);
        for p in in_t.min_payload()..=in_t.max_payload() {
            let x = p as f64 * 2f64.powi(in_t.lsb_exp());
            assert_eq!(tab.lookup_payload(p), quantize_f64(f.eval(x), out_t).unwrap().payload());
        }
    }

    #[test]
    fn size_2048_over_12_bits_drops_one_lsb() {
        let in_t = t("fixed<12,4,s>");
        let out_t = t("fixed<16,2,s>");
        let f = TableFn::Activation(ActivationKind::Tanh);
        let tab = build_activation_table(f.clone(), in_t, 2048, out_t);
        assert_eq!(tab.drop, 1);
        assert_eq!(tab.size(), 2048);
        for p in in_t.min_payload()..=in_t.max_payload() {
            let truncated = p & !1;
            let x = truncated as f64 * 2f64.powi(in_t.lsb_exp());
            assert_eq!(tab.lookup_payload(p), quantize_f64(f.eval(x), out_t).unwrap().payload());
        }
    }

    #[test]
    fn oversized_request_clamps() {
        let tab = build_activation_table(TableFn::Exp, t("fixed<4,4,s>"), 2048, t("fixed<18,8,u>"));
        assert_eq!(tab.size(), 16);
        assert_eq!(tab.drop, 0);
    }

    #[test]
    fn reciprocal_of_zero_saturates() {
        let tab = build_activation_table(TableFn::Reciprocal, t("fixed<4,4,u>"), 16, t("fixed<8,1,u>"));
        assert_eq!(tab.entries[0], t("fixed<8,1,u>").max_payload());
    }
}
