//! Multiplier-free constant matrix multiplication: the adder graph for a
//! small matrix, with and without common subexpression sharing.

use fxflow::cmvm::{build_adder_graph_with, csd, AdderOptions};
use fxflow::fxp::FixedPointType;

fn main() {
    let rows = vec![vec![7, 13, -5], vec![14, 3, 11], vec![-7, 26, 9]];
    let x = FixedPointType::signed(8, 8).expect("valid type");
    for v in [7, 13, 26, -5] {
        println!("csd({v:>3}) = {:?}", csd(v).terms());
    }
    for cse in [false, true] {
        let g = build_adder_graph_with(&rows, x, 0, AdderOptions { cse, ..Default::default() });
        let cost = g.cost();
        println!("\ncse={cse}: {} adders, weighted cost {}", cost.adders, cost.weighted);
        print!("{g}");
        println!("x=[1,2,3] -> {:?}", g.eval_payloads(&[1, 2, 3]));
    }
}
