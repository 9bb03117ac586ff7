//! Fixed-point types, rounding and overflow modes, and exact arithmetic.

use fxflow::fxp::real::{parse_real, real_to_string as dec};
use fxflow::fxp::{fx_add, fx_mul, quantize, FixedPointType, Overflow, Rounding};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t: FixedPointType = "fixed<8,3,s,RND,SAT>".parse()?;
    println!("{t}: range {} .. {}, lsb 2^{}", dec(&t.range().lo_real()), dec(&t.range().hi_real()), t.lsb_exp());
    for s in ["1.3", "-0.015625", "2.0703125", "100", "-5"] {
        let x = parse_real(s)?;
        let trn = quantize(&x, t.with_modes(Rounding::Trn, Overflow::Wrap));
        let rnd = quantize(&x, t);
        println!("{s:>10}  TRN/WRAP {:>10}  RND/SAT {:>10}", dec(&trn.value()), dec(&rnd.value()));
    }
    let a = quantize(&parse_real("1.25")?, t);
    let b = quantize(&parse_real("-3.5")?, t);
    let sum = fx_add(&a, &b);
    let prod = fx_mul(&a, &b);
    println!("{} + {} = {} as {}", dec(&a.value()), dec(&b.value()), dec(&sum.value()), sum.ty());
    println!("{} * {} = {} as {}", dec(&a.value()), dec(&b.value()), dec(&prod.value()), prod.ty());
    Ok(())
}
