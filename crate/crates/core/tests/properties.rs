use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fxflow::cmvm::{self, build_adder_graph_with, csd, AdderOptions};
use fxflow::codegen::{build_project, testbench, EmitOptions};
use fxflow::frontend::{clean, export_model, load_model, parse_model};
use fxflow::frontend::eval::run_raw;
use fxflow::fxp::real::{pow2, real_from_scaled, real_to_string};
use fxflow::fxp::{
    fx_add, fx_mul, interval_propagate, min_type_for, quantize, FixedPointType, FixedValue, Interval, IntervalOp, Overflow,
    Real, Rounding,
};
use fxflow::ir::{resolve_config, ActivationKind, IoType, ModelGraph, QTensor, Strategy, UserConfig};
use fxflow::kernels::reference::{run_float, FTensor};
use fxflow::kernels::{build_activation_table, pool_forward, PoolKind, Program, TableFn, Window};
use fxflow::passes::run_flow;
use fxflow::perf::{self, Pipeline};

fn fx_type() -> impl proptest::strategy::Strategy<Value = FixedPointType> {
    (2u32..=16, -4i32..=10, any::<bool>(), any::<bool>()).prop_map(|(w, i, s, rnd)| {
        let r = if rnd { Rounding::Rnd } else { Rounding::Trn };
        FixedPointType::new(w, i, s).unwrap().with_modes(r, Overflow::Sat)
    })
}

fn fx_value() -> impl proptest::strategy::Strategy<Value = FixedValue> {
    fx_type().prop_flat_map(|t| (t.min_payload()..=t.max_payload()).prop_map(move |p| FixedValue::new(p, t).unwrap()))
}

fn small_type(max_w: u32) -> impl proptest::strategy::Strategy<Value = FixedPointType> {
    (1u32..=max_w, -2i32..=4, any::<bool>())
        .prop_filter("signed needs two bits", |(w, _, s)| !*s || *w >= 2)
        .prop_map(|(w, i, s)| FixedPointType::new(w, i, s).unwrap())
}

fn all_values(t: FixedPointType) -> Vec<FixedValue> {
    (t.min_payload()..=t.max_payload()).map(|p| FixedValue::new(p, t).unwrap()).collect()
}

/// Seeded random chain in the raw format: optional conv head, then dense,
/// activation and quantizer layers.
fn raw_chain(seed: u64, quantized: bool) -> String {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    let mut init = serde_json::Map::new();
    let v = |r: &mut ChaCha8Rng, n: usize| -> Vec<String> { (0..n).map(|_| real_to_string(&real_from_scaled(r.gen_range(-16..16), -3))).collect() };
    let conv = r.gen_bool(0.4);
    let input_shape: Vec<usize> = if conv { vec![r.gen_range(3..=6), r.gen_range(3..=6), r.gen_range(1..=2)] } else { vec![r.gen_range(1..=6)] };
    let mut h = "x".to_string();
    let mut fresh = 0;
    let mut next = |stem: &str| {
        fresh += 1;
        format!("{stem}{fresh}")
    };
    let quant = |nodes: &mut Vec<serde_json::Value>, h: &str, bits: u32, signed: bool, name: String| {
        nodes.push(json!({"op": "Quant", "inputs": [h], "outputs": [name.clone()],
            "attrs": {"bitwidth": bits, "scale": "0.125", "signed": signed, "rounding": "FLOOR"}}));
        name
    };
    if quantized {
        h = quant(&mut nodes, &h, 8, true, next("q"));
    }
    let mut width = input_shape.iter().product::<usize>();
    if conv {
        let (c, f) = (input_shape[2], r.gen_range(1..=3));
        let k = next("K");
        init.insert(k.clone(), json!({"shape": [f, c, 2, 2], "data": v(&mut r, f * c * 4)}));
        let kq = if quantized { quant(&mut nodes, &k, 6, true, next("q")) } else { k };
        let y = next("t");
        nodes.push(json!({"op": "Conv", "inputs": [h, kq], "outputs": [y.clone()], "attrs": {"kernel_shape": [2, 2]}}));
        let f2 = next("t");
        nodes.push(json!({"op": "Flatten", "inputs": [y], "outputs": [f2.clone()]}));
        h = f2;
        width = (input_shape[0] - 1) * (input_shape[1] - 1) * f;
    }
    for _ in 0..r.gen_range(1..=3) {
        let m = r.gen_range(1..=6);
        let (w, b) = (next("W"), next("B"));
        init.insert(w.clone(), json!({"shape": [width, m], "data": v(&mut r, width * m)}));
        init.insert(b.clone(), json!({"shape": [m], "data": v(&mut r, m)}));
        let (wq, bq) = if quantized { (quant(&mut nodes, &w, 6, true, next("q")), quant(&mut nodes, &b, 6, true, next("q"))) } else { (w, b) };
        let mm = next("t");
        nodes.push(json!({"op": "MatMul", "inputs": [h, wq], "outputs": [mm.clone()]}));
        let a = next("t");
        nodes.push(json!({"op": "Add", "inputs": [mm, bq], "outputs": [a.clone()]}));
        h = a;
        width = m;
        let act = ["Relu", "Tanh", "Sigmoid", "Identity"][r.gen_range(0..4)];
        let y = next("t");
        nodes.push(json!({"op": act, "inputs": [h], "outputs": [y.clone()]}));
        h = y;
        if quantized {
            h = quant(&mut nodes, &h, 8, act != "Relu" && act != "Sigmoid", next("q"));
        }
    }
    json!({
        "schema": 1,
        "graph": {"inputs": [{"name": "x", "shape": input_shape}], "outputs": [h], "nodes": nodes, "initializers": init}
    })
    .to_string()
}

fn compile(model: &str, strategy: Strategy, io: IoType) -> ModelGraph {
    let mut user = UserConfig::new();
    user.model.strategy = Some(strategy);
    user.io_type = Some(io);
    let g = load_model(model.as_bytes()).unwrap();
    run_flow(&resolve_config(&g, &user).unwrap(), "quantize").unwrap().0
}

fn random_samples(g: &ModelGraph, seed: u64, n: usize) -> Vec<BTreeMap<String, QTensor>> {
    fxflow::codegen::random_inputs(g, n, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantize_error_bound(k in -1_000_000i64..1_000_000, e in -12i32..4, t in fx_type()) {
        let x = real_from_scaled(k as i128, e);
        let q = quantize(&x, t);
        let inside = x >= real_from_scaled(t.min_payload(), t.lsb_exp()) && x <= real_from_scaled(t.max_payload(), t.lsb_exp());
        if inside {
            let err = (q.value() - &x).abs();
            let lsb = pow2(t.lsb_exp());
            match t.rounding() {
                Rounding::Trn => prop_assert!(err < lsb && q.value() <= x),
                Rounding::Rnd => prop_assert!(err * Real::from_integer(BigInt::from(2)) <= lsb),
            }
        }
    }

    #[test]
    fn add_and_mul_are_exact_and_commute(a in fx_value(), b in fx_value(), c in fx_value()) {
        prop_assert_eq!(fx_add(&a, &b).value(), a.value() + b.value());
        prop_assert_eq!(fx_mul(&a, &b).value(), a.value() * b.value());
        prop_assert_eq!(fx_add(&a, &b).value(), fx_add(&b, &a).value());
        prop_assert_eq!(fx_mul(&a, &b).value(), fx_mul(&b, &a).value());
        prop_assert_eq!(fx_add(&fx_add(&a, &b), &c).value(), fx_add(&a, &fx_add(&b, &c)).value());
        prop_assert_eq!(fx_mul(&fx_mul(&a, &b), &c).value(), fx_mul(&a, &fx_mul(&b, &c)).value());
    }

    #[test]
    fn interval_propagation_is_sound(ta in small_type(6), tb in small_type(6), w in -8i128..8, bias in -8i128..8) {
        let (ra, rb) = (ta.range(), tb.range());
        let wt = FixedPointType::signed(4, 2).unwrap();
        let affine = IntervalOp::Affine {
            weights: vec![FixedValue::new(w, wt).unwrap(), FixedValue::new(-w.signum(), wt).unwrap()],
            bias: Some(FixedValue::new(bias, wt).unwrap()),
        };
        let add = interval_propagate(&IntervalOp::Add, &[ra, rb]);
        let mul = interval_propagate(&IntervalOp::Mul, &[ra, rb]);
        let relu = interval_propagate(&IntervalOp::Relu, &[ra]);
        let aff = interval_propagate(&affine, &[ra, rb]);
        for a in all_values(ta) {
            prop_assert!(relu.contains_real(&a.value().max(Real::zero())));
            for b in all_values(tb) {
                prop_assert!(add.contains_real(&(a.value() + b.value())));
                prop_assert!(mul.contains_real(&(a.value() * b.value())));
                let y = real_from_scaled(w, wt.lsb_exp()) * a.value() + real_from_scaled(-w.signum(), wt.lsb_exp()) * b.value()
                    + real_from_scaled(bias, wt.lsb_exp());
                prop_assert!(aff.contains_real(&y));
            }
        }
    }

    #[test]
    fn min_type_is_minimal(lo in -5000i128..5000, span in 0i128..5000, e in -6i32..6) {
        let iv = Interval::new(lo, lo + span, e);
        let t = min_type_for(&iv, e);
        prop_assert!(t.range().contains_interval(&iv));
        if t.width() > 1 {
            if let Ok(smaller) = FixedPointType::new(t.width() - 1, t.int_bits() - 1, t.is_signed()) {
                prop_assert!(!smaller.range().contains_interval(&iv));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_serialization_round_trips(seed in any::<u64>(), q in any::<bool>()) {
        let g = compile(&raw_chain(seed, q), Strategy::Latency, IoType::IoParallel);
        let back = ModelGraph::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn clean_is_idempotent(seed in any::<u64>(), q in any::<bool>()) {
        let g = clean(&parse_model(raw_chain(seed, q).as_bytes()).unwrap()).unwrap();
        let again = clean(&export_model(&g).unwrap()).unwrap();
        prop_assert_eq!(again, g);
    }

    #[test]
    fn clean_preserves_float_semantics(seed in any::<u64>()) {
        let raw = parse_model(raw_chain(seed, false).as_bytes()).unwrap();
        let g = clean(&raw).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let shape = g.shape(&g.inputs()[0]).to_vec();
        let x: Vec<f64> = (0..shape.iter().product()).map(|_| r.gen_range(-8.0..8.0)).collect();
        let a = run_raw(&raw, &[("x".to_string(), FTensor::new(shape.clone(), x.clone()))].into()).unwrap();
        let b = run_float(&g, &[(g.inputs()[0].to_string(), FTensor::new(shape, x))].into()).unwrap();
        let (a, b) = (a.values().next().unwrap(), b.values().next().unwrap());
        prop_assert_eq!(&a.shape, &b.shape);
        for (u, v) in a.values.iter().zip(&b.values) {
            prop_assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0), "{} vs {}", u, v);
        }
    }

    #[test]
    fn flows_are_deterministic(seed in any::<u64>()) {
        let m = raw_chain(seed, true);
        prop_assert_eq!(compile(&m, Strategy::Da, IoType::IoStream).to_json(), compile(&m, Strategy::Da, IoType::IoStream).to_json());
    }

    #[test]
    fn emulation_is_independent_of_thread_count(seed in any::<u64>()) {
        let g = compile(&raw_chain(seed, true), Strategy::Latency, IoType::IoParallel);
        let batch = random_samples(&g, seed, 16);
        let p = Program::new(&g).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| p.run_batch(&batch)).unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| p.run_batch(&batch)).unwrap();
        prop_assert_eq!(one, four);
    }

    #[test]
    fn testbench_matches_emulation(seed in any::<u64>(), stream in any::<bool>()) {
        let io = if stream { IoType::IoStream } else { IoType::IoParallel };
        let g = compile(&raw_chain(seed, true), Strategy::Resource, io);
        let project = build_project(&g, EmitOptions { samples: 4, seed }).unwrap();
        let inputs = testbench::parse_samples(&g, &project.files["tb/inputs.json"]).unwrap();
        let outputs = fxflow::kernels::emulate(&g, &inputs).unwrap();
        prop_assert!(testbench::compare(&project.files["tb/expected.json"], &outputs).is_ok());

        for d in project.plan.all_directives() {
            let text = &project.files[&d.file];
            prop_assert!(text.contains(&d.anchor), "anchor {} missing from {}", d.anchor, d.file);
        }
        for f in &project.plan.files {
            let text = &project.files[&f.path];
            prop_assert_eq!(&fxflow::codegen::sha256_hex(text.as_bytes()), &f.sha256);
            prop_assert_eq!(text.len(), f.bytes);
        }
    }

    #[test]
    fn estimate_totals_are_layer_sums(seed in any::<u64>(), stream in any::<bool>()) {
        let io = if stream { IoType::IoStream } else { IoType::IoParallel };
        let g = compile(&raw_chain(seed, true), Strategy::Latency, io);
        let r = perf::estimate(&g).unwrap();
        prop_assert_eq!(r.total.multipliers, r.layers.iter().map(|l| l.multipliers).sum::<usize>());
        prop_assert_eq!(r.total.adder_weighted_cost, r.layers.iter().map(|l| l.adder_weighted_cost).sum::<u64>());
        prop_assert_eq!(r.total.table_brams, r.layers.iter().map(|l| l.table_brams).sum::<usize>());
        prop_assert_eq!(r.total.fifo_bits, r.layers.iter().map(|l| l.fifo_bits).sum::<u64>());
        prop_assert_eq!(r.total.ii_cycles, r.layers.iter().map(|l| l.ii_cycles).max().unwrap_or(0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn strategies_agree_at_wide_widths(
        m in 1usize..=6, n in 1usize..=6, wbits in 8u32..=16, xbits in 8u32..=16, seed in any::<u64>()
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let wt = FixedPointType::signed(wbits, 2).unwrap();
        let xt = FixedPointType::signed(xbits, 4).unwrap();
        let w: Vec<i128> = (0..m * n).map(|_| r.gen_range(wt.min_payload()..=wt.max_payload())).collect();
        let q = QTensor::fixed(vec![m, n], w.clone(), wt);
        let x: Vec<i128> = (0..n).map(|_| r.gen_range(xt.min_payload()..=xt.max_payload())).collect();
        let direct: Vec<i128> = (0..m).map(|i| (0..n).map(|j| w[i * n + j] * x[j]).sum()).collect();
        let mut plans = vec![cmvm::plan(&q, Strategy::Latency, 1, xt).unwrap(), cmvm::plan(&q, Strategy::Da, 1, xt).unwrap()];
        for rf in (1..=m * n).filter(|d| (m * n) % d == 0) {
            plans.push(cmvm::plan(&q, Strategy::Resource, rf, xt).unwrap());
        }
        for p in &plans {
            prop_assert_eq!(&cmvm::eval_plan_payloads(p, &q, &x).unwrap(), &direct);
        }
    }

    #[test]
    fn single_weight_adders_follow_csd(v in -40_000i128..40_000) {
        let x = FixedPointType::signed(8, 8).unwrap();
        for cse in [true, false] {
            let g = build_adder_graph_with(&[vec![v]], x, 0, AdderOptions { cse, ..Default::default() });
            let bound = csd(v).nonzeros().saturating_sub(1);
            prop_assert!(g.cost().adders <= bound, "{} adders for {} (csd nonzeros {})", g.cost().adders, v, csd(v).nonzeros());
            prop_assert_eq!(g.eval_payloads(&[3]), vec![3 * v]);
        }
    }

    #[test]
    fn activation_tables_match_direct_quantization(
        kind in 0usize..3, in_t in small_type(10), out_w in 4u32..=10, size_bits in 2u32..=8
    ) {
        let f = TableFn::Activation([ActivationKind::Tanh, ActivationKind::Sigmoid, ActivationKind::Softsign][kind].clone());
        let out_t = FixedPointType::signed(out_w, 1).unwrap().with_modes(Rounding::Trn, Overflow::Sat);
        let table = build_activation_table(f.clone(), in_t, 1 << size_bits, out_t);
        let drop = in_t.width().saturating_sub(size_bits);
        for p in in_t.min_payload()..=in_t.max_payload() {
            let grid = in_t.min_payload() + (((p - in_t.min_payload()) >> drop) << drop);
            let x = fxflow::fxp::real::real_to_f64(&real_from_scaled(grid, in_t.lsb_exp()));
            let want = fxflow::fxp::quantize_f64(f.eval(x), out_t).unwrap().payload();
            prop_assert_eq!(table.lookup_payload(p), want, "input payload {}", p);
        }
    }

    #[test]
    fn max_pool_matches_nested_loops(
        h in 1usize..=6, w in 1usize..=6, c in 1usize..=3, k in 1usize..=3, s in 1usize..=3, seed in any::<u64>()
    ) {
        prop_assume!(k <= h && k <= w);
        let t = FixedPointType::signed(8, 4).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<i128> = (0..h * w * c).map(|_| r.gen_range(-128..128)).collect();
        let x = QTensor::fixed(vec![h, w, c], xs.clone(), t);
        let win = Window { kernel: vec![k, k], stride: vec![s, s], pad: vec![[0, 0], [0, 0]] };
        let y = pool_forward(&x, PoolKind::Max, &win, t, t).unwrap();
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut want = Vec::new();
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = i128::MIN;
                    for di in 0..k {
                        for dj in 0..k {
                            best = best.max(xs[((i * s + di) * w + j * s + dj) * c + ch]);
                        }
                    }
                    want.push(best);
                }
            }
        }
        prop_assert_eq!(&y.shape, &vec![oh, ow, c]);
        prop_assert_eq!(y.payloads, want);
    }

    #[test]
    fn fifos_conserve_items(
        stages in prop::collection::vec((1usize..=5, 1usize..=6), 2..=4),
        items in prop::collection::vec(1usize..=8, 3),
        depth in 1usize..=6,
        n in 1usize..=4,
    ) {
        let mut p = Pipeline::default();
        let k = stages.len();
        let ids: Vec<usize> = (0..k).map(|s| {
            let inn = if s > 0 { items[s - 1] } else { 0 };
            let out = if s + 1 < k { items[s] } else { 0 };
            p.add_stage(&format!("s{s}"), stages[s].0, stages[s].1, inn.max(out))
        }).collect();
        for s in 0..k - 1 {
            p.connect(ids[s], ids[s + 1], items[s], depth);
        }
        let t = p.simulate(n).unwrap();
        for f in &t.fifos {
            prop_assert_eq!(f.produced, f.consumed, "{}", &f.name);
            prop_assert!(f.max_occupancy <= f.depth);
        }
    }

    #[test]
    fn unit_ii_pipelines_stream_one_sample_per_cycle(lat in prop::collection::vec(1usize..=8, 1..=5), n in 1usize..=20) {
        let mut p = Pipeline::default();
        let ids: Vec<usize> = lat.iter().enumerate().map(|(i, l)| p.add_stage(&format!("s{i}"), 1, *l, 1)).collect();
        for w in ids.windows(2) {
            p.connect(w[0], w[1], 1, 2);
        }
        let one = p.simulate(1).unwrap().makespan;
        prop_assert_eq!(p.simulate(n).unwrap().makespan, one + n as u64 - 1);
    }
}
