mod common;

use std::collections::BTreeMap;

use inferlab_core::fixtures::{self, ToyCnnOptions};
use common::{heavy_tailed_histogram, oracle_l2, random_dag};
use inferlab_core::ir::{DType, Graph, Node, OpType, TensorSpec};
use inferlab_core::quant::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn l2_range_never_loses_to_minmax_on_heavy_tails() {
    for seed in 0..100 {
        let (min, max, counts) = heavy_tailed_histogram(seed, 2048);
        let h = Histogram::from_counts(min, max, counts.clone()).unwrap();
        let l2 = choose_qparams_l2(&h, QDtype::U8, false).unwrap();
        let mm = choose_qparams_minmax(min, max, QDtype::U8, false).unwrap();
        let (e_l2, e_mm) = (estimate_l2_error(&h, &l2), estimate_l2_error(&h, &mm));
        assert!(e_l2 <= e_mm, "seed {seed}: {e_l2} > {e_mm}");
        let (o_l2, o_mm) = (oracle_l2(min, max, &counts, &l2), oracle_l2(min, max, &counts, &mm));
        assert!(o_l2 <= o_mm * (1.0 + 1e-9), "seed {seed}: oracle {o_l2} > {o_mm}");
    }
}

#[test]
fn l2_choice_is_the_brute_force_minimum() {
    for seed in 0..100 {
        let bins = 48;
        let (min, max, counts) = heavy_tailed_histogram(seed, bins);
        let h = Histogram::from_counts(min, max, counts.clone()).unwrap();
        let chosen = choose_qparams_l2(&h, QDtype::U8, false).unwrap();
        let w = (max - min) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| min + i as f64 * w).collect();
        edges.push(0.0);
        let mut best = f64::INFINITY;
        for &a in edges.iter().filter(|&&e| e <= 0.0) {
            for &b in edges.iter().filter(|&&e| e >= 0.0 && e > a) {
                let q = choose_qparams_minmax(a, b, QDtype::U8, false).unwrap();
                best = best.min(oracle_l2(min, max, &counts, &q));
            }
        }
        let got = oracle_l2(min, max, &counts, &chosen);
        assert!(got <= best * (1.0 + 1e-9) + 1e-12, "seed {seed}: {got} vs {best}");
        let lib = estimate_l2_error(&h, &chosen);
        assert!((lib - got).abs() <= 1e-9 * got.max(1.0), "seed {seed}: {lib} vs {got}");
    }
}

#[test]
fn per_channel_beats_per_tensor_on_channel_scaled_weights() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let (c, k) = (r.gen_range(2..24), r.gen_range(8..64));
        let scales: Vec<f32> = (0..c).map(|_| 10f32.powf(r.gen_range(-2.0..1.0))).collect();
        let x: Vec<f32> = (0..c * k).map(|i| scales[i / k] * r.gen_range(-1.0f32..1.0)).collect();
        let dims = [c, k];
        let per_c = QGranularity::PerChannel { axis: 0 };
        let pc = minmax_params(&x, &dims, per_c, QDtype::I8, true).unwrap();
        let pt = minmax_params(&x, &dims, QGranularity::PerTensor, QDtype::I8, true).unwrap();
        let e_c = quantization_l2_error(&x, &dims, &pc, per_c).unwrap();
        let e_t = quantization_l2_error(&x, &dims, &pt, QGranularity::PerTensor).unwrap();
        assert!(e_c <= e_t, "case {case}: {e_c} > {e_t}");
    }
}

#[test]
fn integer_grid_values_quantize_without_error() {
    let x: Vec<f32> = (0..=255).map(|v| v as f32).collect();
    let q = QParams::new(1.0, 0, QDtype::U8, false).unwrap();
    let e = quantization_l2_error(&x, &[256], &[q], QGranularity::PerTensor).unwrap();
    assert_eq!(e, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn narrowing_never_widens_and_converges(seed in any::<u64>(), nodes in 1usize..25, spans in prop::collection::vec((-10.0f64..-0.01, 0.01f64..10.0), 26)) {
        let g = random_dag(seed, nodes);
        let ranges: BTreeMap<String, Range> = (0..=nodes).map(|i| (format!("t{i}"), spans[i])).collect();
        let res = net_aware_narrow(&g, &ranges).unwrap();
        prop_assert!(res.passes <= g.nodes().len());
        for (name, &(lo, hi)) in &ranges {
            let (a, b) = res.ranges[name];
            prop_assert!(lo <= a && a <= b && b <= hi, "{} widened: {:?} -> {:?}", name, (lo, hi), (a, b));
        }
        let again = net_aware_narrow(&g, &res.ranges).unwrap();
        prop_assert_eq!(&again.ranges, &res.ranges);
        prop_assert_eq!(again.passes, 0);

        let consumers = g.consumers();
        for (name, &(lo, _)) in &ranges {
            let only_relu = !g.outputs().contains(name)
                && consumers.get(name.as_str()).is_some_and(|cs| cs.iter().all(|&c| g.nodes()[c].op == OpType::Relu));
            let (a, b) = res.ranges[name];
            if only_relu {
                // A range pushed wholly below zero upstream cannot grow back to 0.
                prop_assert!(a >= 0.0 || b < 0.0, "{} kept negatives: {:?}", name, (a, b));
                if name == "t0" && lo < 0.0 {
                    prop_assert_eq!(a, 0.0);
                }
            }
        }
    }
}

#[test]
fn relu_input_loses_negative_half() {
    let mut g = Graph::new();
    g.add_input(TensorSpec::new("x", vec![4], DType::F32));
    g.add_tensor(TensorSpec::new("y", vec![4], DType::F32));
    g.add_node(Node::new("relu", OpType::Relu, ["x"], ["y"]));
    g.mark_output("y");
    let ranges = BTreeMap::from([("x".to_string(), (-2.0, 3.0)), ("y".to_string(), (0.0, 3.0))]);
    let res = net_aware_narrow(&g, &ranges).unwrap();
    assert_eq!(res.ranges["x"], (0.0, 3.0));
    assert_eq!(res.ranges["y"], (0.0, 3.0));
}

fn toy(opts: ToyCnnOptions, threshold: f64) -> QuantizeOutcome {
    let g = fixtures::toy_cnn(opts, 0);
    let batches = fixtures::toy_cnn_batches(8, 1);
    quantize_model(&g, &batches, threshold, &QuantOptions::default()).unwrap()
}

#[test]
fn sensitive_layers_fall_back_and_model_stays_accurate() {
    let out = toy(ToyCnnOptions::SENSITIVE, 1e-2);
    assert_eq!(out.fallback, ["conv1", "fc"]);
    assert!(out.report.end_to_end.sqnr_db > 20.0, "{:?}", out.report.end_to_end);
    assert!(out.plan.is_quantized("conv2"));
    assert!(!out.plan.is_quantized("conv1"));
}

#[test]
fn plain_toy_cnn_quantizes_fully() {
    let out = toy(ToyCnnOptions::PLAIN, 1e-2);
    assert!(out.fallback.is_empty(), "{:?}", out.fallback);
    assert!(out.report.end_to_end.sqnr_db > 20.0);
}

#[test]
fn fallback_set_grows_as_threshold_tightens() {
    let g = fixtures::toy_cnn(ToyCnnOptions::SENSITIVE, 0);
    let batches = fixtures::toy_cnn_batches(8, 1);
    let calib = calibrate(&g, &batches, &QuantOptions::default()).unwrap();
    let plan = build_plan(&g, &calib, &QuantOptions::default()).unwrap();
    let report = profile_quant_error(&g, &batches, &plan).unwrap();

    let mut thresholds = vec![0.0, f64::INFINITY];
    thresholds.extend((0..40).map(|i| 10f64.powf(-5.0 + i as f64 * 0.15)));
    thresholds.sort_by(f64::total_cmp);
    let sets: Vec<Vec<String>> = thresholds.iter().map(|&t| selective_plan(&report, t)).collect();
    for w in sets.windows(2) {
        assert!(w[1].iter().all(|l| w[0].contains(l)), "{:?} then {:?}", w[0], w[1]);
    }
    assert_eq!(sets[0].len(), report.layers.len());
    assert!(sets.last().unwrap().is_empty());
}

#[test]
fn threshold_extremes() {
    let all = toy(ToyCnnOptions::SENSITIVE, f64::INFINITY);
    assert!(all.fallback.is_empty());
    let none = toy(ToyCnnOptions::SENSITIVE, 0.0);
    assert_eq!(none.fallback.len(), none.report.layers.len());
    assert_eq!(none.plan.quantized_layers().count(), 0);
    assert_eq!(none.report.end_to_end.sqnr_db, f64::INFINITY);
}

#[test]
fn sensitive_fallback_holds_across_seeds() {
    for seed in 0..4 {
        let g = fixtures::toy_cnn(ToyCnnOptions::SENSITIVE, seed);
        let batches = fixtures::toy_cnn_batches(8, seed + 1);
        let out = quantize_model(&g, &batches, 1e-2, &QuantOptions::default()).unwrap();
        assert_eq!(out.fallback, ["conv1", "fc"], "seed {seed}");
    }
}

#[test]
fn plan_json_round_trips() {
    let out = toy(ToyCnnOptions::SENSITIVE, 1e-2);
    let text = out.plan.to_json();
    assert_eq!(QuantPlan::from_json(&text).unwrap(), out.plan);
}

#[test]
fn selected_ranges_stay_within_observed_and_errors_are_finite() {
    let g = fixtures::toy_cnn(ToyCnnOptions::PLAIN, 0);
    let batches = fixtures::toy_cnn_batches(8, 1);
    let l2 = quantize_model(&g, &batches, f64::INFINITY, &QuantOptions::default()).unwrap();
    let mm = quantize_model(&g, &batches, f64::INFINITY, &QuantOptions { l2_ranges: false, ..Default::default() }).unwrap();
    for o in [&l2, &mm] {
        assert!(o.report.end_to_end.sqnr_db.is_finite());
    }
    for (name, &(lo, hi)) in &l2.calibration.selected {
        let (olo, ohi) = l2.calibration.observed[name];
        assert!(lo >= olo.min(0.0) - 1e-9 && hi <= ohi.max(0.0) + 1e-9, "{name}");
    }
}
