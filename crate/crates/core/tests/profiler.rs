use dymn::network::{ModelConfig, Placement};
use dymn::profiler::{aggregation_macs, ca_macs, context_macs, conv_macs, dyrelu_macs, linear_macs, mac_report};
use dymn::tensor::ops::output_extent;
use serde_json::Value;

fn golden() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/mac_golden.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn config(key: &str) -> ModelConfig {
    match key {
        "mn-1.0" => ModelConfig::preset("mn").unwrap(),
        k => ModelConfig::preset(k).unwrap(),
    }
}

#[test]
fn totals_and_ratios_match_independent_counter() {
    let g = golden();
    let frames = g["frames"].as_u64().unwrap() as usize;
    for key in ["mn-1.0", "dymn-s", "dymn-m", "dymn-l"] {
        let r = mac_report(&config(key), frames).unwrap();
        assert_eq!(r.total_macs(), g[key]["macs"].as_u64().unwrap(), "{key} macs");
        assert_eq!(r.total_params(), g[key]["params"].as_u64().unwrap(), "{key} params");
        let ratios = g[key]["block_overhead_ratios"].as_array().unwrap();
        for (b, want) in r.blocks.iter().zip(ratios) {
            assert!((b.overhead_ratio() - want.as_f64().unwrap()).abs() < 1e-12, "{key} block {}", b.index);
        }
    }
}

/// Counts multiply-accumulates by walking the loop nest of a direct conv.
fn counted_conv(c_in: usize, c_out: usize, groups: usize, k: usize, stride: usize, extent: (usize, usize)) -> u64 {
    let pad = k / 2;
    let fo = output_extent(extent.0, k, stride, pad).unwrap();
    let to = output_extent(extent.1, k, stride, pad).unwrap();
    let mut n = 0u64;
    for _co in 0..c_out {
        for _ci in 0..c_in / groups {
            for _f in 0..fo {
                for _t in 0..to {
                    for _kf in 0..k {
                        for _kt in 0..k {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

#[test]
fn conv_formula_equals_loop_count() {
    for f in 1..=6 {
        for t in 1..=6 {
            for k in [1, 3, 5] {
                for stride in [1, 2] {
                    for (c_in, c_out, groups) in [(2, 3, 1), (4, 4, 4), (6, 4, 2)] {
                        let pad = k / 2;
                        let out = (
                            output_extent(f, k, stride, pad).unwrap(),
                            output_extent(t, k, stride, pad).unwrap(),
                        );
                        assert_eq!(
                            conv_macs(c_in, c_out, groups, (k, k), out),
                            counted_conv(c_in, c_out, groups, k, stride, (f, t))
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn every_block_follows_the_closed_forms() {
    for alpha in [0.4, 1.0, 2.0] {
        let cfg = ModelConfig {
            width_mult: alpha,
            ..ModelConfig::default()
        };
        let specs = cfg.block_specs().unwrap();
        let r = mac_report(&cfg, 1000).unwrap();
        assert_eq!(r.blocks.len(), 15);
        for (s, b) in specs.iter().zip(&r.blocks) {
            let (fi, ti) = b.input;
            let (fo, to) = b.output;
            let h = s.context_dim;
            let k = s.kernels;
            assert_eq!(b.overhead.context, context_macs(s.c_in, h, fi, ti));
            assert_eq!(b.overhead.context, (s.c_in * h * (ti + fi)) as u64);
            assert_eq!(b.overhead.ca, (h * s.c_exp * (to + fo)) as u64);
            assert_eq!(b.overhead.ca, ca_macs(h, s.c_exp, fo, to, true, true));
            // default Dy-ReLU sits after the depthwise conv
            assert_eq!(b.overhead.dyrelu, dyrelu_macs(2, s.c_exp, fo, to));
            assert_eq!(b.overhead.dyrelu, (2 * s.c_exp * fo * to) as u64);
            let kernel_elems = s.c_in * s.c_exp + s.c_exp * s.kernel * s.kernel + s.c_exp * s.c_out;
            assert_eq!(b.overhead.aggregation, aggregation_macs(k, kernel_elems));
            let statics = conv_macs(s.c_in, s.c_exp, 1, (1, 1), (fi, ti))
                + conv_macs(s.c_exp, s.c_exp, s.c_exp, (s.kernel, s.kernel), (fo, to))
                + conv_macs(s.c_exp, s.c_out, 1, (1, 1), (fo, to));
            assert_eq!(b.static_macs, statics);
            assert_eq!(b.overhead.predictors, 3 * linear_macs(h, k, 1) + linear_macs(h, 2 * 2 * s.c_exp, 1));
        }
    }
}

#[test]
fn dynamic_model_costs_less_than_twice_static() {
    let g = golden();
    let mn = g["mn-1.0"]["macs"].as_u64().unwrap();
    let dm = g["dymn-m"]["macs"].as_u64().unwrap();
    assert!(dm < 2 * mn);
    let none = ModelConfig {
        placement: Placement::None,
        ..ModelConfig::default()
    };
    assert_eq!(mac_report(&none, 1000).unwrap().total_overhead(), 0);
}
