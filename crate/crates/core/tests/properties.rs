mod common;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use qllama::engine::Engine;
use qllama::gqmv::{concat_rows, gqmv_reference, gqmv_staged, group_sums_reference, group_sums_staged, GqmvProblem};
use qllama::model::{rope_apply, softmax, ModelConfig};
use qllama::modelio::{gen_synthetic, quantize_weights};
use qllama::pipesim::{peak_gops, row_bytes, simulate_gqmv, HwConfig};
use qllama::quant::{dequantize, quantize, QuantSpec};
use qllama::stream::{plan_schedule, ScheduleCosts, ScheduleMode};

/// `k` groups of `gs` values, each group with its own magnitude.
fn groups(gs: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-30i32..30, prop::collection::vec(-1.0f32..1.0, gs)), 1..8).prop_map(|gs| {
        gs.into_iter()
            .flat_map(|(e, v)| {
                let m = 2f32.powi(e);
                v.into_iter().map(move |x| x * m)
            })
            .collect()
    })
}

fn problem(max_m: usize) -> impl Strategy<Value = (Vec<i8>, Vec<f32>, Vec<i8>, Vec<f32>, usize, usize, usize)> {
    (prop::sample::select(vec![8usize, 16, 32, 64]), 1usize..=8, 1usize..=max_m).prop_flat_map(|(gs, groups, m)| {
        let n = gs * groups;
        (
            prop::collection::vec(any::<i8>(), m * n),
            prop::collection::vec(1e-4f32..1.0, m * groups),
            prop::collection::vec(any::<i8>(), n),
            prop::collection::vec(1e-4f32..1.0, groups),
            Just(m),
            Just(n),
            Just(gs),
        )
    })
}

fn hw() -> impl Strategy<Value = HwConfig> {
    (
        prop::sample::select(vec![4usize, 8, 16, 32]),
        prop::sample::select(vec![1usize, 2, 4, 8]),
        1e8f64..5e8,
        0.5f64..64.0,
        1usize..=4,
        0.0f64..8.0,
    )
        .prop_map(|(lanes, mult, clock, ddr, depth, latency)| HwConfig {
            simd_lanes: lanes,
            gs: lanes * mult,
            clock_hz: clock,
            ddr_bytes_per_cycle: ddr,
            stream_depth: depth,
            stage_latency: latency,
        })
}

fn costs() -> impl Strategy<Value = ScheduleCosts> {
    (1usize..40).prop_flat_map(|l| {
        (prop::collection::vec(0.0f64..10.0, l), prop::collection::vec(0.0f64..10.0, l))
            .prop_map(|(compute, transfer)| ScheduleCosts { compute, transfer })
    })
}

proptest! {
    #[test]
    fn quantization_error_and_scale(
        (gs, v) in prop::sample::select(vec![8usize, 32, 256]).prop_flat_map(|gs| (Just(gs), groups(gs)))
    ) {
        let q = quantize(&v, QuantSpec::new(gs).unwrap()).unwrap();
        let back = dequantize(&q);
        prop_assert!(q.values().iter().all(|&x| (-128..=127).contains(&(x as i32))));
        for (g, chunk) in v.chunks(gs).enumerate() {
            let s = q.scales()[g];
            let m = chunk.iter().fold(0.0f64, |a, &r| a.max((r as f64).abs()));
            if m == 0.0 {
                prop_assert_eq!(s, 1.0);
                continue;
            }
            let ideal = 2.0 * m / 255.0;
            let ulp = (f32::from_bits(s.to_bits() + 1) - s) as f64;
            prop_assert!((s as f64 - ideal).abs() <= ulp, "scale {} vs {}", s, ideal);
            let bound = s as f64 * (0.5 + 1.0 / 255.0) + 2f64.powi(-20);
            for (r, b) in chunk.iter().zip(&back[g * gs..(g + 1) * gs]) {
                prop_assert!((*r as f64 - *b as f64).abs() <= bound);
            }
        }
    }

    #[test]
    fn gqmv_kernels_agree_with_fp64((wq, ws, xq, xs, m, n, gs) in problem(64)) {
        let p = GqmvProblem::new(&wq[..], &ws[..], &xq[..], &xs[..], m, n, gs).unwrap();
        prop_assert_eq!(group_sums_staged(&p).unwrap(), group_sums_reference(&p).unwrap());
        let r = gqmv_reference(&p).unwrap();
        let s = gqmv_staged(&p).unwrap();
        let g = n / gs;
        for i in 0..m {
            let (mut exact, mut mag) = (0.0f64, 0.0f64);
            for k in 0..g {
                let sum: i64 = (k * gs..(k + 1) * gs).map(|j| wq[i * n + j] as i64 * xq[j] as i64).sum();
                let t = sum as f64 * ws[i * g + k] as f64 * xs[k] as f64;
                exact += t;
                mag += t.abs();
            }
            let mag = mag.max(f64::MIN_POSITIVE);
            prop_assert!((r[i] as f64 - exact).abs() <= 1e-5 * mag);
            prop_assert!((s[i] as f64 - exact).abs() <= 1e-5 * mag);
            prop_assert!((r[i] as f64 - s[i] as f64).abs() <= 1e-6 * mag);
        }
    }

    #[test]
    fn concatenated_rows_give_concatenated_outputs(
        (wq, ws, xq, xs, m, n, gs) in problem(32),
        split in 0.0f64..1.0,
    ) {
        let cut = ((m as f64 * split) as usize).clamp(1, m.max(2) - 1).min(m);
        prop_assume!(cut < m);
        let g = n / gs;
        let top = GqmvProblem::new(&wq[..cut * n], &ws[..cut * g], &xq[..], &xs[..], cut, n, gs).unwrap();
        let bottom = GqmvProblem::new(&wq[cut * n..], &ws[cut * g..], &xq[..], &xs[..], m - cut, n, gs).unwrap();
        let both = concat_rows(&[top.clone(), bottom.clone()]).unwrap();
        let mut parts = gqmv_reference(&top).unwrap();
        parts.extend(gqmv_reference(&bottom).unwrap());
        let whole = gqmv_reference(&both).unwrap();
        prop_assert_eq!(
            whole.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            parts.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn simulator_roofline_and_accounting(hw in hw(), m in 1usize..300, groups in 1usize..8) {
        let n = hw.gs * groups;
        let r = simulate_gqmv(m, n, &hw).unwrap();
        prop_assert!(r.sustained_gops <= peak_gops(&hw) * (1.0 + 1e-12));
        let parts = r.fill_cycles + r.busy_cycles + r.stall_cycles + r.blocked_cycles + r.drain_cycles;
        prop_assert!((parts - r.total_cycles).abs() <= 1e-9 * r.total_cycles, "{} vs {}", parts, r.total_cycles);
        prop_assert!(r.fill_cycles >= 0.0 && r.stall_cycles >= 0.0 && r.blocked_cycles >= 0.0 && r.drain_cycles >= 0.0);
        prop_assert_eq!(r.ops, 2 * m as u64 * n as u64);
    }

    #[test]
    fn simulator_is_monotone_in_bandwidth_and_clock(
        hw in hw(),
        m in 1usize..300,
        groups in 1usize..8,
        more in 1.0f64..4.0,
    ) {
        let n = hw.gs * groups;
        let base = simulate_gqmv(m, n, &hw).unwrap().sustained_gops;
        let wider = simulate_gqmv(m, n, &hw.with_ddr(hw.ddr_bytes_per_cycle * more)).unwrap().sustained_gops;
        let faster = simulate_gqmv(m, n, &HwConfig { clock_hz: hw.clock_hz * more, ..hw }).unwrap().sustained_gops;
        prop_assert!(wider >= base * (1.0 - 1e-12), "{} < {}", wider, base);
        prop_assert!(faster >= base * (1.0 - 1e-12), "{} < {}", faster, base);
    }

    #[test]
    fn simulator_amortizes_fill_over_rows(hw in hw(), groups in 1usize..8, m in 1usize..2000) {
        let n = hw.gs * groups;
        let small = simulate_gqmv(m, n, &hw).unwrap().sustained_gops;
        let large = simulate_gqmv(m + 1 + m / 3, n, &hw).unwrap().sustained_gops;
        prop_assert!(large >= small * (1.0 - 1e-12), "{} rows {} > more rows {}", m, small, large);
        let supply = hw.ddr_bytes_per_cycle * hw.clock_hz * 2.0 * n as f64 / row_bytes(n, hw.gs) / 1e9;
        let roof = peak_gops(&hw).min(supply);
        let big = simulate_gqmv(1000 + m, n, &hw).unwrap().sustained_gops;
        prop_assert!(big >= 0.98 * roof, "{} GOPS at {} rows, roofline {}", big, 1000 + m, roof);
    }

    #[test]
    fn async_never_loses_to_sync(c in costs()) {
        let sync = plan_schedule(&c, ScheduleMode::Sync).unwrap().total_time;
        let asy = plan_schedule(&c, ScheduleMode::Async).unwrap().total_time;
        prop_assert!(asy <= sync + 1e-12 * sync);
        let busiest = c.compute.iter().sum::<f64>().max(c.transfer.iter().sum());
        prop_assert!(asy >= busiest - 1e-9);
    }

    #[test]
    fn nothing_to_overlap_means_equal_totals(c in costs(), zero_transfers in any::<bool>()) {
        let c = if zero_transfers {
            ScheduleCosts { transfer: vec![0.0; c.compute.len()], ..c }
        } else {
            ScheduleCosts { compute: c.compute[..1].to_vec(), transfer: c.transfer[..1].to_vec() }
        };
        let sync = plan_schedule(&c, ScheduleMode::Sync).unwrap().total_time;
        let asy = plan_schedule(&c, ScheduleMode::Async).unwrap().total_time;
        prop_assert!((asy - sync).abs() <= 1e-12 * sync.max(1.0));
    }

    #[test]
    fn rope_preserves_pair_norms(
        q in prop::collection::vec(-10.0f32..10.0, 64),
        k in prop::collection::vec(-10.0f32..10.0, 32),
        pos in 0usize..256,
    ) {
        let c = ModelConfig::tiny();
        let (mut q2, mut k2) = (q.clone(), k.clone());
        rope_apply(&mut q2, &mut k2, pos, &c).unwrap();
        for (a, b) in q.chunks(2).chain(k.chunks(2)).zip(q2.chunks(2).chain(k2.chunks(2))) {
            let na = (a[0] as f64).hypot(a[1] as f64);
            let nb = (b[0] as f64).hypot(b[1] as f64);
            prop_assert!((na - nb).abs() <= 1e-6 * na.max(1e-30), "{} vs {}", na, nb);
        }
    }

    #[test]
    fn softmax_sums_to_one(mut x in prop::collection::vec(-80.0f32..80.0, 1..300)) {
        softmax(&mut x);
        let sum: f64 = x.iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
        prop_assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

fn tiny_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(vec![(1usize, 1usize), (2, 1), (2, 2), (4, 1), (4, 2)]),
        prop::sample::select(vec![8usize, 16]),
        1usize..=3,
        1usize..=3,
        prop::sample::select(vec![64usize, 300]),
        any::<bool>(),
    )
        .prop_map(|((heads, kv), gs, hd_mult, layers, vocab, shared)| {
            let hd = gs * hd_mult;
            ModelConfig {
                dim: heads * hd,
                hidden_dim: 2 * heads * hd,
                n_layers: layers,
                n_heads: heads,
                n_kv_heads: kv,
                vocab_size: vocab,
                seq_len: 32,
                gs,
                shared_classifier: shared,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 24,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..ProptestConfig::default()
    })]

    #[test]
    fn incremental_decoding_equals_full_recomputation(
        c in tiny_config(),
        seed in any::<u64>(),
        raw in prop::collection::vec(any::<u32>(), 1..12),
    ) {
        let w = gen_synthetic(&c, seed).unwrap();
        let (p, layers) = quantize_weights(&c, &w).unwrap();
        let oracle = OracleModel::<f64>::from_quantized(&c, &p, &layers);
        let mut engine = Engine::from_parts(c, p, layers, 1).unwrap();
        let tokens: Vec<u32> = raw.iter().map(|t| t % c.vocab_size as u32).collect();
        let want = oracle.logits(&tokens);
        for (pos, &t) in tokens.iter().enumerate() {
            let got = engine.forward(t, pos).unwrap();
            let err = max_rel_diff(got, &want[pos]);
            prop_assert!(err <= 1e-4, "{:?} position {}: {:e}", c, pos, err);
        }
    }
}
