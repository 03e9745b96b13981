//! Built-in consistency checks, runnable from the command line.
//!
//! Each check compares a library routine with a small independent
//! computation or a hand-worked value.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::gqmv::{gqmv_reference, gqmv_staged, group_sums_reference, group_sums_staged, GqmvProblem};
use crate::model::{rope_apply, KvCache, ModelConfig, ResidentLayers, RunState, Transformer};
use crate::modelio::{self, gen_synthetic, quantize_weights, write_model_to};
use crate::pipesim::{calibrate_ddr, peak_gops, simulate_gqmv, HwConfig};
use crate::quant::{dequantize, quantize, QuantSpec};
use crate::stream::{plan_schedule, ScheduleCosts, ScheduleMode};
use crate::textio::{argmax, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> std::result::Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("quant-hand-example", quant_hand_example),
    ("quant-error-bound", quant_error_bound),
    ("gqmv-hand-trace", gqmv_hand_trace),
    ("gqmv-staged-vs-reference", gqmv_staged_vs_reference),
    ("rope-unit-rotation", rope_unit_rotation),
    ("kv-cache-replay", kv_cache_replay),
    ("model-file-round-trip", model_file_round_trip),
    ("schedule-closed-form", schedule_closed_form),
    ("pipeline-roofline", pipeline_roofline),
    ("tokenizer-round-trip", tokenizer_round_trip),
    ("greedy-argmax", greedy_argmax),
];

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            let seconds = t.elapsed().as_secs_f64();
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: crate::Error) -> String {
    e.to_string()
}

fn quant_hand_example() -> std::result::Result<String, String> {
    let q = quantize(&[2.0, -1.0, 0.5, 1.5], QuantSpec::new(4).map_err(e2s)?).map_err(e2s)?;
    ensure(q.values() == [127, -64, 32, 96], || format!("values {:?}", q.values()))?;
    ensure((q.scales()[0] - 4.0 / 255.0).abs() < 1e-7, || format!("scale {}", q.scales()[0]))?;
    Ok("[2, -1, 0.5, 1.5] -> [127, -64, 32, 96]".into())
}

fn quant_error_bound() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = QuantSpec::new(256).map_err(e2s)?;
    let r: Vec<f32> = (0..256 * 64).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let q = quantize(&r, spec).map_err(e2s)?;
    let back = dequantize(&q);
    let mut worst = 0.0f64;
    for (g, chunk) in r.chunks(256).enumerate() {
        let m = chunk.iter().fold(0.0f64, |a, &x| a.max((x as f64).abs()));
        let s = 2.0 * m / 255.0;
        for (i, &x) in chunk.iter().enumerate() {
            let err = (back[g * 256 + i] as f64 - x as f64).abs();
            let bound = s * (0.5 + 1.0 / 255.0) + 2f64.powi(-20);
            ensure(err <= bound, || format!("group {g} element {i}: error {err} over {bound}"))?;
            worst = worst.max(err / s);
        }
    }
    Ok(format!("worst error {worst:.4} scale steps"))
}

fn gqmv_hand_trace() -> std::result::Result<String, String> {
    let p = GqmvProblem::new(
        vec![1, 2, 3, 4, -1, -2, -3, -4],
        vec![0.5, 0.25],
        vec![1, 1, 1, 1, 2, 2, 2, 2],
        vec![2.0, 1.0],
        1,
        8,
        4,
    )
    .map_err(e2s)?;
    // group sums 10 and -20; 10*0.5*2 + (-20)*0.25*1 = 5
    let sums = group_sums_reference(&p).map_err(e2s)?;
    ensure(sums == [10, -20], || format!("group sums {sums:?}"))?;
    let out = gqmv_reference(&p).map_err(e2s)?;
    ensure(out == [5.0], || format!("output {out:?}"))?;
    Ok("sums [10, -20], output 5".into())
}

fn gqmv_staged_vs_reference() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let gs = [32, 64, 256][case % 3];
        let n = gs * rng.random_range(1..5usize);
        let m = rng.random_range(1..40usize);
        let wq: Vec<i8> = (0..m * n).map(|_| rng.random()).collect();
        let xq: Vec<i8> = (0..n).map(|_| rng.random()).collect();
        let ws: Vec<f32> = (0..m * n / gs).map(|_| rng.random_range(0.001f32..0.1)).collect();
        let xs: Vec<f32> = (0..n / gs).map(|_| rng.random_range(0.001f32..0.1)).collect();
        let p = GqmvProblem::new(wq.clone(), ws.clone(), xq.clone(), xs.clone(), m, n, gs).map_err(e2s)?;
        ensure(
            group_sums_staged(&p).map_err(e2s)? == group_sums_reference(&p).map_err(e2s)?,
            || format!("case {case}: staged group sums differ"),
        )?;
        let a = gqmv_staged(&p).map_err(e2s)?;
        for i in 0..m {
            let mut exact = 0.0f64;
            let mut mag = 0.0f64;
            for g in 0..n / gs {
                let s: i64 = (0..gs).map(|k| wq[i * n + g * gs + k] as i64 * xq[g * gs + k] as i64).sum();
                let t = s as f64 * ws[i * n / gs + g] as f64 * xs[g] as f64;
                exact += t;
                mag += t.abs();
            }
            let err = (a[i] as f64 - exact).abs();
            ensure(err <= 1e-5 * mag.max(f64::MIN_POSITIVE), || {
                format!("case {case} row {i}: {} vs {exact}", a[i])
            })?;
        }
    }
    Ok("20 random instances".into())
}

fn rope_unit_rotation() -> std::result::Result<String, String> {
    let c = ModelConfig {
        dim: 2,
        hidden_dim: 2,
        n_layers: 1,
        n_heads: 1,
        n_kv_heads: 1,
        vocab_size: 4,
        seq_len: 4,
        gs: 2,
        shared_classifier: true,
    };
    let mut q = [1.0f32, 0.0];
    let mut k = [1.0f32, 0.0];
    rope_apply(&mut q, &mut k, 1, &c).map_err(e2s)?;
    ensure((q[0] - 1f32.cos()).abs() < 1e-6 && (q[1] - 1f32.sin()).abs() < 1e-6, || format!("{q:?}"))?;
    Ok(format!("({:.5}, {:.5})", q[0], q[1]))
}

fn kv_cache_replay() -> std::result::Result<String, String> {
    let c = ModelConfig::tiny();
    let w = gen_synthetic(&c, 3).map_err(e2s)?;
    let (p, layers) = quantize_weights(&c, &w).map_err(e2s)?;
    let t = Transformer::new(c, p).map_err(e2s)?;
    let mut provider = ResidentLayers::new(layers);
    let tokens = [1u32, 40, 300, 7, 99, 12];

    let mut state = RunState::new(&c).map_err(e2s)?;
    let mut cache = KvCache::new(&c);
    let mut incremental = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        incremental.push(t.forward(tok, pos, &mut provider, &mut state, &mut cache).map_err(e2s)?.to_vec());
    }
    // A second pass over a fresh cache must give bit-identical logits.
    let mut state = RunState::new(&c).map_err(e2s)?;
    let mut cache = KvCache::new(&c);
    let mut last = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        last = t.forward(tok, pos, &mut provider, &mut state, &mut cache).map_err(e2s)?.to_vec();
    }
    ensure(last == *incremental.last().unwrap(), || "replayed logits differ".into())?;
    ensure(incremental.iter().flatten().all(|x| x.is_finite()), || "non-finite logits".into())?;
    Ok(format!("{} positions", tokens.len()))
}

fn model_file_round_trip() -> std::result::Result<String, String> {
    let c = ModelConfig::tiny();
    let w = gen_synthetic(&c, 9).map_err(e2s)?;
    let mut bytes = Vec::new();
    write_model_to(&c, &w, &mut bytes).map_err(e2s)?;
    let layout = modelio::ModelLayout::new(&c);
    ensure(bytes.len() as u64 == layout.file_size, || {
        format!("{} bytes written, {} expected", bytes.len(), layout.file_size)
    })?;
    let dir = std::env::temp_dir().join(format!("qllama-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("tiny.lamf");
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let result = (|| {
        let mut e = Engine::open(&path, Default::default()).map_err(e2s)?;
        let (p, _) = quantize_weights(&c, &w).map_err(e2s)?;
        let loaded = e.transformer().persistent();
        ensure(loaded.embeddings.tensor().values() == p.embeddings.tensor().values(), || {
            "embedding values differ after reading".into()
        })?;
        let logits = e.forward(1, 0).map_err(e2s)?;
        ensure(logits.iter().all(|x| x.is_finite()), || "non-finite logits".into())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result?;
    Ok(format!("{} bytes", bytes.len()))
}

fn schedule_closed_form() -> std::result::Result<String, String> {
    let c = ScheduleCosts::uniform(22, 10.0, 8.0);
    let s = plan_schedule(&c, ScheduleMode::Sync).map_err(e2s)?.total_time;
    let a = plan_schedule(&c, ScheduleMode::Async).map_err(e2s)?.total_time;
    ensure(s == 396.0 && a == 228.0, || format!("sync {s}, async {a}"))?;
    Ok(format!("sync {s}, async {a}"))
}

fn pipeline_roofline() -> std::result::Result<String, String> {
    let hw = HwConfig::default();
    let peak = peak_gops(&hw);
    ensure((peak - 6.56).abs() < 1e-9, || format!("peak {peak}"))?;
    let r = simulate_gqmv(32000, 2048, &hw).map_err(e2s)?;
    ensure((r.sustained_gops - peak).abs() / peak < 0.02, || format!("sustained {}", r.sustained_gops))?;
    let rate = calibrate_ddr(4.696, 32000, 2048, &hw).map_err(e2s)?;
    Ok(format!("peak {peak:.2} GOPS, 4.696 GOPS at {rate:.2} bytes/cycle"))
}

fn tokenizer_round_trip() -> std::result::Result<String, String> {
    let v = Vocabulary::synthetic(512).map_err(e2s)?;
    for s in ["", "once upon a time", "naïve café ✓", "\u{1F600} tab\t newline\n"] {
        let back = v.decode(&v.encode(s, true)).map_err(e2s)?;
        ensure(back == s, || format!("{s:?} came back as {back:?}"))?;
    }
    Ok("4 strings".into())
}

fn greedy_argmax() -> std::result::Result<String, String> {
    let id = argmax(&[0.0, 5.0, 1.0]).map_err(e2s)?;
    ensure(id == 1, || format!("picked {id}"))?;
    let tie = argmax(&[3.0, 3.0]).map_err(e2s)?;
    ensure(tie == 0, || format!("tie picked {tie}"))?;
    Ok("[0, 5, 1] -> 1".into())
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
