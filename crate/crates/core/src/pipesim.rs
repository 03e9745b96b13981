//! Stage-level timing model of a pipelined GQMV accelerator.
//!
//! Three stages are connected by bounded streams:
//!
//! * **read** pulls one row of INT8 weights plus its per-group scales from
//!   off-chip memory, `simd_lanes` values per cycle at best, and slower when
//!   the memory supply rate lags;
//! * **dot** consumes one lane vector per cycle and pushes group sums through
//!   an adder tree of depth `log2(gs)`;
//! * **accumulate** scales and sums `n / gs` group sums per row.
//!
//! The input vector and its scales are fetched once before the row loop.
//! Memory is modelled as a sustained byte rate; cycle counts are real-valued
//! for that reason. Nothing here computes matrix values.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HwConfig {
    /// INT8 elements consumed per cycle.
    pub simd_lanes: usize,
    pub gs: usize,
    pub clock_hz: f64,
    /// Sustained off-chip supply in bytes per cycle; `f64::INFINITY` for
    /// unlimited.
    pub ddr_bytes_per_cycle: f64,
    /// Capacity of each inter-stage stream, in rows.
    pub stream_depth: usize,
    /// Fixed latency of each stage, in cycles.
    pub stage_latency: f64,
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig {
            simd_lanes: 16,
            gs: 256,
            clock_hz: 205e6,
            ddr_bytes_per_cycle: f64::INFINITY,
            stream_depth: 2,
            stage_latency: 4.0,
        }
    }
}

impl HwConfig {
    pub fn with_ddr(self, ddr_bytes_per_cycle: f64) -> Self {
        HwConfig {
            ddr_bytes_per_cycle,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.simd_lanes == 0 || self.gs == 0 || self.stream_depth == 0 {
            return Err(Error::Config("lanes, group size and stream depth must be positive".into()));
        }
        if !self.gs.is_power_of_two() {
            return Err(Error::Config(format!("group size {} is not a power of two", self.gs)));
        }
        if self.gs % self.simd_lanes != 0 {
            return Err(Error::Config(format!(
                "{} lanes do not divide group size {}",
                self.simd_lanes, self.gs
            )));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Config(format!("clock {} Hz is not positive", self.clock_hz)));
        }
        if !(self.ddr_bytes_per_cycle > 0.0) {
            return Err(Error::Config(format!(
                "memory rate {} bytes/cycle is not positive",
                self.ddr_bytes_per_cycle
            )));
        }
        if !(self.stage_latency >= 0.0 && self.stage_latency.is_finite()) {
            return Err(Error::Config(format!("stage latency {} is negative", self.stage_latency)));
        }
        Ok(())
    }
}

/// Peak throughput: one multiply and one add per lane per cycle.
pub fn peak_gops(hw: &HwConfig) -> f64 {
    2.0 * hw.simd_lanes as f64 * hw.clock_hz / 1e9
}

/// Busy cycles per stage over the whole row loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCycles {
    pub read: f64,
    pub dot: f64,
    pub accumulate: f64,
}

/// Cycle accounting for one simulated GQMV.
///
/// Seen from the read stage, which sets the pace,
/// `fill + busy + stall + blocked + drain == total`, where `fill` is the
/// input prefetch, `busy` is lane-limited reading, `stall` is time waiting on
/// memory, `blocked` is time waiting on a full output stream and `drain` is
/// the time after the last row has been read.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub m: usize,
    pub n: usize,
    pub total_cycles: f64,
    pub fill_cycles: f64,
    pub busy_cycles: f64,
    pub stall_cycles: f64,
    pub blocked_cycles: f64,
    pub drain_cycles: f64,
    /// Average cycles between consecutive rows leaving the read stage.
    pub steady_row_cycles: f64,
    pub stage_busy: StageCycles,
    pub ops: u64,
    pub sustained_gops: f64,
    pub peak_gops: f64,
}

impl SimReport {
    pub fn seconds(&self, hw: &HwConfig) -> f64 {
        self.total_cycles / hw.clock_hz
    }
}

/// Bytes streamed per weight row: the INT8 values and one FP32 scale per group.
pub fn row_bytes(n: usize, gs: usize) -> f64 {
    (n + 4 * (n / gs)) as f64
}

pub fn simulate_gqmv(m: usize, n: usize, hw: &HwConfig) -> Result<SimReport> {
    hw.validate()?;
    if m == 0 || n == 0 || n % hw.gs != 0 {
        return Err(Error::InvalidShape(format!(
            "{m}x{n} matrix with group size {}",
            hw.gs
        )));
    }
    let lanes = hw.simd_lanes as f64;
    let ddr = hw.ddr_bytes_per_cycle;
    let lat = hw.stage_latency;
    let tree = hw.gs.trailing_zeros() as f64;
    let depth = hw.stream_depth;

    let lane_row = n as f64 / lanes;
    let acc_row = (n / hw.gs) as f64;
    let bytes_per_row = row_bytes(n, hw.gs);

    // x and its scales, once, at whichever of lanes or memory is slower.
    let prefetch = (bytes_per_row / lanes.min(ddr)).ceil();

    let mut d_start = vec![0.0f64; m];
    let mut a_start = vec![0.0f64; m];
    let (mut r_end, mut d_end, mut a_end) = (prefetch, 0.0f64, 0.0f64);
    let (mut stall, mut blocked) = (0.0f64, 0.0f64);
    let mut first_row_end = 0.0;

    for i in 0..m {
        // read: wait for room in the stream to dot, then for memory supply
        let mut rs = r_end;
        if i >= depth {
            rs = rs.max(d_start[i - depth] - lat);
        }
        blocked += rs - r_end;
        let supplied = prefetch + ((i + 1) as f64 * bytes_per_row) / ddr;
        let re = (rs + lane_row).max(supplied);
        stall += re - (rs + lane_row);

        // dot: one lane vector per cycle, never ahead of its input; the
        // adder tree is pipelined, so only its output waits for stream room
        let mut ds = d_end.max(rs + lat);
        if i >= depth {
            ds = ds.max(a_start[i - depth] - lat - tree);
        }
        let de = (ds + lane_row).max(re + lat);
        d_start[i] = ds;

        // accumulate: one group sum per cycle after the adder tree
        let as_ = a_end.max(ds + lat + tree);
        a_start[i] = as_;
        a_end = (as_ + acc_row).max(de + lat + tree);

        r_end = re;
        d_end = de;
        if i == 0 {
            first_row_end = re;
        }
    }
    let total = a_end + lat;
    let steady_row_cycles = if m > 1 {
        (r_end - first_row_end) / (m - 1) as f64
    } else {
        first_row_end - prefetch
    };
    let busy = m as f64 * lane_row;
    let ops = 2 * m as u64 * n as u64;
    Ok(SimReport {
        m,
        n,
        total_cycles: total,
        fill_cycles: prefetch,
        busy_cycles: busy,
        stall_cycles: stall,
        blocked_cycles: blocked,
        drain_cycles: total - r_end,
        steady_row_cycles,
        stage_busy: StageCycles {
            read: busy,
            dot: busy,
            accumulate: m as f64 * acc_row,
        },
        ops,
        sustained_gops: ops as f64 / (total / hw.clock_hz) / 1e9,
        peak_gops: peak_gops(hw),
    })
}

/// Finds the smallest memory rate at which the simulated throughput on an
/// `m x n` product reaches `target_gops`.
pub fn calibrate_ddr(target_gops: f64, m: usize, n: usize, hw: &HwConfig) -> Result<f64> {
    hw.validate()?;
    let peak = peak_gops(hw);
    if !(target_gops > 0.0) || target_gops > peak {
        return Err(Error::Infeasible(format!(
            "target {target_gops} GOPS is outside (0, {peak}]"
        )));
    }
    let gops = |ddr: f64| simulate_gqmv(m, n, &hw.with_ddr(ddr)).map(|r| r.sustained_gops);

    // Beyond this rate memory never holds the read stage back.
    let mut hi = row_bytes(n, hw.gs) / (n as f64 / hw.simd_lanes as f64);
    hi = hi.max(hw.simd_lanes as f64);
    let best = gops(hi)?;
    if target_gops > best * 1.01 {
        return Err(Error::Infeasible(format!(
            "target {target_gops} GOPS is above the {best:.4} GOPS reachable at {m}x{n}"
        )));
    }
    let goal = target_gops.min(best);

    let mut lo = hi;
    for _ in 0..200 {
        lo /= 2.0;
        if gops(lo)? < goal {
            break;
        }
    }
    if gops(lo)? >= goal {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gops(mid)? >= goal {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn peak_examples() {
        assert!((peak_gops(&HwConfig::default()) - 6.56).abs() < 1e-12);
        let unit = HwConfig {
            simd_lanes: 1,
            gs: 1,
            clock_hz: 1.0,
            ..HwConfig::default()
        };
        assert!((peak_gops(&unit) - 2e-9).abs() < 1e-24);
        let wide = HwConfig {
            simd_lanes: 32,
            ..HwConfig::default()
        };
        assert_eq!(peak_gops(&wide), 2.0 * peak_gops(&HwConfig::default()));
    }

    #[test]
    fn unlimited_memory_runs_at_lane_rate() {
        let r = simulate_gqmv(2048, 2048, &HwConfig::default()).unwrap();
        assert_eq!(r.steady_row_cycles, 128.0);
        assert_eq!(r.stall_cycles, 0.0);
        assert!(rel(r.sustained_gops, 6.56) < 0.02);
        assert_eq!(r.ops, 2 * 2048 * 2048);
    }

    #[test]
    fn half_rate_memory_roughly_halves_throughput() {
        let r = simulate_gqmv(2048, 2048, &HwConfig::default().with_ddr(8.0)).unwrap();
        // 2048 weights plus 8 four-byte scales per row at 8 bytes per cycle
        assert_eq!(r.steady_row_cycles, 260.0);
        assert!(r.stall_cycles > 0.0);
        assert!(rel(r.sustained_gops, 3.28) < 0.02, "{}", r.sustained_gops);
    }

    #[test]
    fn single_group_is_fill_dominated() {
        let r = simulate_gqmv(1, 256, &HwConfig::default()).unwrap();
        assert!(r.sustained_gops < 0.5 * r.peak_gops);
        assert!(r.fill_cycles + r.drain_cycles > r.busy_cycles);
    }

    #[test]
    fn accounting_closes() {
        for (m, ddr, depth) in [(1, f64::INFINITY, 1), (7, 3.0, 1), (300, 11.7, 2), (64, 40.0, 5)] {
            let hw = HwConfig {
                stream_depth: depth,
                ..HwConfig::default().with_ddr(ddr)
            };
            let r = simulate_gqmv(m, 512, &hw).unwrap();
            let sum = r.fill_cycles + r.busy_cycles + r.stall_cycles + r.blocked_cycles + r.drain_cycles;
            assert!((sum - r.total_cycles).abs() <= 1e-9 * r.total_cycles, "{sum} vs {}", r.total_cycles);
            assert!(r.stall_cycles <= r.total_cycles);
        }
    }

    #[test]
    fn calibration_examples() {
        let hw = HwConfig::default();
        let rate = calibrate_ddr(4.696, 32000, 2048, &hw).unwrap();
        let r = simulate_gqmv(32000, 2048, &hw.with_ddr(rate)).unwrap();
        assert!(rel(r.sustained_gops, 4.696) < 0.01);
        assert!(rel(rate, 11.45) < 0.02, "{rate}");

        let at_peak = calibrate_ddr(peak_gops(&hw), 32000, 2048, &hw).unwrap();
        assert!(at_peak >= 16.0);
        assert!(matches!(calibrate_ddr(7.0, 32000, 2048, &hw), Err(Error::Infeasible(_))));
        assert!(matches!(calibrate_ddr(6.5, 1, 256, &hw), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let hw = HwConfig::default();
        assert!(matches!(simulate_gqmv(4, 300, &hw), Err(Error::InvalidShape(_))));
        assert!(matches!(simulate_gqmv(0, 256, &hw), Err(Error::InvalidShape(_))));
        let odd = HwConfig { simd_lanes: 24, ..hw };
        assert!(simulate_gqmv(4, 256, &odd).is_err());
        let npot = HwConfig { gs: 96, simd_lanes: 16, ..hw };
        assert!(simulate_gqmv(4, 96, &npot).is_err());
        assert!(simulate_gqmv(4, 256, &hw.with_ddr(0.0)).is_err());
    }
}
