//! Group-wise symmetric INT8 quantization.
//!
//! A tensor is cut into consecutive groups of `group_size` elements. Each
//! group gets its own FP32 scale `S = 2·max|r| / 255`, and each element is
//! stored as `round(r / S)` clamped to `[-128, 127]`. Rounding is half away
//! from zero. A group whose elements are all zero is stored with scale `1.0`
//! so that dequantization stays exact.

use crate::error::{Error, Result};

/// Group size used by every quantized tensor in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    group_size: usize,
}

impl QuantSpec {
    pub fn new(group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidValue("group size must be at least 1".into()));
        }
        Ok(QuantSpec { group_size })
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Number of groups covering `numel` elements, or an error if the count
    /// is not a whole number of groups.
    pub fn groups_for(&self, numel: usize) -> Result<usize> {
        if numel % self.group_size != 0 {
            return Err(Error::InvalidShape(format!(
                "{numel} elements is not a multiple of group size {}",
                self.group_size
            )));
        }
        Ok(numel / self.group_size)
    }
}

/// INT8 values with one FP32 scale per group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    values: Vec<i8>,
    scales: Vec<f32>,
    spec: QuantSpec,
}

impl QuantizedTensor {
    /// All-zero tensor of `numel` elements (every scale set to 1.0).
    pub fn zeros(numel: usize, spec: QuantSpec) -> Result<Self> {
        let groups = spec.groups_for(numel)?;
        Ok(QuantizedTensor {
            values: vec![0; numel],
            scales: vec![1.0; groups],
            spec,
        })
    }

    /// Assembles a tensor from raw parts, checking the type invariants.
    pub fn from_parts(values: Vec<i8>, scales: Vec<f32>, spec: QuantSpec) -> Result<Self> {
        let groups = spec.groups_for(values.len())?;
        if scales.len() != groups {
            return Err(Error::InvalidShape(format!(
                "{} scales for {groups} groups",
                scales.len()
            )));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::InvalidValue(format!("scale {s} is negative or non-finite")));
        }
        Ok(QuantizedTensor { values, scales, spec })
    }

    #[inline]
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    #[inline]
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    #[inline]
    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Storage footprint: one byte per value plus four per scale.
    pub fn byte_size(&self) -> usize {
        self.values.len() + 4 * self.scales.len()
    }

    pub fn into_parts(self) -> (Vec<i8>, Vec<f32>) {
        (self.values, self.scales)
    }

    /// Re-quantizes `real` into this tensor's existing buffers.
    ///
    /// The forward pass calls this before every matrix kernel so activation
    /// buffers are never reallocated.
    pub fn requantize(&mut self, real: &[f32]) -> Result<()> {
        if real.len() != self.values.len() {
            return Err(Error::InvalidShape(format!(
                "cannot requantize {} values into a tensor of {}",
                real.len(),
                self.values.len()
            )));
        }
        quantize_groups(real, self.spec.group_size, &mut self.values, &mut self.scales)
    }
}

/// Scale of one group: `2·max|r| / 255`, or `1.0` for an all-zero group.
#[inline]
pub fn group_scale(group: &[f32]) -> f32 {
    let max_abs = group.iter().fold(0.0f32, |m, r| m.max(r.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        // 2·M/255 with a single rounding; dividing by 127.5 avoids overflow of 2·M.
        // Groups of tiny subnormals would underflow to 0, so floor at the
        // smallest positive f32.
        (max_abs / 127.5).max(f32::from_bits(1))
    }
}

/// Quantizes a single value against a scale (round half away from zero, clamp).
#[inline]
pub fn quantize_value(r: f32, scale: f32) -> i8 {
    (r / scale).round().clamp(-128.0, 127.0) as i8
}

fn quantize_groups(real: &[f32], gs: usize, values: &mut [i8], scales: &mut [f32]) -> Result<()> {
    if let Some(bad) = real.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidValue(format!("cannot quantize non-finite value {bad}")));
    }
    for ((group, out), scale) in real
        .chunks_exact(gs)
        .zip(values.chunks_exact_mut(gs))
        .zip(scales.iter_mut())
    {
        let s = group_scale(group);
        *scale = s;
        let max_abs = group.iter().fold(0.0f32, |m, r| m.max(r.abs()));
        // The extreme element sits exactly on the ±127.5 tie of the ideal
        // scale; FP32 division can land on either side of it, so its code is
        // taken from the exact ratio instead.
        let exact_tie = max_abs > 0.0 && max_abs / 127.5 >= f32::from_bits(1);
        for (q, &r) in out.iter_mut().zip(group) {
            *q = if exact_tie && r.abs() == max_abs {
                if r > 0.0 { 127 } else { -128 }
            } else {
                quantize_value(r, s)
            };
        }
    }
    Ok(())
}

pub fn quantize(real: &[f32], spec: QuantSpec) -> Result<QuantizedTensor> {
    let groups = spec.groups_for(real.len())?;
    let mut values = vec![0i8; real.len()];
    let mut scales = vec![0f32; groups];
    quantize_groups(real, spec.group_size, &mut values, &mut scales)?;
    Ok(QuantizedTensor { values, scales, spec })
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f32> {
    let mut out = vec![0.0; q.numel()];
    dequantize_into(q.values(), q.scales(), q.spec.group_size, &mut out);
    out
}

/// Dequantizes a slice of whole groups into `out`.
pub fn dequantize_into(values: &[i8], scales: &[f32], gs: usize, out: &mut [f32]) {
    debug_assert_eq!(values.len(), out.len());
    debug_assert_eq!(values.len(), scales.len() * gs);
    for ((group, dst), &s) in values
        .chunks_exact(gs)
        .zip(out.chunks_exact_mut(gs))
        .zip(scales)
    {
        for (d, &v) in dst.iter_mut().zip(group) {
            *d = v as f32 * s;
        }
    }
}

/// Summary of `|r̂ − r|` over a tensor.
///
/// Relative statistics are percentages of `|r|` and skip elements where
/// `r == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub max: f32,
    pub min: f32,
    pub mean: f32,
    pub std: f32,
    pub mean_rel_pct: f32,
    pub std_rel_pct: f32,
}

pub fn error_stats(original: &[f32], q: &QuantizedTensor) -> Result<ErrorStats> {
    if original.len() != q.numel() {
        return Err(Error::InvalidShape(format!(
            "original has {} elements, quantized tensor has {}",
            original.len(),
            q.numel()
        )));
    }
    let restored = dequantize(q);
    Ok(error_stats_between(original, &restored))
}

/// Error statistics between two equally long slices.
pub fn error_stats_between(original: &[f32], restored: &[f32]) -> ErrorStats {
    assert_eq!(original.len(), restored.len());
    let mut abs = Moments::default();
    let mut rel = Moments::default();
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for (&r, &rh) in original.iter().zip(restored) {
        let e = (rh as f64 - r as f64).abs();
        max = max.max(e);
        min = min.min(e);
        abs.push(e);
        if r != 0.0 {
            rel.push(100.0 * e / (r as f64).abs());
        }
    }
    if original.is_empty() {
        min = 0.0;
    }
    ErrorStats {
        max: max as f32,
        min: min as f32,
        mean: abs.mean() as f32,
        std: abs.std() as f32,
        mean_rel_pct: rel.mean() as f32,
        std_rel_pct: rel.std() as f32,
    }
}

#[derive(Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    // population standard deviation
    fn std(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum_sq / self.n as f64 - m * m).max(0.0).sqrt()
    }
}
