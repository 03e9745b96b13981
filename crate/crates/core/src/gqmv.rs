//! Group-wise quantized matrix-vector multiplication (GQMV).
//!
//! Two kernels compute the same product:
//!
//! * [`gqmv_reference`] walks rows and groups in order, accumulating each
//!   group's integer dot product and folding it into an FP32 row sum as
//!   `sum += group_sum · ws · xs`.
//! * [`gqmv_staged`] follows the accelerator's dataflow: a pre-processing
//!   stage widens INT8 to INT16, a dot-product stage multiplies lane-wise and
//!   reduces each group with a balanced adder tree whose first level widens to
//!   INT32, and an accumulate stage forms `float_scale = ws · xs` per group and
//!   dots it with the FP32-cast group sums.
//!
//! Integer group sums of both kernels are bit-identical. The final FP32 values
//! differ only by the association of the scale products.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{QuantSpec, QuantizedTensor};

/// A row-major quantized weight matrix. Groups never straddle rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    data: QuantizedTensor,
}

impl QuantizedMatrix {
    pub fn new(rows: usize, cols: usize, data: QuantizedTensor) -> Result<Self> {
        if rows * cols != data.numel() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix cannot hold {} elements",
                data.numel()
            )));
        }
        data.spec().groups_for(cols)?;
        Ok(QuantizedMatrix { rows, cols, data })
    }

    /// Quantizes a row-major FP32 matrix.
    pub fn quantize(rows: usize, cols: usize, real: &[f32], spec: QuantSpec) -> Result<Self> {
        if real.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix given {} values",
                real.len()
            )));
        }
        spec.groups_for(cols)?;
        Self::new(rows, cols, crate::quant::quantize(real, spec)?)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn tensor(&self) -> &QuantizedTensor {
        &self.data
    }

    pub fn byte_size(&self) -> usize {
        self.data.byte_size()
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            values: self.data.values(),
            scales: self.data.scales(),
            rows: self.rows,
            cols: self.cols,
            gs: self.data.spec().group_size(),
        }
    }

    /// Stacks matrices that share a column count into one (the fused QKV and
    /// W1/W3 projections).
    pub fn concat(parts: &[&QuantizedMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot concatenate zero matrices".into()))?;
        let spec = first.data.spec();
        let mut values = Vec::new();
        let mut scales = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != first.cols || p.data.spec() != spec {
                return Err(Error::InvalidShape(format!(
                    "cannot stack a {}-column matrix (gs {}) onto {} columns (gs {})",
                    p.cols,
                    p.data.spec().group_size(),
                    first.cols,
                    spec.group_size()
                )));
            }
            values.extend_from_slice(p.data.values());
            scales.extend_from_slice(p.data.scales());
            rows += p.rows;
        }
        Self::new(rows, first.cols, QuantizedTensor::from_parts(values, scales, spec)?)
    }
}

/// Borrowed view of a quantized matrix, possibly a row range of a larger one.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    values: &'a [i8],
    scales: &'a [f32],
    rows: usize,
    cols: usize,
    gs: usize,
}

impl<'a> MatrixView<'a> {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.gs
    }

    #[inline]
    pub fn values(&self) -> &'a [i8] {
        self.values
    }

    #[inline]
    pub fn scales(&self) -> &'a [f32] {
        self.scales
    }

    /// Rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> MatrixView<'a> {
        assert!(start <= end && end <= self.rows, "row range {start}..{end} of {}", self.rows);
        let gpr = self.cols / self.gs;
        MatrixView {
            values: &self.values[start * self.cols..end * self.cols],
            scales: &self.scales[start * gpr..end * gpr],
            rows: end - start,
            cols: self.cols,
            gs: self.gs,
        }
    }

    /// Dequantizes row `i` into `out`.
    pub fn dequantize_row(&self, i: usize, out: &mut [f32]) {
        let gpr = self.cols / self.gs;
        crate::quant::dequantize_into(
            &self.values[i * self.cols..(i + 1) * self.cols],
            &self.scales[i * gpr..(i + 1) * gpr],
            self.gs,
            out,
        );
    }
}

/// One GQMV instance: `out = dequant(wq, ws) · dequant(xq, xs)`.
#[derive(Debug, Clone)]
pub struct GqmvProblem<'a> {
    pub wq: Cow<'a, [i8]>,
    pub ws: Cow<'a, [f32]>,
    pub xq: Cow<'a, [i8]>,
    pub xs: Cow<'a, [f32]>,
    pub m: usize,
    pub n: usize,
    pub gs: usize,
}

impl<'a> GqmvProblem<'a> {
    pub fn new(
        wq: impl Into<Cow<'a, [i8]>>,
        ws: impl Into<Cow<'a, [f32]>>,
        xq: impl Into<Cow<'a, [i8]>>,
        xs: impl Into<Cow<'a, [f32]>>,
        m: usize,
        n: usize,
        gs: usize,
    ) -> Result<Self> {
        let p = GqmvProblem {
            wq: wq.into(),
            ws: ws.into(),
            xq: xq.into(),
            xs: xs.into(),
            m,
            n,
            gs,
        };
        p.validate()?;
        Ok(p)
    }

    /// Borrows a matrix and an activation vector.
    pub fn from_parts(w: MatrixView<'a>, x: &'a QuantizedTensor) -> Result<Self> {
        if x.spec().group_size() != w.gs {
            return Err(Error::InvalidShape(format!(
                "weight gs {} differs from activation gs {}",
                w.gs,
                x.spec().group_size()
            )));
        }
        Self::new(w.values, w.scales, x.values(), x.scales(), w.rows, w.cols, w.gs)
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.n / self.gs
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |msg: String| Err(Error::InvalidShape(msg));
        if self.gs == 0 || self.n == 0 || self.n % self.gs != 0 {
            return shape(format!("n = {} is not a positive multiple of gs = {}", self.n, self.gs));
        }
        let g = self.n / self.gs;
        if self.wq.len() != self.m * self.n {
            return shape(format!("wq has {} values, expected {}x{}", self.wq.len(), self.m, self.n));
        }
        if self.ws.len() != self.m * g {
            return shape(format!("ws has {} scales, expected {}", self.ws.len(), self.m * g));
        }
        if self.xq.len() != self.n {
            return shape(format!("xq has {} values, expected {}", self.xq.len(), self.n));
        }
        if self.xs.len() != g {
            return shape(format!("xs has {} scales, expected {g}", self.xs.len()));
        }
        Ok(())
    }

    fn row(&self, i: usize) -> (&[i8], &[f32]) {
        let g = self.groups_per_row();
        (&self.wq[i * self.n..(i + 1) * self.n], &self.ws[i * g..(i + 1) * g])
    }
}

#[inline]
fn group_dot(w: &[i8], x: &[i8]) -> i32 {
    w.iter().zip(x).map(|(&a, &b)| a as i32 * b as i32).sum()
}

/// One output row in the canonical order: groups left to right, each
/// contributing `group_sum · ws · xs`.
#[inline]
fn row_reference(w: &[i8], ws: &[f32], xq: &[i8], xs: &[f32], gs: usize) -> f32 {
    let mut sum = 0.0f32;
    for (((wg, &sw), xg), &sx) in w.chunks_exact(gs).zip(ws).zip(xq.chunks_exact(gs)).zip(xs) {
        sum += group_dot(wg, xg) as f32 * sw * sx;
    }
    sum
}

/// Integer group sums, row-major `m × n/gs`.
pub fn group_sums_reference(p: &GqmvProblem<'_>) -> Result<Vec<i32>> {
    p.validate()?;
    let mut sums = Vec::with_capacity(p.m * p.groups_per_row());
    for i in 0..p.m {
        let (w, _) = p.row(i);
        sums.extend(w.chunks_exact(p.gs).zip(p.xq.chunks_exact(p.gs)).map(|(a, b)| group_dot(a, b)));
    }
    Ok(sums)
}

pub fn gqmv_reference(p: &GqmvProblem<'_>) -> Result<Vec<f32>> {
    p.validate()?;
    Ok((0..p.m)
        .map(|i| {
            let (w, ws) = p.row(i);
            row_reference(w, ws, &p.xq, &p.xs, p.gs)
        })
        .collect())
}

/// Reference kernel writing into `out`, with rows split across the current
/// rayon pool. Each row is computed exactly as in [`gqmv_reference`], so the
/// result does not depend on the worker count.
pub fn gqmv_into(w: MatrixView<'_>, x: &QuantizedTensor, out: &mut [f32]) -> Result<()> {
    let gs = w.gs;
    if x.numel() != w.cols || x.spec().group_size() != gs || out.len() != w.rows {
        return Err(Error::InvalidShape(format!(
            "{}x{} (gs {gs}) matrix against vector of {} (gs {}) into {} outputs",
            w.rows,
            w.cols,
            x.numel(),
            x.spec().group_size(),
            out.len()
        )));
    }
    let (xq, xs) = (x.values(), x.scales());
    let gpr = w.cols / gs;
    const CHUNK: usize = 64;
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = c * CHUNK + k;
            let row = &w.values[i * w.cols..(i + 1) * w.cols];
            let scales = &w.scales[i * gpr..(i + 1) * gpr];
            *o = row_reference(row, scales, xq, xs, gs);
        }
    });
    Ok(())
}

// ---- staged kernel -------------------------------------------------------

/// x after the pre-fetch step: INT16 values and FP32 group scales.
struct PrefetchedX {
    xq: Vec<i16>,
    xs: Vec<f32>,
}

fn pre_fetch(p: &GqmvProblem<'_>) -> PrefetchedX {
    PrefetchedX {
        xq: p.xq.iter().map(|&v| v as i16).collect(),
        xs: p.xs.to_vec(),
    }
}

/// Weight row `i` widened to INT16.
fn read_cast(p: &GqmvProblem<'_>, i: usize, w_stream: &mut Vec<i16>) {
    w_stream.clear();
    w_stream.extend(p.row(i).0.iter().map(|&v| v as i16));
}

/// Lane-wise INT16 products of one group reduced by a balanced adder tree.
/// The first tree level widens to INT32.
fn adder_tree(w: &[i16], x: &[i16], lanes: &mut Vec<i16>, level: &mut Vec<i32>) -> i32 {
    lanes.clear();
    // INT8·INT8 fits INT16: |product| ≤ 128·128 = 2^14.
    lanes.extend(w.iter().zip(x).map(|(&a, &b)| a * b));
    level.clear();
    if lanes.len() == 1 {
        return lanes[0] as i32;
    }
    level.extend(lanes.chunks_exact(2).map(|p| p[0] as i32 + p[1] as i32));
    while level.len() > 1 {
        let half = level.len() / 2;
        for k in 0..half {
            level[k] = level[2 * k] + level[2 * k + 1];
        }
        level.truncate(half);
    }
    level[0]
}

fn dot_product(w_stream: &[i16], x: &PrefetchedX, gs: usize, sums: &mut Vec<i32>) {
    let mut lanes = Vec::with_capacity(gs);
    let mut level = Vec::with_capacity(gs / 2);
    sums.clear();
    sums.extend(
        w_stream
            .chunks_exact(gs)
            .zip(x.xq.chunks_exact(gs))
            .map(|(w, xv)| adder_tree(w, xv, &mut lanes, &mut level)),
    );
}

fn accumulate(group_sums: &[i32], ws: &[f32], xs: &[f32]) -> f32 {
    let float_scale = ws.iter().zip(xs).map(|(a, b)| a * b);
    group_sums
        .iter()
        .zip(float_scale)
        .fold(0.0f32, |acc, (&g, s)| acc + g as f32 * s)
}

fn check_staged(p: &GqmvProblem<'_>) -> Result<()> {
    p.validate()?;
    if !p.gs.is_power_of_two() {
        return Err(Error::Unsupported(format!(
            "adder tree needs a power-of-two group size, got {}",
            p.gs
        )));
    }
    Ok(())
}

/// Integer group sums as produced by the staged dot-product stage.
pub fn group_sums_staged(p: &GqmvProblem<'_>) -> Result<Vec<i32>> {
    check_staged(p)?;
    let x = pre_fetch(p);
    let mut w_stream = Vec::with_capacity(p.n);
    let mut row_sums = Vec::with_capacity(p.groups_per_row());
    let mut all = Vec::with_capacity(p.m * p.groups_per_row());
    for i in 0..p.m {
        read_cast(p, i, &mut w_stream);
        dot_product(&w_stream, &x, p.gs, &mut row_sums);
        all.extend_from_slice(&row_sums);
    }
    Ok(all)
}

pub fn gqmv_staged(p: &GqmvProblem<'_>) -> Result<Vec<f32>> {
    check_staged(p)?;
    let x = pre_fetch(p);
    let mut w_stream = Vec::with_capacity(p.n);
    let mut group_sum_stream = Vec::with_capacity(p.groups_per_row());
    let mut out = Vec::with_capacity(p.m);
    for i in 0..p.m {
        read_cast(p, i, &mut w_stream);
        let ws_stream = p.row(i).1;
        dot_product(&w_stream, &x, p.gs, &mut group_sum_stream);
        out.push(accumulate(&group_sum_stream, ws_stream, &x.xs));
    }
    Ok(out)
}

/// Stacks problems that share one input vector into a single problem whose
/// output, split at the part boundaries, equals the part outputs.
pub fn concat_rows(parts: &[GqmvProblem<'_>]) -> Result<GqmvProblem<'static>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("cannot concatenate zero problems".into()))?;
    let mut wq = Vec::new();
    let mut ws = Vec::new();
    let mut m = 0;
    for p in parts {
        p.validate()?;
        if p.n != first.n || p.gs != first.gs || p.xq != first.xq || p.xs != first.xs {
            return Err(Error::InvalidShape(
                "concatenated problems must share n, gs and the input vector".into(),
            ));
        }
        wq.extend_from_slice(&p.wq);
        ws.extend_from_slice(&p.ws);
        m += p.m;
    }
    GqmvProblem::new(
        wq,
        ws,
        first.xq.clone().into_owned(),
        first.xs.clone().into_owned(),
        m,
        first.n,
        first.gs,
    )
}
