//! Llama2-architecture forward pass over W8A8 weights.
//!
//! Per layer: RMSNorm and quantize `x`, fused QKV projection, RoPE, cache the
//! rotated key and the value, grouped-query attention, quantize and project
//! through `wo`, residual add, RMSNorm and quantize, fused W1/W3 projection,
//! SwiGLU and quantize, W2 projection, residual add. A final RMSNorm and the
//! classifier projection produce the logits.
//!
//! Attention, RoPE, RMSNorm and SwiGLU run in FP32. Only the matrix products
//! are quantized, and activations are requantized right before every one.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gqmv::{gqmv_into, MatrixView, QuantizedMatrix};
use crate::profile::{Component, Profile};
use crate::quant::{QuantSpec, QuantizedTensor};

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_THETA: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub gs: usize,
    /// Classifier reuses the embedding table.
    pub shared_classifier: bool,
}

impl ModelConfig {
    /// The small configuration used throughout the tests and docs.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 64,
            hidden_dim: 128,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            vocab_size: 512,
            seq_len: 256,
            gs: 32,
            shared_classifier: false,
        }
    }

    /// Five layers at a width where matrix work dominates; used for timing.
    pub fn small() -> Self {
        ModelConfig {
            dim: 256,
            hidden_dim: 768,
            n_layers: 5,
            n_heads: 8,
            n_kv_heads: 4,
            vocab_size: 1024,
            seq_len: 512,
            gs: 64,
            shared_classifier: false,
        }
    }

    /// Looks up `tiny`, `small` or `tinyllama`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "tinyllama" => Some(Self::tinyllama()),
            _ => None,
        }
    }

    /// TinyLlama 1.1B dimensions.
    pub fn tinyllama() -> Self {
        ModelConfig {
            dim: 2048,
            hidden_dim: 5632,
            n_layers: 22,
            n_heads: 32,
            n_kv_heads: 4,
            vocab_size: 32000,
            seq_len: 2048,
            gs: 256,
            shared_classifier: false,
        }
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    #[inline]
    pub fn kv_dim(&self) -> usize {
        self.dim * self.n_kv_heads / self.n_heads
    }

    /// Query heads served by each key/value head.
    #[inline]
    pub fn kv_group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn quant_spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.gs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("dim", self.dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("gs", self.gs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.dim % self.n_heads != 0 {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even for RoPE", self.head_dim()));
        }
        for (name, v) in [("dim", self.dim), ("hidden_dim", self.hidden_dim), ("kv_dim", self.kv_dim())] {
            if v % self.gs != 0 {
                return bad(format!("{name} {v} not divisible by group size {}", self.gs));
            }
        }
        Ok(())
    }
}

/// Quantized matrices of one transformer layer, the unit of weight streaming.
///
/// Wq/Wk/Wv and W1/W3 are stored pre-stacked so each group shares one kernel
/// call; the individual matrices are row ranges of the stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    qkv: QuantizedMatrix,
    wo: QuantizedMatrix,
    w13: QuantizedMatrix,
    w2: QuantizedMatrix,
    dim: usize,
    kv_dim: usize,
    hidden_dim: usize,
}

impl LayerWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &ModelConfig,
        wq: QuantizedMatrix,
        wk: QuantizedMatrix,
        wv: QuantizedMatrix,
        wo: QuantizedMatrix,
        w1: QuantizedMatrix,
        w2: QuantizedMatrix,
        w3: QuantizedMatrix,
    ) -> Result<Self> {
        let (d, kv, h) = (config.dim, config.kv_dim(), config.hidden_dim);
        let expect = [
            ("wq", &wq, d, d),
            ("wk", &wk, kv, d),
            ("wv", &wv, kv, d),
            ("wo", &wo, d, d),
            ("w1", &w1, h, d),
            ("w2", &w2, d, h),
            ("w3", &w3, h, d),
        ];
        for (name, m, rows, cols) in expect {
            if m.rows() != rows || m.cols() != cols || m.tensor().spec().group_size() != config.gs {
                return Err(Error::InvalidShape(format!(
                    "{name} is {}x{} (gs {}), expected {rows}x{cols} (gs {})",
                    m.rows(),
                    m.cols(),
                    m.tensor().spec().group_size(),
                    config.gs
                )));
            }
        }
        Self::from_fused(
            config,
            QuantizedMatrix::concat(&[&wq, &wk, &wv])?,
            wo,
            QuantizedMatrix::concat(&[&w1, &w3])?,
            w2,
        )
    }

    /// Builds a layer from matrices already stacked as `[wq; wk; wv]` and
    /// `[w1; w3]`.
    pub fn from_fused(
        config: &ModelConfig,
        qkv: QuantizedMatrix,
        wo: QuantizedMatrix,
        w13: QuantizedMatrix,
        w2: QuantizedMatrix,
    ) -> Result<Self> {
        let (d, kv, h) = (config.dim, config.kv_dim(), config.hidden_dim);
        let expect = [
            ("qkv", &qkv, d + 2 * kv, d),
            ("wo", &wo, d, d),
            ("w13", &w13, 2 * h, d),
            ("w2", &w2, d, h),
        ];
        for (name, m, rows, cols) in expect {
            if m.rows() != rows || m.cols() != cols || m.tensor().spec().group_size() != config.gs {
                return Err(Error::InvalidShape(format!(
                    "{name} is {}x{} (gs {}), expected {rows}x{cols} (gs {})",
                    m.rows(),
                    m.cols(),
                    m.tensor().spec().group_size(),
                    config.gs
                )));
            }
        }
        Ok(LayerWeights {
            qkv,
            wo,
            w13,
            w2,
            dim: d,
            kv_dim: kv,
            hidden_dim: h,
        })
    }

    pub fn qkv(&self) -> MatrixView<'_> {
        self.qkv.view()
    }
    pub fn wq(&self) -> MatrixView<'_> {
        self.qkv.view().row_range(0, self.dim)
    }
    pub fn wk(&self) -> MatrixView<'_> {
        self.qkv.view().row_range(self.dim, self.dim + self.kv_dim)
    }
    pub fn wv(&self) -> MatrixView<'_> {
        self.qkv.view().row_range(self.dim + self.kv_dim, self.dim + 2 * self.kv_dim)
    }
    pub fn wo(&self) -> MatrixView<'_> {
        self.wo.view()
    }
    pub fn w13(&self) -> MatrixView<'_> {
        self.w13.view()
    }
    pub fn w1(&self) -> MatrixView<'_> {
        self.w13.view().row_range(0, self.hidden_dim)
    }
    pub fn w3(&self) -> MatrixView<'_> {
        self.w13.view().row_range(self.hidden_dim, 2 * self.hidden_dim)
    }
    pub fn w2(&self) -> MatrixView<'_> {
        self.w2.view()
    }

    /// Quantized bytes held by this layer.
    pub fn byte_size(&self) -> usize {
        self.qkv.byte_size() + self.wo.byte_size() + self.w13.byte_size() + self.w2.byte_size()
    }
}

/// Weights resident for the whole run: embeddings, classifier and every
/// RMSNorm gain vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentWeights {
    pub embeddings: QuantizedMatrix,
    /// `None` when the classifier is tied to the embeddings.
    pub classifier: Option<QuantizedMatrix>,
    /// `n_layers × dim`
    pub att_norm: Vec<f32>,
    /// `n_layers × dim`
    pub ffn_norm: Vec<f32>,
    pub final_norm: Vec<f32>,
}

impl PersistentWeights {
    pub fn byte_size(&self) -> usize {
        self.embeddings.byte_size()
            + self.classifier.as_ref().map_or(0, |c| c.byte_size())
            + 4 * (self.att_norm.len() + self.ffn_norm.len() + self.final_norm.len())
    }

    pub fn classifier(&self) -> &QuantizedMatrix {
        self.classifier.as_ref().unwrap_or(&self.embeddings)
    }

    fn validate(&self, c: &ModelConfig) -> Result<()> {
        let shape = |m: &QuantizedMatrix| (m.rows(), m.cols());
        if shape(&self.embeddings) != (c.vocab_size, c.dim) {
            return Err(Error::InvalidShape("embedding table shape".into()));
        }
        match (&self.classifier, c.shared_classifier) {
            (None, true) => {}
            (Some(m), false) if shape(m) == (c.vocab_size, c.dim) => {}
            _ => return Err(Error::InvalidShape("classifier shape or sharing flag".into())),
        }
        if self.att_norm.len() != c.n_layers * c.dim
            || self.ffn_norm.len() != c.n_layers * c.dim
            || self.final_norm.len() != c.dim
        {
            return Err(Error::InvalidShape("norm vector lengths".into()));
        }
        Ok(())
    }
}

/// Source of per-layer weights for the forward pass.
pub trait LayerProvider {
    /// Returns layer `layer`, blocking until it is resident.
    fn acquire(&mut self, layer: usize) -> Result<Arc<LayerWeights>>;
}

/// Every layer held in memory at once.
#[derive(Debug, Clone)]
pub struct ResidentLayers(pub Vec<Arc<LayerWeights>>);

impl ResidentLayers {
    pub fn new(layers: Vec<LayerWeights>) -> Self {
        ResidentLayers(layers.into_iter().map(Arc::new).collect())
    }
}

impl LayerProvider for ResidentLayers {
    fn acquire(&mut self, layer: usize) -> Result<Arc<LayerWeights>> {
        self.0
            .get(layer)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no layer {layer}")))
    }
}

/// Post-RoPE keys and values for every layer and position.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    seq_len: usize,
    kv_dim: usize,
    /// Number of positions written per layer; positions are filled in order.
    filled: Vec<usize>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let n = config.n_layers * config.seq_len * config.kv_dim();
        KvCache {
            keys: vec![0.0; n],
            values: vec![0.0; n],
            seq_len: config.seq_len,
            kv_dim: config.kv_dim(),
            filled: vec![0; config.n_layers],
        }
    }

    #[inline]
    fn offset(&self, layer: usize, pos: usize) -> usize {
        (layer * self.seq_len + pos) * self.kv_dim
    }

    /// Highest written position of `layer`, if any.
    pub fn filled_up_to(&self, layer: usize) -> Option<usize> {
        self.filled[layer].checked_sub(1)
    }

    /// Stores `k`, `v` at `pos`. Each (layer, pos) is written exactly once,
    /// in position order.
    pub fn write(&mut self, layer: usize, pos: usize, k: &[f32], v: &[f32]) -> Result<()> {
        if pos >= self.seq_len {
            return Err(Error::Position { pos, seq_len: self.seq_len });
        }
        if layer >= self.filled.len() || pos != self.filled[layer] {
            return Err(Error::State(format!(
                "cache write at layer {layer} pos {pos}, next free position is {:?}",
                self.filled.get(layer)
            )));
        }
        if k.len() != self.kv_dim || v.len() != self.kv_dim {
            return Err(Error::InvalidShape("k/v length differs from kv_dim".into()));
        }
        let o = self.offset(layer, pos);
        self.keys[o..o + self.kv_dim].copy_from_slice(k);
        self.values[o..o + self.kv_dim].copy_from_slice(v);
        self.filled[layer] += 1;
        Ok(())
    }

    #[inline]
    pub fn key(&self, layer: usize, pos: usize) -> &[f32] {
        let o = self.offset(layer, pos);
        &self.keys[o..o + self.kv_dim]
    }

    #[inline]
    pub fn value(&self, layer: usize, pos: usize) -> &[f32] {
        let o = self.offset(layer, pos);
        &self.values[o..o + self.kv_dim]
    }

    pub fn reset(&mut self) {
        self.filled.iter_mut().for_each(|f| *f = 0);
    }
}

/// Scratch buffers of one decode stream.
#[derive(Debug, Clone)]
pub struct RunState {
    /// Residual stream.
    pub x: Vec<f32>,
    xb: Vec<f32>,
    xb2: Vec<f32>,
    /// Runtime-quantized activations over `dim`.
    pub xq: QuantizedTensor,
    /// Fused q|k|v projection output.
    qkv: Vec<f32>,
    pub att_buffer: Vec<f32>,
    /// Fused W1|W3 projection output.
    pub ffn_buffer: Vec<f32>,
    hb: Vec<f32>,
    hq: QuantizedTensor,
    scores: Vec<f32>,
    pub logits: Vec<f32>,
    pub profile: Profile,
}

impl RunState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let spec = config.quant_spec()?;
        let d = config.dim;
        Ok(RunState {
            x: vec![0.0; d],
            xb: vec![0.0; d],
            xb2: vec![0.0; d],
            xq: QuantizedTensor::zeros(d, spec)?,
            qkv: vec![0.0; d + 2 * config.kv_dim()],
            att_buffer: vec![0.0; d],
            ffn_buffer: vec![0.0; 2 * config.hidden_dim],
            hb: vec![0.0; config.hidden_dim],
            hq: QuantizedTensor::zeros(config.hidden_dim, spec)?,
            scores: vec![0.0; config.n_heads * config.seq_len],
            logits: vec![0.0; config.vocab_size],
            profile: Profile::default(),
        })
    }
}

pub fn rmsnorm_into(out: &mut [f32], x: &[f32], weight: &[f32], eps: f32) {
    let ss = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = (1.0 / (ss + eps as f64).sqrt()) as f32;
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = w * (v * inv);
    }
}

/// `y[i] = weight[i] · x[i] / sqrt(mean(x²) + eps)`
pub fn rmsnorm(x: &[f32], weight: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    rmsnorm_into(&mut out, x, weight, eps);
    out
}

/// Rotates consecutive pairs of every head of `q` and `k` by
/// `pos · θ^(−2i/head_dim)` for pair `i`.
pub fn rope_apply(q: &mut [f32], k: &mut [f32], pos: usize, config: &ModelConfig) -> Result<()> {
    if pos >= config.seq_len {
        return Err(Error::Position { pos, seq_len: config.seq_len });
    }
    let hd = config.head_dim();
    let table: Vec<(f32, f32)> = (0..hd / 2)
        .map(|i| {
            let freq = ROPE_THETA.powf(-((2 * i) as f64) / hd as f64);
            let (s, c) = (pos as f64 * freq).sin_cos();
            (c as f32, s as f32)
        })
        .collect();
    for head in q.chunks_exact_mut(hd).chain(k.chunks_exact_mut(hd)) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&table) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
    Ok(())
}

/// In-place softmax with max subtraction.
pub fn softmax(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn check_attention(cache: &KvCache, layer: usize, pos: usize, config: &ModelConfig) -> Result<()> {
    if pos >= config.seq_len {
        return Err(Error::Position { pos, seq_len: config.seq_len });
    }
    match cache.filled_up_to(layer) {
        Some(p) if p >= pos => Ok(()),
        got => Err(Error::State(format!(
            "attention at layer {layer} pos {pos} but cache is filled up to {got:?}"
        ))),
    }
}

fn attend_head(
    q: &[f32],
    cache: &KvCache,
    layer: usize,
    kv_off: usize,
    pos: usize,
    scores: &mut [f32],
    out: &mut [f32],
) {
    let hd = q.len();
    let scale = 1.0 / (hd as f32).sqrt();
    for (t, s) in scores[..=pos].iter_mut().enumerate() {
        let k = &cache.key(layer, t)[kv_off..kv_off + hd];
        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
    }
    softmax(&mut scores[..=pos]);
    out.fill(0.0);
    for (t, &a) in scores[..=pos].iter().enumerate() {
        let v = &cache.value(layer, t)[kv_off..kv_off + hd];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += a * vv;
        }
    }
}

fn attention_into(
    q: &[f32],
    cache: &KvCache,
    layer: usize,
    pos: usize,
    config: &ModelConfig,
    scores: &mut [f32],
    out: &mut [f32],
) -> Result<()> {
    check_attention(cache, layer, pos, config)?;
    let hd = config.head_dim();
    let group = config.kv_group();
    out.par_chunks_mut(hd)
        .zip(scores.par_chunks_mut(config.seq_len))
        .enumerate()
        .for_each(|(h, (o, s))| {
            let kv_off = (h / group) * hd;
            attend_head(&q[h * hd..(h + 1) * hd], cache, layer, kv_off, pos, s, o);
        });
    Ok(())
}

/// Grouped-query attention of `q` against cached positions `0..=pos`.
pub fn attention(
    q: &[f32],
    cache: &KvCache,
    layer: usize,
    pos: usize,
    config: &ModelConfig,
) -> Result<Vec<f32>> {
    let mut scores = vec![0.0; config.n_heads * config.seq_len];
    let mut out = vec![0.0; config.dim];
    attention_into(q, cache, layer, pos, config, &mut scores, &mut out)?;
    Ok(out)
}

#[inline]
fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn swiglu_into(out: &mut [f32], h1: &[f32], h3: &[f32]) {
    for ((o, &a), &b) in out.iter_mut().zip(h1).zip(h3) {
        *o = silu(a) * b;
    }
}

/// `silu(h1) ⊙ h3`
pub fn swiglu(h1: &[f32], h3: &[f32]) -> Vec<f32> {
    assert_eq!(h1.len(), h3.len());
    let mut out = vec![0.0; h1.len()];
    swiglu_into(&mut out, h1, h3);
    out
}

/// Model configuration plus the weights that never stream.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    persistent: PersistentWeights,
}

impl Transformer {
    pub fn new(config: ModelConfig, persistent: PersistentWeights) -> Result<Self> {
        config.validate()?;
        persistent.validate(&config)?;
        Ok(Transformer { config, persistent })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn persistent(&self) -> &PersistentWeights {
        &self.persistent
    }

    /// Runs one position and returns the logits for the next token.
    pub fn forward<'s, P: LayerProvider + ?Sized>(
        &self,
        token: u32,
        pos: usize,
        layers: &mut P,
        state: &'s mut RunState,
        cache: &mut KvCache,
    ) -> Result<&'s [f32]> {
        let c = &self.config;
        let pw = &self.persistent;
        if token as usize >= c.vocab_size {
            return Err(Error::Input(format!(
                "token {token} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if pos >= c.seq_len {
            return Err(Error::Position { pos, seq_len: c.seq_len });
        }
        let (d, kv, h) = (c.dim, c.kv_dim(), c.hidden_dim);
        let RunState {
            x,
            xb,
            xb2,
            xq,
            qkv,
            att_buffer,
            ffn_buffer,
            hb,
            hq,
            scores,
            logits,
            profile,
        } = state;

        pw.embeddings.view().dequantize_row(token as usize, x);

        for l in 0..c.n_layers {
            let t = Instant::now();
            let w = layers.acquire(l)?;
            profile.weight_wait += t.elapsed();

            let t = Instant::now();
            rmsnorm_into(xb, x, &pw.att_norm[l * d..(l + 1) * d], RMS_EPS);
            profile.add(Component::RmsNorm, t.elapsed());

            let t = Instant::now();
            xq.requantize(xb)?;
            gqmv_into(w.qkv(), xq, qkv)?;
            profile.add(Component::Matrix, t.elapsed());

            let (q, rest) = qkv.split_at_mut(d);
            let (k, v) = rest.split_at_mut(kv);
            let t = Instant::now();
            rope_apply(q, k, pos, c)?;
            profile.add(Component::Rope, t.elapsed());

            cache.write(l, pos, k, v)?;
            let t = Instant::now();
            attention_into(q, cache, l, pos, c, scores, att_buffer)?;
            profile.add(Component::Attention, t.elapsed());

            let t = Instant::now();
            xq.requantize(att_buffer)?;
            gqmv_into(w.wo(), xq, xb2)?;
            profile.add(Component::Matrix, t.elapsed());
            x.iter_mut().zip(xb2.iter()).for_each(|(a, b)| *a += b);

            let t = Instant::now();
            rmsnorm_into(xb, x, &pw.ffn_norm[l * d..(l + 1) * d], RMS_EPS);
            profile.add(Component::RmsNorm, t.elapsed());

            let t = Instant::now();
            xq.requantize(xb)?;
            gqmv_into(w.w13(), xq, ffn_buffer)?;
            profile.add(Component::Matrix, t.elapsed());

            let t = Instant::now();
            let (h1, h3) = ffn_buffer.split_at(h);
            swiglu_into(hb, h1, h3);
            profile.add(Component::SwiGlu, t.elapsed());

            let t = Instant::now();
            hq.requantize(hb)?;
            gqmv_into(w.w2(), hq, xb2)?;
            profile.add(Component::Matrix, t.elapsed());
            x.iter_mut().zip(xb2.iter()).for_each(|(a, b)| *a += b);
        }

        let t = Instant::now();
        rmsnorm_into(xb, x, &pw.final_norm, RMS_EPS);
        profile.add(Component::RmsNorm, t.elapsed());

        let t = Instant::now();
        xq.requantize(xb)?;
        gqmv_into(pw.classifier().view(), xq, logits)?;
        let e = t.elapsed();
        profile.add(Component::Matrix, e);
        profile.logits.push(e);

        Ok(logits)
    }
}
