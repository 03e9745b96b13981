//! Independent reference implementations for the integration tests.
//!
//! The forward pass here recomputes the whole sequence at every layer (no KV
//! cache), works in any float type and shares no code with the engine.

#![allow(dead_code)]

use num_traits::{Float, FromPrimitive, ToPrimitive};
use qllama::model::{LayerWeights, ModelConfig, PersistentWeights};
use qllama::modelio::FloatWeights;

pub trait Real: Float + FromPrimitive + ToPrimitive + std::iter::Sum + std::fmt::Debug {}
impl<T: Float + FromPrimitive + ToPrimitive + std::iter::Sum + std::fmt::Debug> Real for T {}

fn f<F: Real>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

pub struct OracleLayer<F> {
    pub wq: Vec<F>,
    pub wk: Vec<F>,
    pub wv: Vec<F>,
    pub wo: Vec<F>,
    pub w1: Vec<F>,
    pub w2: Vec<F>,
    pub w3: Vec<F>,
    pub att_norm: Vec<F>,
    pub ffn_norm: Vec<F>,
}

pub struct OracleModel<F> {
    pub c: ModelConfig,
    pub embeddings: Vec<F>,
    pub layers: Vec<OracleLayer<F>>,
    pub final_norm: Vec<F>,
    pub classifier: Vec<F>,
    /// Quantize-dequantize matrix inputs the way an 8-bit activation path does.
    pub quantize_activations: bool,
}

fn cast<F: Real>(v: &[f32]) -> Vec<F> {
    v.iter().map(|&x| f(x as f64)).collect()
}

/// Dequantizes by hand: value times the scale of its group.
fn dequant<F: Real>(values: &[i8], scales: &[f32], gs: usize) -> Vec<F> {
    values
        .iter()
        .enumerate()
        .map(|(i, &q)| f::<F>(q as f64) * f(scales[i / gs] as f64))
        .collect()
}

impl<F: Real> OracleModel<F> {
    /// The unquantized model.
    pub fn from_float(c: &ModelConfig, w: &FloatWeights) -> Self {
        OracleModel {
            c: *c,
            embeddings: cast(&w.embeddings),
            layers: w
                .layers
                .iter()
                .map(|l| OracleLayer {
                    wq: cast(&l.wq),
                    wk: cast(&l.wk),
                    wv: cast(&l.wv),
                    wo: cast(&l.wo),
                    w1: cast(&l.w1),
                    w2: cast(&l.w2),
                    w3: cast(&l.w3),
                    att_norm: cast(&l.att_norm),
                    ffn_norm: cast(&l.ffn_norm),
                })
                .collect(),
            final_norm: cast(&w.final_norm),
            classifier: cast(w.classifier.as_deref().unwrap_or(&w.embeddings)),
            quantize_activations: false,
        }
    }

    /// The quantized model's weights, dequantized, with activation
    /// quantization switched on.
    pub fn from_quantized(c: &ModelConfig, p: &PersistentWeights, layers: &[LayerWeights]) -> Self {
        let gs = c.gs;
        let mat = |v: qllama::gqmv::MatrixView<'_>| dequant::<F>(v.values(), v.scales(), gs);
        let d = c.dim;
        OracleModel {
            c: *c,
            embeddings: dequant(p.embeddings.tensor().values(), p.embeddings.tensor().scales(), gs),
            layers: layers
                .iter()
                .enumerate()
                .map(|(l, w)| OracleLayer {
                    wq: mat(w.wq()),
                    wk: mat(w.wk()),
                    wv: mat(w.wv()),
                    wo: mat(w.wo()),
                    w1: mat(w.w1()),
                    w2: mat(w.w2()),
                    w3: mat(w.w3()),
                    att_norm: cast(&p.att_norm[l * d..(l + 1) * d]),
                    ffn_norm: cast(&p.ffn_norm[l * d..(l + 1) * d]),
                })
                .collect(),
            final_norm: cast(&p.final_norm),
            classifier: {
                let t = p.classifier().tensor();
                dequant(t.values(), t.scales(), gs)
            },
            quantize_activations: true,
        }
    }

    fn act(&self, x: &[F]) -> Vec<F> {
        if self.quantize_activations {
            fake_quant(x, self.c.gs)
        } else {
            x.to_vec()
        }
    }

    /// Logits at every position of `tokens`, recomputing everything.
    pub fn logits(&self, tokens: &[u32]) -> Vec<Vec<F>> {
        let c = &self.c;
        let (d, kv, h) = (c.dim, c.dim * c.n_kv_heads / c.n_heads, c.hidden_dim);
        let hd = d / c.n_heads;
        let group = c.n_heads / c.n_kv_heads;
        let t_len = tokens.len();

        let mut xs: Vec<Vec<F>> = tokens
            .iter()
            .map(|&t| self.embeddings[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();

        for layer in &self.layers {
            let mut qs = Vec::with_capacity(t_len);
            let mut ks = Vec::with_capacity(t_len);
            let mut vs = Vec::with_capacity(t_len);
            for (pos, x) in xs.iter().enumerate() {
                let xn = self.act(&rmsnorm(x, &layer.att_norm));
                let mut q = matvec(&layer.wq, &xn, d);
                let mut k = matvec(&layer.wk, &xn, kv);
                rope(&mut q, pos, hd);
                rope(&mut k, pos, hd);
                qs.push(q);
                ks.push(k);
                vs.push(matvec(&layer.wv, &xn, kv));
            }
            for (pos, x) in xs.iter_mut().enumerate() {
                let mut att = vec![F::zero(); d];
                for head in 0..c.n_heads {
                    let q = &qs[pos][head * hd..(head + 1) * hd];
                    let ko = (head / group) * hd;
                    let scale = F::one() / f::<F>(hd as f64).sqrt();
                    let scores: Vec<F> = (0..=pos)
                        .map(|t| q.iter().zip(&ks[t][ko..ko + hd]).map(|(&a, &b)| a * b).sum::<F>() * scale)
                        .collect();
                    let w = softmax(&scores);
                    for (t, &a) in w.iter().enumerate() {
                        for i in 0..hd {
                            att[head * hd + i] = att[head * hd + i] + a * vs[t][ko + i];
                        }
                    }
                }
                let o = matvec(&layer.wo, &self.act(&att), d);
                for (a, b) in x.iter_mut().zip(o) {
                    *a = *a + b;
                }
                let xn = self.act(&rmsnorm(x, &layer.ffn_norm));
                let h1 = matvec(&layer.w1, &xn, h);
                let h3 = matvec(&layer.w3, &xn, h);
                let g: Vec<F> = h1
                    .iter()
                    .zip(&h3)
                    .map(|(&a, &b)| a / (F::one() + (-a).exp()) * b)
                    .collect();
                let o = matvec(&layer.w2, &self.act(&g), d);
                for (a, b) in x.iter_mut().zip(o) {
                    *a = *a + b;
                }
            }
        }
        xs.iter()
            .map(|x| {
                let xn = self.act(&rmsnorm(x, &self.final_norm));
                matvec(&self.classifier, &xn, c.vocab_size)
            })
            .collect()
    }
}

pub fn matvec<F: Real>(w: &[F], x: &[F], rows: usize) -> Vec<F> {
    let n = x.len();
    assert_eq!(w.len(), rows * n);
    (0..rows)
        .map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

pub fn rmsnorm<F: Real>(x: &[F], w: &[F]) -> Vec<F> {
    let ms = x.iter().map(|&v| v * v).sum::<F>() / f(x.len() as f64);
    let inv = F::one() / (ms + f(1e-5)).sqrt();
    x.iter().zip(w).map(|(&a, &b)| a * inv * b).collect()
}

pub fn rope<F: Real>(v: &mut [F], pos: usize, hd: usize) {
    for head in v.chunks_mut(hd) {
        for i in 0..hd / 2 {
            let theta = pos as f64 / 10000f64.powf((2 * i) as f64 / hd as f64);
            let (s, c) = (f::<F>(theta.sin()), f::<F>(theta.cos()));
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let m = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Group-wise symmetric 8-bit round trip, written from the definition:
/// scale = 2·max|r|/255, q = clamp(round(r/scale)), r̂ = q·scale.
/// r/scale is formed as (r/max)·127.5 so the extreme lands exactly on ±127.5.
pub fn fake_quant<F: Real>(x: &[F], gs: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for g in x.chunks(gs) {
        let m = g.iter().fold(F::zero(), |a, &v| a.max(v.abs()));
        if m == F::zero() {
            out.extend(g.iter().map(|_| F::zero()));
            continue;
        }
        let s = f::<F>(2.0) * m / f(255.0);
        for &v in g {
            let q = (v / m * f(127.5)).round().max(f(-128.0)).min(f(127.0));
            out.push(q * s);
        }
    }
    out
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Largest element-wise difference relative to the reference's largest magnitude.
pub fn max_rel_diff(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn argmax_f64(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
