//! The LAMF quantized model file.
//!
//! All multi-byte fields are little-endian and there is no padding inside
//! sections.
//!
//! ```text
//! header (256 bytes)
//!   0   magic "LAMF"
//!   4   u32 version = 1
//!   8   i32 dim, hidden_dim, n_layers, n_heads, n_kv_heads, vocab_size, seq_len, gs
//!   40  u8  shared_classifier
//!   41  zero padding
//! f32 att_norm   [n_layers × dim]
//! f32 ffn_norm   [n_layers × dim]
//! f32 final_norm [dim]
//! quantized embeddings
//! per layer: quantized wq, wk, wv, wo, w1, w2, w3
//! quantized classifier (absent when shared)
//! ```
//!
//! A quantized tensor is its INT8 values (row-major) followed by its FP32
//! group scales.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gqmv::QuantizedMatrix;
use crate::model::{LayerWeights, ModelConfig, PersistentWeights};
use crate::quant::{self, QuantSpec, QuantizedTensor};

pub const MAGIC: [u8; 4] = *b"LAMF";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 256;

/// Unquantized weights of one layer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w1: Vec<f32>,
    pub w2: Vec<f32>,
    pub w3: Vec<f32>,
    pub att_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
}

impl FloatLayer {
    /// The seven matrices in file order with their (rows, cols).
    pub fn matrices<'a>(&'a self, c: &ModelConfig) -> [(&'static str, &'a [f32], usize, usize); 7] {
        let (d, kv, h) = (c.dim, c.kv_dim(), c.hidden_dim);
        [
            ("wq", &self.wq, d, d),
            ("wk", &self.wk, kv, d),
            ("wv", &self.wv, kv, d),
            ("wo", &self.wo, d, d),
            ("w1", &self.w1, h, d),
            ("w2", &self.w2, d, h),
            ("w3", &self.w3, h, d),
        ]
    }
}

/// A complete FP32 weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatWeights {
    pub embeddings: Vec<f32>,
    pub layers: Vec<FloatLayer>,
    pub final_norm: Vec<f32>,
    /// `None` when the classifier is tied to the embeddings.
    pub classifier: Option<Vec<f32>>,
}

impl FloatWeights {
    pub fn validate(&self, c: &ModelConfig) -> Result<()> {
        c.validate()?;
        let err = |what: String| Err(Error::Export(what));
        let table = c.vocab_size * c.dim;
        if self.embeddings.len() != table {
            return err(format!("embeddings have {} values, expected {table}", self.embeddings.len()));
        }
        match (&self.classifier, c.shared_classifier) {
            (None, true) => {}
            (Some(w), false) if w.len() == table => {}
            (Some(w), false) => return err(format!("classifier has {} values, expected {table}", w.len())),
            (Some(_), true) => return err("classifier present but config says it is shared".into()),
            (None, false) => return err("classifier missing for an unshared config".into()),
        }
        if self.final_norm.len() != c.dim {
            return err("final norm length".into());
        }
        if self.layers.len() != c.n_layers {
            return err(format!("{} layers, expected {}", self.layers.len(), c.n_layers));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, w, rows, cols) in layer.matrices(c) {
                if w.len() != rows * cols {
                    return err(format!("layer {l} {name} has {} values, expected {rows}x{cols}", w.len()));
                }
            }
            if layer.att_norm.len() != c.dim || layer.ffn_norm.len() != c.dim {
                return err(format!("layer {l} norm length"));
            }
        }
        Ok(())
    }

    /// Total FP32 bytes of the tensors that get quantized.
    pub fn quantizable_bytes(c: &ModelConfig) -> usize {
        4 * quantized_numel(c)
    }
}

fn quantized_numel(c: &ModelConfig) -> usize {
    let table = c.vocab_size * c.dim;
    let per_layer = 2 * c.dim * c.dim + 2 * c.kv_dim() * c.dim + 3 * c.hidden_dim * c.dim;
    table * if c.shared_classifier { 1 } else { 2 } + c.n_layers * per_layer
}

/// On-disk size of a quantized tensor of `numel` elements.
#[inline]
pub fn tensor_bytes(numel: usize, gs: usize) -> usize {
    numel + 4 * (numel / gs)
}

/// Byte offsets of every section, derived from the config alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub norms_offset: u64,
    pub embeddings_offset: u64,
    pub layer_offsets: Vec<u64>,
    pub layer_bytes: u64,
    pub classifier_offset: Option<u64>,
    pub file_size: u64,
}

impl ModelLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let gs = c.gs;
        let norms = 4 * (2 * c.n_layers * c.dim + c.dim);
        let table = tensor_bytes(c.vocab_size * c.dim, gs) as u64;
        let layer_bytes = layer_bytes(c) as u64;
        let norms_offset = HEADER_SIZE as u64;
        let embeddings_offset = norms_offset + norms as u64;
        let first_layer = embeddings_offset + table;
        let layer_offsets: Vec<u64> = (0..c.n_layers as u64).map(|l| first_layer + l * layer_bytes).collect();
        let after_layers = first_layer + c.n_layers as u64 * layer_bytes;
        let (classifier_offset, file_size) = if c.shared_classifier {
            (None, after_layers)
        } else {
            (Some(after_layers), after_layers + table)
        };
        ModelLayout {
            norms_offset,
            embeddings_offset,
            layer_offsets,
            layer_bytes,
            classifier_offset,
            file_size,
        }
    }

    /// Bytes of every quantized section (embeddings, layers, classifier).
    pub fn quantized_bytes(&self) -> u64 {
        self.file_size - self.embeddings_offset
    }
}

/// Quantized bytes of one layer: Σ over its seven matrices of
/// `numel + 4·numel/gs`.
pub fn layer_bytes(c: &ModelConfig) -> usize {
    let (d, kv, h) = (c.dim, c.kv_dim(), c.hidden_dim);
    [d * d, kv * d, kv * d, d * d, h * d, d * h, h * d]
        .iter()
        .map(|&n| tensor_bytes(n, c.gs))
        .sum()
}

/// Bytes held for the whole run: embeddings, classifier and norm vectors.
pub fn persistent_bytes(c: &ModelConfig) -> usize {
    let table = tensor_bytes(c.vocab_size * c.dim, c.gs);
    let classifier = if c.shared_classifier { 0 } else { table };
    table + classifier + 4 * (2 * c.n_layers * c.dim + c.dim)
}

/// Quantizes an FP32 weight set into its in-memory form.
pub fn quantize_weights(c: &ModelConfig, w: &FloatWeights) -> Result<(PersistentWeights, Vec<LayerWeights>)> {
    w.validate(c)?;
    let spec = c.quant_spec()?;
    let mut att_norm = Vec::with_capacity(c.n_layers * c.dim);
    let mut ffn_norm = Vec::with_capacity(c.n_layers * c.dim);
    let mut layers = Vec::with_capacity(c.n_layers);
    for layer in &w.layers {
        att_norm.extend_from_slice(&layer.att_norm);
        ffn_norm.extend_from_slice(&layer.ffn_norm);
        let [q, k, v, o, w1, w2, w3] = layer
            .matrices(c)
            .map(|(_, data, rows, cols)| QuantizedMatrix::quantize(rows, cols, data, spec));
        layers.push(LayerWeights::new(c, q?, k?, v?, o?, w1?, w2?, w3?)?);
    }
    let persistent = PersistentWeights {
        embeddings: QuantizedMatrix::quantize(c.vocab_size, c.dim, &w.embeddings, spec)?,
        classifier: w
            .classifier
            .as_ref()
            .map(|cl| QuantizedMatrix::quantize(c.vocab_size, c.dim, cl, spec))
            .transpose()?,
        att_norm,
        ffn_norm,
        final_norm: w.final_norm.clone(),
    };
    Ok((persistent, layers))
}

fn encode_header(c: &ModelConfig) -> [u8; HEADER_SIZE] {
    let mut h = [0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    let fields = [c.dim, c.hidden_dim, c.n_layers, c.n_heads, c.n_kv_heads, c.vocab_size, c.seq_len, c.gs];
    for (i, f) in fields.iter().enumerate() {
        h[8 + 4 * i..12 + 4 * i].copy_from_slice(&(*f as i32).to_le_bytes());
    }
    h[40] = c.shared_classifier as u8;
    h
}

/// Parses and validates a header.
pub fn decode_header(h: &[u8]) -> Result<ModelConfig> {
    if h.len() < HEADER_SIZE {
        return Err(Error::Format(format!("header is {} bytes, expected {HEADER_SIZE}", h.len())));
    }
    if h[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &h[0..4])));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for (i, slot) in f.iter_mut().enumerate() {
        let v = i32::from_le_bytes(h[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if v <= 0 {
            return Err(Error::Format(format!("header field {i} is {v}")));
        }
        *slot = v as usize;
    }
    let shared = match h[40] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("shared_classifier byte is {b}"))),
    };
    let c = ModelConfig {
        dim: f[0],
        hidden_dim: f[1],
        n_layers: f[2],
        n_heads: f[3],
        n_kv_heads: f[4],
        vocab_size: f[5],
        seq_len: f[6],
        gs: f[7],
        shared_classifier: shared,
    };
    c.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(c)
}

fn put_f32s(out: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 * v.len());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)
}

fn put_quantized(out: &mut impl Write, q: &QuantizedTensor) -> std::io::Result<()> {
    let bytes: Vec<u8> = q.values().iter().map(|&v| v as u8).collect();
    out.write_all(&bytes)?;
    put_f32s(out, q.scales())
}

/// Quantizes `weights` and writes a LAMF stream.
pub fn write_model_to(c: &ModelConfig, weights: &FloatWeights, out: &mut impl Write) -> Result<()> {
    weights.validate(c)?;
    let spec = c.quant_spec()?;
    let io = |what: &str| {
        let what = what.to_string();
        move |e| Error::io(format!("writing {what}"), 0, e)
    };
    out.write_all(&encode_header(c)).map_err(io("header"))?;
    for l in &weights.layers {
        put_f32s(out, &l.att_norm).map_err(io("att_norm"))?;
    }
    for l in &weights.layers {
        put_f32s(out, &l.ffn_norm).map_err(io("ffn_norm"))?;
    }
    put_f32s(out, &weights.final_norm).map_err(io("final_norm"))?;
    put_quantized(out, &quant::quantize(&weights.embeddings, spec)?).map_err(io("embeddings"))?;
    for (i, layer) in weights.layers.iter().enumerate() {
        for (name, data, _, _) in layer.matrices(c) {
            put_quantized(out, &quant::quantize(data, spec)?).map_err(io(&format!("layer {i} {name}")))?;
        }
    }
    if let Some(cl) = &weights.classifier {
        put_quantized(out, &quant::quantize(cl, spec)?).map_err(io("classifier"))?;
    }
    out.flush().map_err(io("model"))?;
    Ok(())
}

pub fn write_model(c: &ModelConfig, weights: &FloatWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), 0, e))?;
    let mut w = BufWriter::new(file);
    write_model_to(c, weights, &mut w)
}

/// Positioned reads over a model file.
#[derive(Debug)]
pub struct SectionReader {
    file: File,
}

impl SectionReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), 0, e))?;
        Ok(SectionReader { file })
    }

    pub fn read_at(&mut self, offset: u64, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.file
            .seek(SeekFrom::Start(offset))
            .and_then(|_| self.file.read_exact(&mut buf))
            .map_err(|e| Error::io(format!("reading {what}"), offset, e))?;
        Ok(buf)
    }

    /// Fills `buf` from `offset`.
    pub fn read_into(&mut self, offset: u64, buf: &mut [u8], what: &str) -> Result<()> {
        self.file
            .seek(SeekFrom::Start(offset))
            .and_then(|_| self.file.read_exact(buf))
            .map_err(|e| Error::io(format!("reading {what}"), offset, e))
    }

    /// Fills `out` with little-endian f32s from `offset`, through a small
    /// stack buffer.
    pub fn read_f32s_into(&mut self, offset: u64, out: &mut [f32], what: &str) -> Result<()> {
        let mut chunk = [0u8; 4096];
        let mut at = offset;
        for part in out.chunks_mut(chunk.len() / 4) {
            let bytes = &mut chunk[..4 * part.len()];
            self.read_into(at, bytes, what)?;
            for (v, b) in part.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
            at += bytes.len() as u64;
        }
        Ok(())
    }

    fn f32s_at(&mut self, offset: u64, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(le_f32s(&self.read_at(offset, 4 * n, what)?))
    }

    fn matrix_at(&mut self, offset: u64, rows: usize, cols: usize, spec: QuantSpec, what: &str) -> Result<QuantizedMatrix> {
        let len = tensor_bytes(rows * cols, spec.group_size());
        parse_matrix(&self.read_at(offset, len, what)?, rows, cols, spec)
    }
}

fn le_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn parse_matrix(bytes: &[u8], rows: usize, cols: usize, spec: QuantSpec) -> Result<QuantizedMatrix> {
    let numel = rows * cols;
    let values = bytes[..numel].iter().map(|&b| b as i8).collect();
    let scales = le_f32s(&bytes[numel..]);
    let t = QuantizedTensor::from_parts(values, scales, spec).map_err(|e| Error::Format(e.to_string()))?;
    QuantizedMatrix::new(rows, cols, t)
}

/// Header, persistent tensors and the layer offset table of a model file.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub path: PathBuf,
    pub config: ModelConfig,
    pub persistent: PersistentWeights,
    pub layout: ModelLayout,
}

pub fn read_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref().to_path_buf();
    let mut r = SectionReader::open(&path)?;
    let config = decode_header(&r.read_at(0, HEADER_SIZE, "header")?)?;
    let layout = ModelLayout::new(&config);
    let spec = config.quant_spec()?;
    let (l, d) = (config.n_layers, config.dim);
    let norms = layout.norms_offset;
    let att_norm = r.f32s_at(norms, l * d, "att_norm")?;
    let ffn_norm = r.f32s_at(norms + 4 * (l * d) as u64, l * d, "ffn_norm")?;
    let final_norm = r.f32s_at(norms + 8 * (l * d) as u64, d, "final_norm")?;
    let embeddings = r.matrix_at(layout.embeddings_offset, config.vocab_size, d, spec, "embeddings")?;
    let classifier = layout
        .classifier_offset
        .map(|off| r.matrix_at(off, config.vocab_size, d, spec, "classifier"))
        .transpose()?;
    Ok(LoadedModel {
        path,
        config,
        persistent: PersistentWeights {
            embeddings,
            classifier,
            att_norm,
            ffn_norm,
            final_norm,
        },
        layout,
    })
}

/// Reads layer `layer` from an open model file. Each tensor section is read
/// straight into its place in the fused matrices, so the layer's own buffers
/// are the only sizable allocation.
pub fn read_layer(r: &mut SectionReader, c: &ModelConfig, layout: &ModelLayout, layer: usize) -> Result<LayerWeights> {
    let mut offset = *layout
        .layer_offsets
        .get(layer)
        .ok_or_else(|| Error::Input(format!("no layer {layer} in a {}-layer model", c.n_layers)))?;
    let spec = c.quant_spec()?;
    let (d, kv, h) = (c.dim, c.kv_dim(), c.hidden_dim);
    // file order wq wk wv wo w1 w2 w3, stacked as [wq; wk; wv] [wo] [w1; w3] [w2]
    let shapes = [(d, d), (kv, d), (kv, d), (d, d), (h, d), (d, h), (h, d)];
    let stack_of = [0, 0, 0, 1, 2, 3, 2];
    let mut offsets = [0u64; 7];
    for (o, &(rows, cols)) in offsets.iter_mut().zip(&shapes) {
        *o = offset;
        offset += tensor_bytes(rows * cols, c.gs) as u64;
    }
    let mut stacks = Vec::with_capacity(4);
    for stack in 0..4 {
        let parts: Vec<usize> = (0..7).filter(|&i| stack_of[i] == stack).collect();
        let cols = shapes[parts[0]].1;
        let rows: usize = parts.iter().map(|&i| shapes[i].0).sum();
        let mut values = vec![0u8; rows * cols];
        let mut scales = vec![0f32; rows * cols / c.gs];
        let (mut v_at, mut s_at) = (0, 0);
        for &i in &parts {
            let numel = shapes[i].0 * cols;
            let what = format!("layer {layer} tensor {i}");
            r.read_into(offsets[i], &mut values[v_at..v_at + numel], &what)?;
            r.read_f32s_into(offsets[i] + numel as u64, &mut scales[s_at..s_at + numel / c.gs], &what)?;
            v_at += numel;
            s_at += numel / c.gs;
        }
        // same size and alignment, so this reuses the allocation
        let values: Vec<i8> = values.into_iter().map(|b| b as i8).collect();
        let t = QuantizedTensor::from_parts(values, scales, spec).map_err(|e| Error::Format(e.to_string()))?;
        stacks.push(QuantizedMatrix::new(rows, cols, t)?);
    }
    let mut it = stacks.into_iter();
    let mut next = || it.next().unwrap();
    LayerWeights::from_fused(c, next(), next(), next(), next())
}

/// Deterministic Gaussian weights scaled by `1/sqrt(fan_in)`, unit norm gains.
pub fn gen_synthetic(c: &ModelConfig, seed: u64) -> Result<FloatWeights> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = |rows: usize, cols: usize| -> Vec<f32> {
        let s = 1.0 / (cols as f32).sqrt();
        (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * s
            })
            .collect()
    };
    let (d, kv, h) = (c.dim, c.kv_dim(), c.hidden_dim);
    let embeddings = matrix(c.vocab_size, d);
    let layers = (0..c.n_layers)
        .map(|_| FloatLayer {
            wq: matrix(d, d),
            wk: matrix(kv, d),
            wv: matrix(kv, d),
            wo: matrix(d, d),
            w1: matrix(h, d),
            w2: matrix(d, h),
            w3: matrix(h, d),
            att_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        })
        .collect();
    let classifier = (!c.shared_classifier).then(|| matrix(c.vocab_size, d));
    Ok(FloatWeights {
        embeddings,
        layers,
        final_norm: vec![1.0; d],
        classifier,
    })
}
