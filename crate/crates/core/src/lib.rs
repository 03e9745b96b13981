//! Inference for Llama-style decoder models with group-wise INT8 weights.
//!
//! * [`quant`] quantizes FP32 tensors in groups, one FP32 scale per group.
//! * [`gqmv`] multiplies quantized matrices by quantized vectors.
//! * [`model`] holds the configuration, weights, KV cache and forward pass.
//! * [`modelio`] reads and writes the model file; [`stream`] streams its
//!   layers through two buffers and models the transfer schedule.
//! * [`engine`] ties these together for generation and benchmarking.
//! * [`pipesim`] is a cycle-level model of a pipelined GQMV accelerator.
//! * [`textio`] has the tokenizer and the samplers.
//!
//! ```
//! use qllama::engine::{generate, Engine, GenerateOptions};
//! use qllama::model::ModelConfig;
//! use qllama::modelio::{gen_synthetic, quantize_weights};
//! use qllama::textio::Vocabulary;
//!
//! let c = ModelConfig::tiny();
//! let (persistent, layers) = quantize_weights(&c, &gen_synthetic(&c, 0)?)?;
//! let mut engine = Engine::from_parts(c, persistent, layers, 1)?;
//! let vocab = Vocabulary::synthetic(c.vocab_size)?;
//! let opts = GenerateOptions { steps: 8, benchmark: true, ..Default::default() };
//! assert_eq!(generate(&mut engine, &vocab, "hello", &opts)?.report.tokens, 8);
//! # Ok::<(), qllama::Error>(())
//! ```

pub mod engine;
pub mod error;
pub mod gqmv;
pub mod model;
pub mod modelio;
pub mod pipesim;
pub mod profile;
pub mod quant;
pub mod selftest;
pub mod stream;
pub mod textio;

pub use error::{Error, Result};
