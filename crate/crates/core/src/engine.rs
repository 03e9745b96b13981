//! A ready-to-run model: transformer, weight source, decode state and the
//! worker pool used for row and head parallelism.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{Error, Result};
use crate::gqmv::gqmv_into;
use crate::model::{KvCache, LayerProvider, LayerWeights, ModelConfig, PersistentWeights, ResidentLayers, RunState, Transformer};
use crate::modelio::{self, LoadedModel};
use crate::profile::{Component, Profile};
use crate::quant::quantize;
use crate::stream::{LayerStreamer, StreamOptions};
use crate::textio::{SamplerConfig, Sampler, Vocabulary, EOS_ID};

/// Where layer weights come from.
pub enum Weights {
    Resident(ResidentLayers),
    Streamed(LayerStreamer),
}

impl LayerProvider for Weights {
    fn acquire(&mut self, layer: usize) -> Result<Arc<LayerWeights>> {
        match self {
            Weights::Resident(r) => r.acquire(layer),
            Weights::Streamed(s) => s.acquire_layer(layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    /// Stream layers from the file through two slots instead of loading all.
    pub streaming: bool,
    pub stream: StreamOptions,
    /// Worker threads; 0 picks rayon's default.
    pub threads: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            streaming: true,
            stream: StreamOptions::default(),
            threads: 0,
        }
    }
}

pub struct Engine {
    transformer: Transformer,
    weights: Weights,
    state: RunState,
    cache: KvCache,
    pool: ThreadPool,
}

fn build_pool(threads: usize) -> Result<ThreadPool> {
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .thread_name(|i| format!("qllama-worker-{i}"))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

impl Engine {
    pub fn open(path: impl AsRef<Path>, options: EngineOptions) -> Result<Self> {
        let LoadedModel {
            path,
            config,
            persistent,
            layout,
        } = modelio::read_model(path)?;
        let weights = if options.streaming {
            Weights::Streamed(LayerStreamer::open(&path, &config, &layout, options.stream)?)
        } else {
            let mut reader = modelio::SectionReader::open(&path)?;
            let layers = (0..config.n_layers)
                .map(|l| {
                    modelio::read_layer(&mut reader, &config, &layout, l)
                        .map_err(|e| Error::LayerLoad { layer: l, source: Box::new(e) })
                })
                .collect::<Result<Vec<_>>>()?;
            Weights::Resident(ResidentLayers::new(layers))
        };
        Self::with_weights(config, persistent, weights, options.threads)
    }

    /// An engine over weights already in memory.
    pub fn from_parts(
        config: ModelConfig,
        persistent: PersistentWeights,
        layers: Vec<LayerWeights>,
        threads: usize,
    ) -> Result<Self> {
        if layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layers given for a {}-layer model",
                layers.len(),
                config.n_layers
            )));
        }
        Self::with_weights(config, persistent, Weights::Resident(ResidentLayers::new(layers)), threads)
    }

    fn with_weights(config: ModelConfig, persistent: PersistentWeights, weights: Weights, threads: usize) -> Result<Self> {
        let transformer = Transformer::new(config, persistent)?;
        Ok(Engine {
            state: RunState::new(&config)?,
            cache: KvCache::new(&config),
            transformer,
            weights,
            pool: build_pool(threads)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.transformer.config()
    }

    pub fn transformer(&self) -> &Transformer {
        &self.transformer
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn profile(&self) -> &Profile {
        &self.state.profile
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn streamer(&self) -> Option<&LayerStreamer> {
        match &self.weights {
            Weights::Streamed(s) => Some(s),
            Weights::Resident(_) => None,
        }
    }

    pub fn streamer_mut(&mut self) -> Option<&mut LayerStreamer> {
        match &mut self.weights {
            Weights::Streamed(s) => Some(s),
            Weights::Resident(_) => None,
        }
    }

    /// Runs one position; positions must be fed in order from 0.
    pub fn forward(&mut self, token: u32, pos: usize) -> Result<&[f32]> {
        let Engine {
            transformer,
            weights,
            state,
            cache,
            pool,
        } = self;
        pool.install(|| transformer.forward(token, pos, weights, state, cache).map(|_| ()))?;
        Ok(&self.state.logits)
    }

    /// Clears the KV cache and the profile for a fresh sequence.
    pub fn reset(&mut self) {
        self.cache.reset();
        self.state.profile.reset();
    }

    /// Times the classifier projection on a seeded random activation.
    pub fn gops_bench(&self, repeats: usize) -> Result<GopsReport> {
        if repeats < 1 {
            return Err(Error::Input("repeats must be at least 1".into()));
        }
        let c = self.config();
        let spec = c.quant_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x006f_7073);
        let x: Vec<f32> = (0..c.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let xq = quantize(&x, spec)?;
        let w = self.transformer.persistent().classifier().view();
        let mut out = vec![0.0f32; c.vocab_size];
        let ops = 2 * c.vocab_size as u64 * c.dim as u64;
        // one untimed pass to warm caches and the pool
        self.pool.install(|| gqmv_into(w, &xq, &mut out))?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            self.pool.install(|| gqmv_into(w, &xq, &mut out))?;
            let s = t.elapsed().as_secs_f64().max(1e-9);
            samples.push(ops as f64 / s / 1e9);
        }
        let mean = samples.iter().sum::<f64>() / repeats as f64;
        let var = samples.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / repeats as f64;
        Ok(GopsReport {
            ops,
            repeats,
            mean_gops: mean,
            std_gops: var.sqrt(),
            workers: self.threads(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GopsReport {
    pub ops: u64,
    pub repeats: usize,
    pub mean_gops: f64,
    pub std_gops: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    /// Forward positions to run, prompt included.
    pub steps: usize,
    pub sampler: SamplerConfig,
    /// Never stop at the end-of-sequence token, and never sample it.
    pub benchmark: bool,
    pub bos: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            steps: 64,
            sampler: SamplerConfig::greedy(),
            benchmark: false,
            bos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Forward passes performed.
    pub tokens: usize,
    pub seconds: f64,
    pub tok_per_s: f64,
    /// Classifier throughput averaged over every logits computation.
    pub gops: f64,
    pub fractions: [(Component, f64); 5],
    pub weight_wait_seconds: f64,
    pub workers: usize,
}

impl BenchReport {
    fn new(tokens: usize, elapsed: Duration, profile: &Profile, config: &ModelConfig, workers: usize) -> Self {
        let seconds = elapsed.as_secs_f64();
        let ops = 2.0 * config.vocab_size as f64 * config.dim as f64;
        let logits_time: f64 = profile.logits.iter().map(Duration::as_secs_f64).sum();
        let gops = if logits_time > 0.0 {
            ops * profile.logits.len() as f64 / logits_time / 1e9
        } else {
            0.0
        };
        BenchReport {
            tokens,
            seconds,
            tok_per_s: if seconds > 0.0 { tokens as f64 / seconds } else { 0.0 },
            gops,
            fractions: profile.fractions(),
            weight_wait_seconds: profile.weight_wait.as_secs_f64(),
            workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt_tokens: usize,
    /// Every token fed or produced, starting with the prompt.
    pub tokens: Vec<u32>,
    /// Decoded text of the whole sequence.
    pub text: String,
    pub report: BenchReport,
}

/// Feeds the prompt, then samples until `steps` positions have run or, outside
/// benchmark mode, the end-of-sequence token appears.
pub fn generate(engine: &mut Engine, vocab: &Vocabulary, prompt: &str, options: &GenerateOptions) -> Result<Generation> {
    let c = *engine.config();
    if vocab.len() != c.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens, model expects {}",
            vocab.len(),
            c.vocab_size
        )));
    }
    if options.steps == 0 || options.steps > c.seq_len {
        return Err(Error::Input(format!(
            "steps must be in 1..={}, got {}",
            c.seq_len, options.steps
        )));
    }
    let mut tokens = vocab.encode(prompt, options.bos);
    if tokens.is_empty() {
        tokens.push(crate::textio::BOS_ID);
    }
    let prompt_tokens = tokens.len();
    if prompt_tokens > options.steps {
        return Err(Error::Input(format!(
            "prompt is {prompt_tokens} tokens, longer than {} steps",
            options.steps
        )));
    }
    let mut sampler = Sampler::new(options.sampler)?;
    engine.reset();
    let mut masked = Vec::new();

    let start = Instant::now();
    let mut ran = 0;
    for pos in 0..options.steps {
        let logits = engine.forward(tokens[pos], pos)?;
        ran += 1;
        if pos + 1 < prompt_tokens {
            continue;
        }
        let next = if options.benchmark {
            masked.clear();
            masked.extend_from_slice(logits);
            masked[EOS_ID as usize] = f32::NEG_INFINITY;
            sampler.sample(&masked)?
        } else {
            sampler.sample(logits)?
        };
        if next == EOS_ID && !options.benchmark {
            break;
        }
        tokens.push(next);
    }
    let elapsed = start.elapsed();
    let report = BenchReport::new(ran, elapsed, engine.profile(), &c, engine.threads());
    Ok(Generation {
        prompt_tokens,
        text: vocab.decode(&tokens)?,
        tokens,
        report,
    })
}

/// Measured and predicted decode times with and without prefetch.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveSchedule {
    pub steps: usize,
    pub layers: usize,
    pub injected_delay: Duration,
    /// Mean compute seconds per layer, from a fully resident run.
    pub compute_per_layer: f64,
    /// Mean seconds per layer transfer (read plus injected delay), from the
    /// loader's own timings in the non-overlapped run.
    pub transfer_per_layer: f64,
    /// The CPU part of a transfer: `transfer_per_layer` minus the delay.
    pub read_per_layer: f64,
    /// Whether the loader has a core of its own. Without one, its reads take
    /// turns with compute and count toward the overlapped compute cost.
    pub spare_core: bool,
    pub measured_async: f64,
    pub measured_sync: f64,
    pub predicted_async: f64,
    pub predicted_sync: f64,
}

impl LiveSchedule {
    pub fn async_error(&self) -> f64 {
        (self.measured_async - self.predicted_async).abs() / self.predicted_async
    }

    pub fn sync_error(&self) -> f64 {
        (self.measured_sync - self.predicted_sync).abs() / self.predicted_sync
    }
}

const LIVE_REPEATS: usize = 5;

fn forced_tokens(steps: usize, vocab: usize) -> Vec<u32> {
    (0..steps).map(|i| ((i * 37 + 1) % vocab) as u32).collect()
}

/// Decodes `steps` forced tokens three ways (resident, streamed with
/// prefetch, streamed without) with `delay` added to every layer transfer,
/// and compares wall time against the schedule model over all `steps × L`
/// layer computations. Each of five repeats is predicted from its own
/// compute and transfer timings; the repeat with the median ratio of
/// measured to predicted async time is returned.
pub fn live_schedule(path: &Path, steps: usize, delay: Duration, threads: usize) -> Result<LiveSchedule> {
    use crate::stream::{plan_schedule, ScheduleCosts, ScheduleMode};

    let mut resident = Engine::open(
        path,
        EngineOptions {
            streaming: false,
            threads,
            ..EngineOptions::default()
        },
    )?;
    let c = *resident.config();
    if steps == 0 || steps > c.seq_len {
        return Err(Error::Input(format!("steps must be in 1..={}, got {steps}", c.seq_len)));
    }
    let tokens = forced_tokens(steps, c.vocab_size);
    let units = steps * c.n_layers;

    let mut timed_resident = || -> Result<f64> {
        resident.reset();
        let start = Instant::now();
        for (pos, &t) in tokens.iter().enumerate() {
            resident.forward(t, pos)?;
        }
        Ok(start.elapsed().as_secs_f64() / units as f64)
    };
    let run = |prefetch: bool| -> Result<(f64, f64)> {
        let mut e = Engine::open(
            path,
            EngineOptions {
                streaming: true,
                stream: StreamOptions {
                    prefetch,
                    transfer_delay: delay,
                },
                threads,
            },
        )?;
        let start = Instant::now();
        for (pos, &t) in tokens.iter().enumerate() {
            e.forward(t, pos)?;
        }
        let decode = start.elapsed().as_secs_f64();
        let trace = e.streamer().expect("streaming engine").trace();
        let transfers: Vec<f64> = trace.transfers.iter().map(|t| t.end - t.start).collect();
        let mean = transfers.iter().sum::<f64>() / transfers.len() as f64;
        // the preload of layer 0 happened before decoding started
        Ok((decode + transfers[0], mean))
    };

    let cores = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let workers = if threads == 0 { cores } else { threads };
    let spare_core = cores > workers;

    timed_resident()?; // warm-up
    let mut repeats = Vec::with_capacity(LIVE_REPEATS);
    for _ in 0..LIVE_REPEATS {
        // Sync transfers never overlap compute, so their durations are clean.
        let (measured_sync, transfer_per_layer) = run(false)?;
        let compute_per_layer = timed_resident()?;
        let measured_async = run(true)?.0;
        let read_per_layer = (transfer_per_layer - delay.as_secs_f64()).max(0.0);
        let overlapped_compute = compute_per_layer + if spare_core { 0.0 } else { read_per_layer };
        let sync_costs = ScheduleCosts::uniform(units, compute_per_layer, transfer_per_layer);
        let async_costs = ScheduleCosts::uniform(units, overlapped_compute, transfer_per_layer);
        repeats.push(LiveSchedule {
            steps,
            layers: c.n_layers,
            injected_delay: delay,
            compute_per_layer,
            transfer_per_layer,
            read_per_layer,
            spare_core,
            measured_async,
            measured_sync,
            predicted_async: plan_schedule(&async_costs, ScheduleMode::Async)?.total_time,
            predicted_sync: plan_schedule(&sync_costs, ScheduleMode::Sync)?.total_time,
        });
    }
    repeats.sort_by(|a, b| {
        (a.measured_async / a.predicted_async).total_cmp(&(b.measured_async / b.predicted_async))
    });
    Ok(repeats.swap_remove(LIVE_REPEATS / 2))
}
