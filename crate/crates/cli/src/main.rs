use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qllama::engine::{generate, live_schedule, BenchReport, Engine, EngineOptions, GenerateOptions};
use qllama::model::ModelConfig;
use qllama::modelio::{gen_synthetic, write_model, ModelLayout};
use qllama::pipesim::{calibrate_ddr, simulate_gqmv, HwConfig, SimReport};
use qllama::profile::Component;
use qllama::quant::{error_stats, quantize, QuantSpec};
use qllama::stream::{plan_schedule, ScheduleCosts, ScheduleMode, StreamOptions};
use qllama::textio::{SampleMode, SamplerConfig, Vocabulary};

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if parts.last().is_some_and(|prev| prev.contains(&text)) {
            continue;
        }
        parts.push(text);
    }
    one_line(&parts.join(": "))
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}

macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "qllama", version, about = "Quantized Llama-style inference with layer streaming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate text from a prompt.
    Generate(RunArgs),
    /// Measure tokens per second and classifier GOPS.
    Benchmark(BenchArgs),
    /// Break decode time down by component.
    Profile(RunArgs),
    /// Cycle-level model of the pipelined matrix-vector accelerator.
    Simulate(SimArgs),
    /// Compare layer transfer schedules with and without overlap.
    Schedule(ScheduleArgs),
    /// Quantization error statistics per tensor of a synthetic model.
    QuantizeStats(QuantStatsArgs),
    /// Run the built-in consistency checks.
    Selftest(CsvArg),
    /// Write a seeded synthetic model and matching tokenizer.
    GenSynthetic(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Topp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct CsvArg {
    /// Print machine-readable CSV instead of text.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Overlap layer transfers with compute.
    #[arg(long = "async", value_enum, default_value = "on")]
    async_: OnOff,
    /// Artificial delay added to every layer transfer, in microseconds.
    #[arg(long, default_value_t = 0)]
    inject_transfer_us: u64,
    /// Keep every layer in memory instead of streaming.
    #[arg(long)]
    resident: bool,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl ModelArgs {
    fn open(&self) -> Result<Engine> {
        let options = EngineOptions {
            streaming: !self.resident,
            stream: StreamOptions {
                prefetch: self.async_ == OnOff::On,
                transfer_delay: Duration::from_micros(self.inject_transfer_us),
            },
            threads: self.threads,
        };
        Engine::open(&self.model, options).with_context(|| format!("loading {}", self.model.display()))
    }
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    mode: Mode,
    #[arg(long, default_value_t = 0.9)]
    p: f32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            mode: match self.mode {
                Mode::Greedy => SampleMode::Greedy,
                Mode::Topp => SampleMode::TopP,
            },
            p: self.p,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Positions to run, prompt included.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    csv: CsvArg,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Comma-separated step counts.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    steps: Vec<usize>,
    /// Timed repeats of the classifier projection.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    csv: CsvArg,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 32000)]
    m: usize,
    #[arg(long, default_value_t = 2048)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    lanes: usize,
    #[arg(long, default_value_t = 256)]
    gs: usize,
    #[arg(long, default_value_t = 205.0)]
    clock_mhz: f64,
    /// Memory bytes per cycle, or "unlimited".
    #[arg(long, default_value = "unlimited")]
    ddr: String,
    #[arg(long, default_value_t = 2)]
    stream_depth: usize,
    #[arg(long, default_value_t = 4.0)]
    stage_latency: f64,
    /// Find the memory rate that yields this many GOPS.
    #[arg(long)]
    calibrate: Option<f64>,
    /// Also sweep this many memory rates from 1 byte/cycle up to the lane width.
    #[arg(long)]
    sweep: Option<usize>,
    #[command(flatten)]
    csv: CsvArg,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 22)]
    layers: usize,
    /// Compute time per layer, in milliseconds.
    #[arg(long, default_value_t = 10.0)]
    compute_ms: f64,
    /// Transfer time per layer, in milliseconds.
    #[arg(long, default_value_t = 8.0)]
    transfer_ms: f64,
    /// Also time a live decode of this model with and without prefetch.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 2000)]
    inject_transfer_us: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[command(flatten)]
    csv: CsvArg,
}

#[derive(Args)]
struct QuantStatsArgs {
    /// tiny, small or tinyllama (the last needs about 5 GB of memory).
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's group size.
    #[arg(long)]
    gs: Option<usize>,
    #[command(flatten)]
    csv: CsvArg,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's layer count.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
}

fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).with_context(|| format!("unknown preset {name:?}; expected tiny, small or tinyllama"))
}

fn fractions_csv(r: &BenchReport) -> String {
    r.fractions.iter().map(|(_, f)| format!("{f:.6}")).collect::<Vec<_>>().join(",")
}

const BENCH_HEADER: &str =
    "steps,tokens,seconds,tok_per_s,gops,matrix,attention,swiglu,rope,rmsnorm,weight_wait_s,workers,async";

fn bench_row(steps: usize, r: &BenchReport, prefetch: bool) -> String {
    format!(
        "{steps},{},{:.6},{:.4},{:.6},{},{:.6},{},{}",
        r.tokens,
        r.seconds,
        r.tok_per_s,
        r.gops,
        fractions_csv(r),
        r.weight_wait_seconds,
        r.workers,
        if prefetch { "on" } else { "off" }
    )
}

fn print_report(out: &mut dyn Write, r: &BenchReport) -> Result<()> {
    writeln!(
        out,
        "{} tokens in {:.3} s: {:.2} tok/s, {:.3} GOPS, {} workers",
        r.tokens, r.seconds, r.tok_per_s, r.gops, r.workers
    )?;
    for (c, f) in &r.fractions {
        writeln!(out, "  {:<22} {:>7.3}%", c.label(), 100.0 * f)?;
    }
    writeln!(out, "  weight wait            {:>7.3} s", r.weight_wait_seconds)?;
    Ok(())
}

fn run_generate(a: &RunArgs, benchmark: bool) -> Result<(BenchReport, String)> {
    let vocab = Vocabulary::load(&a.tokenizer).with_context(|| format!("loading tokenizer {}", a.tokenizer.display()))?;
    let mut engine = a.model.open()?;
    let options = GenerateOptions {
        steps: a.steps,
        sampler: a.sampling.config(),
        benchmark,
        bos: true,
    };
    let g = generate(&mut engine, &vocab, &a.prompt, &options)?;
    Ok((g.report, g.text))
}

fn cmd_generate(a: &RunArgs) -> Result<()> {
    let (report, text) = run_generate(a, false)?;
    outln!("{text}");
    let mut err = std::io::stderr();
    if a.csv.csv {
        writeln!(err, "{BENCH_HEADER}")?;
        writeln!(err, "{}", bench_row(a.steps, &report, a.model.async_ == OnOff::On))?;
    } else {
        print_report(&mut err, &report)?;
    }
    Ok(())
}

fn cmd_profile(a: &RunArgs) -> Result<()> {
    let (r, _) = run_generate(a, true)?;
    if a.csv.csv {
        outln!("component,seconds_fraction");
        for (c, f) in &r.fractions {
            outln!("{},{f:.6}", c.key());
        }
        outln!("weight_wait_s,{:.6}", r.weight_wait_seconds);
    } else {
        print_report(&mut std::io::stdout(), &r)?;
        let top = r.fractions.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|x| x.0).unwrap_or(Component::Matrix);
        outln!("largest: {}", top.label());
    }
    Ok(())
}

fn cmd_benchmark(a: &BenchArgs) -> Result<()> {
    if a.steps.is_empty() {
        bail!("no step counts given");
    }
    let vocab = Vocabulary::load(&a.tokenizer).with_context(|| format!("loading tokenizer {}", a.tokenizer.display()))?;
    let mut engine = a.model.open()?;
    let gops = engine.gops_bench(a.repeats)?;
    let prefetch = a.model.async_ == OnOff::On;
    if a.csv.csv {
        outln!("{BENCH_HEADER},classifier_ops,classifier_gops_mean,classifier_gops_std");
    } else {
        outln!(
            "classifier: {} ops, {:.4} ± {:.4} GOPS over {} repeats",
            gops.ops, gops.mean_gops, gops.std_gops, gops.repeats
        );
    }
    for &steps in &a.steps {
        let options = GenerateOptions {
            steps,
            sampler: a.sampling.config(),
            benchmark: true,
            bos: true,
        };
        let g = generate(&mut engine, &vocab, &a.prompt, &options)?;
        if a.csv.csv {
            outln!(
                "{},{},{:.6},{:.6}",
                bench_row(steps, &g.report, prefetch),
                gops.ops,
                gops.mean_gops,
                gops.std_gops
            );
        } else {
            outln!("steps {steps}:");
            print_report(&mut std::io::stdout(), &g.report)?;
        }
    }
    Ok(())
}

const SIM_HEADER: &str = "m,n,lanes,gs,clock_hz,ddr_bytes_per_cycle,total_cycles,fill_cycles,busy_cycles,\
stall_cycles,blocked_cycles,drain_cycles,steady_row_cycles,read_busy,dot_busy,accumulate_busy,ops,sustained_gops,peak_gops";

fn sim_row(hw: &HwConfig, r: &SimReport) -> String {
    format!(
        "{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.4},{:.3},{:.3},{:.3},{},{:.6},{:.6}",
        r.m,
        r.n,
        hw.simd_lanes,
        hw.gs,
        hw.clock_hz,
        hw.ddr_bytes_per_cycle,
        r.total_cycles,
        r.fill_cycles,
        r.busy_cycles,
        r.stall_cycles,
        r.blocked_cycles,
        r.drain_cycles,
        r.steady_row_cycles,
        r.stage_busy.read,
        r.stage_busy.dot,
        r.stage_busy.accumulate,
        r.ops,
        r.sustained_gops,
        r.peak_gops
    )
}

fn cmd_simulate(a: &SimArgs) -> Result<()> {
    let ddr = match a.ddr.as_str() {
        "unlimited" | "inf" => f64::INFINITY,
        s => s.parse::<f64>().with_context(|| format!("--ddr {s:?} is not a number"))?,
    };
    let hw = HwConfig {
        simd_lanes: a.lanes,
        gs: a.gs,
        clock_hz: a.clock_mhz * 1e6,
        ddr_bytes_per_cycle: ddr,
        stream_depth: a.stream_depth,
        stage_latency: a.stage_latency,
    };
    let mut rows = vec![(hw, simulate_gqmv(a.m, a.n, &hw)?)];
    if let Some(target) = a.calibrate {
        let rate = calibrate_ddr(target, a.m, a.n, &hw)?;
        let cal = hw.with_ddr(rate);
        if !a.csv.csv {
            outln!("{target} GOPS needs {rate:.4} bytes/cycle");
        }
        rows.push((cal, simulate_gqmv(a.m, a.n, &cal)?));
    }
    if let Some(points) = a.sweep {
        for k in 0..points {
            let rate = 1.0 + (a.lanes as f64 - 1.0) * k as f64 / (points.max(2) - 1) as f64;
            let h = hw.with_ddr(rate);
            rows.push((h, simulate_gqmv(a.m, a.n, &h)?));
        }
    }
    if a.csv.csv {
        outln!("{SIM_HEADER}");
        for (h, r) in &rows {
            outln!("{}", sim_row(h, r));
        }
        return Ok(());
    }
    for (h, r) in &rows {
        outln!(
            "{}x{} at {} bytes/cycle: {:.0} cycles ({:.0} stall, {:.0} fill, {:.0} drain), {:.2} cycles/row, {:.4} of {:.4} GOPS",
            r.m,
            r.n,
            h.ddr_bytes_per_cycle,
            r.total_cycles,
            r.stall_cycles,
            r.fill_cycles,
            r.drain_cycles,
            r.steady_row_cycles,
            r.sustained_gops,
            r.peak_gops
        );
    }
    Ok(())
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<()> {
    let costs = ScheduleCosts::uniform(a.layers, a.compute_ms, a.transfer_ms);
    let sync = plan_schedule(&costs, ScheduleMode::Sync)?;
    let asy = plan_schedule(&costs, ScheduleMode::Async)?;
    if a.csv.csv {
        outln!("kind,mode,layers,predicted,measured");
        outln!("model,sync,{},{},", a.layers, sync.total_time);
        outln!("model,async,{},{},", a.layers, asy.total_time);
    } else {
        outln!(
            "{} layers, {} ms compute, {} ms transfer: sync {:.3} ms, async {:.3} ms, speedup {:.3}x",
            a.layers,
            a.compute_ms,
            a.transfer_ms,
            sync.total_time,
            asy.total_time,
            sync.total_time / asy.total_time
        );
    }
    if let Some(path) = &a.model {
        let live = live_schedule(path, a.steps, Duration::from_micros(a.inject_transfer_us), a.threads)?;
        let units = live.steps * live.layers;
        if a.csv.csv {
            outln!("live,sync,{units},{:.6},{:.6}", live.predicted_sync, live.measured_sync);
            outln!("live,async,{units},{:.6},{:.6}", live.predicted_async, live.measured_async);
        } else {
            outln!(
                "live, {} steps x {} layers, {:.3} ms compute and {:.3} ms transfer per layer:",
                live.steps,
                live.layers,
                1e3 * live.compute_per_layer,
                1e3 * live.transfer_per_layer
            );
            if !live.spare_core {
                outln!(
                    "  no spare core: the loader's {:.3} ms of reading counts toward overlapped compute",
                    1e3 * live.read_per_layer
                );
            }
            outln!(
                "  sync  predicted {:.2} ms, measured {:.2} ms ({:.1}% off)",
                1e3 * live.predicted_sync,
                1e3 * live.measured_sync,
                100.0 * live.sync_error()
            );
            outln!(
                "  async predicted {:.2} ms, measured {:.2} ms ({:.1}% off)",
                1e3 * live.predicted_async,
                1e3 * live.measured_async,
                100.0 * live.async_error()
            );
        }
    }
    Ok(())
}

fn cmd_quantize_stats(a: &QuantStatsArgs) -> Result<()> {
    let mut c = preset(&a.preset)?;
    if let Some(gs) = a.gs {
        c.gs = gs;
    }
    c.validate()?;
    let spec = QuantSpec::new(c.gs)?;
    let w = gen_synthetic(&c, a.seed)?;
    let mut tensors: Vec<(String, &[f32])> = vec![("embeddings".into(), &w.embeddings)];
    for (l, layer) in w.layers.iter().enumerate() {
        for (name, data, _, _) in layer.matrices(&c) {
            tensors.push((format!("layer{l}.{name}"), data));
        }
    }
    if let Some(cls) = &w.classifier {
        tensors.push(("classifier".into(), cls));
    }
    if a.csv.csv {
        outln!("tensor,numel,max,min,mean,std,mean_rel_pct,std_rel_pct");
    } else {
        outln!(
            "{:<16} {:>10} {:>11} {:>11} {:>11} {:>11} {:>9} {:>9}",
            "tensor", "numel", "max", "min", "mean", "std", "rel%", "rel std%"
        );
    }
    for (name, data) in tensors {
        let s = error_stats(data, &quantize(data, spec)?)?;
        if a.csv.csv {
            outln!(
                "{name},{},{:e},{:e},{:e},{:e},{:.6},{:.6}",
                data.len(),
                s.max,
                s.min,
                s.mean,
                s.std,
                s.mean_rel_pct,
                s.std_rel_pct
            );
        } else {
            outln!(
                "{name:<16} {:>10} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>9.4} {:>9.4}",
                data.len(),
                s.max,
                s.min,
                s.mean,
                s.std,
                s.mean_rel_pct,
                s.std_rel_pct
            );
        }
    }
    Ok(())
}

fn cmd_selftest(a: &CsvArg) -> Result<()> {
    let results = qllama::selftest::run();
    let failed = results.iter().filter(|r| !r.passed).count();
    if a.csv {
        outln!("check,passed,seconds,detail");
    }
    for r in &results {
        if a.csv {
            outln!("{},{},{:.4},\"{}\"", r.name, r.passed, r.seconds, r.detail.replace('"', "'"));
        } else {
            outln!("{} {:<26} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
    }
    if !a.csv {
        outln!("{} passed, {failed} failed", results.len() - failed);
    }
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", results.len());
    }
    Ok(())
}

fn cmd_gen_synthetic(a: &SynthArgs) -> Result<()> {
    let mut c = preset(&a.preset)?;
    if let Some(l) = a.layers {
        c.n_layers = l;
    }
    c.validate()?;
    let w = gen_synthetic(&c, a.seed)?;
    write_model(&c, &w, &a.model).with_context(|| format!("writing {}", a.model.display()))?;
    Vocabulary::synthetic(c.vocab_size)?
        .save(&a.tokenizer)
        .with_context(|| format!("writing {}", a.tokenizer.display()))?;
    outln!(
        "wrote {} ({} bytes) and {}",
        a.model.display(),
        ModelLayout::new(&c).file_size,
        a.tokenizer.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::QuantizeStats(a) => cmd_quantize_stats(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("error: missing subcommand; see qllama --help");
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
