//! Put/get table demo: serves a table from worker threads over a slow
//! simulated DMA (or loopback TCP) and counts torn values seen by getters.

use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use pageguard::demo::{run_worker, DemoConfig, TransportKind, WorkerMode, Workload};
use pageguard::{GuardOptions, SendPolicy};
use pageguard_cli::{parse_size, DmaArgs};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Blocking,
    Manual,
    Guard,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Net {
    Sim,
    Tcp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Keys {
    Uniform,
    Hot,
}

#[derive(Debug, Parser)]
#[command(name = "pageguard-demo", version, about = "Distributed key-value table demo: blocking, manual tracking or page-guarded sends")]
struct Cli {
    #[arg(long, value_enum, env = "PAGEGUARD_MODE", default_value = "guard")]
    mode: Mode,
    /// Table-serving worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    putters: usize,
    #[arg(long, default_value_t = 4)]
    getters: usize,
    #[arg(long, default_value_t = 256)]
    keys: u64,
    /// Run time in seconds.
    #[arg(long, default_value_t = 5.0)]
    duration: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    workload: Keys,
    /// Pack four values per 4 KiB page.
    #[arg(long)]
    pack_values: bool,
    /// Send large values zero-copy with no protection at all.
    #[arg(long, env = "PAGEGUARD_GUARD_DISABLE")]
    guard_disable: bool,
    /// Values shorter than this many bytes are copied instead of protected.
    #[arg(long, env = "PAGEGUARD_GUARD_THRESHOLD", default_value_t = DemoConfig::GUARD_THRESHOLD, value_parser = parse_size)]
    guard_threshold: usize,
    /// Protected sends in flight per worker before falling back to copies.
    #[arg(long, env = "PAGEGUARD_GUARD_CAPACITY", default_value_t = 4096)]
    guard_capacity: usize,
    /// Abort if a writer stays blocked this long.
    #[arg(long, env = "PAGEGUARD_GUARD_WATCHDOG_MS")]
    guard_watchdog_ms: Option<u64>,
    #[command(flatten)]
    dma: DmaArgs,
    #[arg(long, value_enum, default_value = "sim")]
    transport: Net,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn config(cli: &Cli) -> anyhow::Result<DemoConfig> {
    anyhow::ensure!(cli.duration >= 0.0 && cli.duration.is_finite(), "duration must be non-negative");
    Ok(DemoConfig {
        mode: match cli.mode {
            Mode::Blocking => WorkerMode::Blocking,
            Mode::Manual => WorkerMode::ManualTracking,
            Mode::Guard => WorkerMode::PageGuard,
        },
        workers: cli.workers,
        putters: cli.putters,
        getters: cli.getters,
        keys: cli.keys,
        duration: Duration::from_secs_f64(cli.duration),
        workload: match cli.workload {
            Keys::Uniform => Workload::Uniform,
            Keys::Hot => Workload::Hot,
        },
        pack_values: cli.pack_values,
        guard: GuardOptions {
            policy: SendPolicy::with_threshold(cli.guard_threshold),
            capacity: cli.guard_capacity,
            watchdog: cli.guard_watchdog_ms.map(Duration::from_millis),
            disable: cli.guard_disable,
            ..GuardOptions::default()
        },
        dma: cli.dma.config(pageguard::DmaConfig::DEFAULT_DELAY)?,
        transport: match cli.transport {
            Net::Sim => TransportKind::Sim,
            Net::Tcp => TransportKind::Tcp,
        },
        seed: cli.seed,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config(&cli).and_then(|cfg| Ok(run_worker(&cfg)?));
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("pageguard-demo: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let g = &report.guard;
        let mode = report.mode.map(|m| m.to_string()).unwrap_or_default();
        println!("mode={mode} puts={} gets={} torn={}", report.puts, report.gets, report.torn);
        println!("active_key_queries={} elapsed_ms={}", report.active_key_queries, report.elapsed_ms);
        println!(
            "protects={} copies={} faults_guarded={} faults_false_positive={} blocked_ms={:.3}",
            g.protects,
            g.copies,
            g.faults_guarded,
            g.faults_false_positive,
            g.total_block_time.as_secs_f64() * 1e3
        );
    }
    ExitCode::SUCCESS
}
