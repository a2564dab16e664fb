//! Copy-vs-protect sweep over message sizes; writes CSV (or JSON with
//! `--json`) and reports the crossover size on stderr.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use pageguard::sweep::{run_bench, to_json, write_csv, BenchConfig, BenchMode};
use pageguard::ChecksumKind;
use pageguard_cli::{parse_size, DmaArgs};

#[derive(Debug, Parser)]
#[command(name = "pageguard-bench", version, about = "Copy-vs-protect send cost sweep")]
struct Cli {
    /// Message sizes, comma separated (suffixes K, Ki, M, Mi accepted).
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "64,4096,65536,1048576")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "copy,protect")]
    modes: Vec<BenchMode>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit JSON (records plus crossover) instead of CSV.
    #[arg(long)]
    json: bool,
    /// Bytes sent per point before the message count is clamped.
    #[arg(long, default_value = "256Mi", value_parser = parse_size)]
    byte_budget: usize,
    #[arg(long, default_value_t = 200)]
    min_messages: usize,
    #[arg(long, default_value_t = 20_000)]
    max_messages: usize,
    /// Keep the transport's payload checksums (slower, for auditing).
    #[arg(long)]
    audit: bool,
    #[command(flatten)]
    dma: DmaArgs,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        dma: cli.dma.config(Duration::ZERO)?.with_checksum(if cli.audit {
            ChecksumKind::Fnv1a64
        } else {
            ChecksumKind::Off
        }),
        byte_budget: cli.byte_budget,
        min_messages: cli.min_messages,
        max_messages: cli.max_messages,
        ..BenchConfig::default()
    };
    let report = run_bench(&cli.sizes, &cli.modes, &cfg)?;
    let mut out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    if cli.json {
        writeln!(out, "{}", to_json(&report))?;
    } else {
        write_csv(&report.records, &mut out)?;
    }
    out.flush()?;
    match report.crossover {
        Some(size) => eprintln!("crossover: {size}"),
        None => eprintln!("crossover: none"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(&Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pageguard-bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}
