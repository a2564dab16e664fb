//! Argument types shared by the `pageguard-demo` and `pageguard-bench` binaries.

use std::time::Duration;

use clap::Args;
use pageguard::DmaConfig;

/// Pacing of the simulated DMA engine.
#[derive(Debug, Clone, Args)]
pub struct DmaArgs {
    /// Bytes the device reads per step.
    #[arg(long, env = "PAGEGUARD_DMA_CHUNK", default_value_t = DmaConfig::DEFAULT_CHUNK, value_parser = parse_size)]
    pub dma_chunk: usize,
    /// Delay per step in microseconds; 0 means unpaced.
    #[arg(long, env = "PAGEGUARD_DMA_DELAY_US")]
    pub dma_delay_us: Option<u64>,
}

impl DmaArgs {
    pub fn config(&self, default_delay: Duration) -> anyhow::Result<DmaConfig> {
        let delay = self.dma_delay_us.map_or(default_delay, Duration::from_micros);
        Ok(DmaConfig::new(self.dma_chunk, delay)?)
    }
}

/// Byte count with an optional `K`/`Ki`/`M`/`Mi`/`G`/`Gi` suffix; all are
/// powers of 1024.
pub fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, suffix) = s.split_at(split);
    let n: usize = digits.parse().map_err(|_| format!("bad size {s:?}"))?;
    let shift = match suffix.trim_end_matches(['i', 'B']) {
        "" => 0,
        "K" | "k" => 10,
        "M" | "m" => 20,
        "G" | "g" => 30,
        _ => return Err(format!("bad size suffix in {s:?}")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("size {s:?} overflows"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64"), Ok(64));
        assert_eq!(parse_size("4Ki"), Ok(4096));
        assert_eq!(parse_size("64K"), Ok(65536));
        assert_eq!(parse_size("1Mi"), Ok(1 << 20));
        assert_eq!(parse_size("2MiB"), Ok(2 << 20));
        assert!(parse_size("1X").is_err());
        assert!(parse_size("").is_err());
    }
}
