//! Timing harness for full versus subsampled attention on synthetic graphs.
//!
//! Graphs are drawn from a seeded uniform cube whose side is chosen so that
//! node density is [`BENCH_DENSITY`] per unit volume; at that density a
//! radius-2 ball holds about 17 nodes on average, close to the default
//! pooling neighborhood.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costmodel::attention_score_flops;
use crate::dsa::{dsa_forward_with, DsaConfig, DsaWeights, UpsampleMode};
use crate::error::{Error, Result};
use crate::fsa::{fsa_forward_with, ForwardOptions, FsaWeights};
use crate::pcio::FeatureGraph;

/// Nodes per unit volume of the synthetic cube.
pub const BENCH_DENSITY: f64 = 0.5;

/// Rows of a score matrix evaluated at once by one worker.
const ROWS_IN_FLIGHT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchSize {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
}

impl std::str::FromStr for BenchSize {
    type Err = Error;

    /// `n:m:d:heads`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::arg(format!("size `{s}` is not n:m:d:heads")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("size `{s}`: `{p}` is not a count")))?;
        }
        let size = BenchSize {
            n: v[0],
            m: v[1],
            d: v[2],
            heads: v[3],
        };
        size.validate()?;
        Ok(size)
    }
}

impl std::fmt::Display for BenchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}:{}", self.n, self.m, self.d, self.heads)
    }
}

impl BenchSize {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::arg(format!("size {self}: every entry must be positive")));
        }
        if self.m > self.n {
            return Err(Error::arg(format!("size {self}: m exceeds n")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::arg(format!("size {self}: heads must divide d")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<BenchSize>,
    pub repeats: usize,
    pub seed: u64,
    /// Refuse sizes whose estimate exceeds this many bytes.
    pub memory_budget: u64,
    pub threads: usize,
}

/// Peak working-set estimate in bytes for one FSA forward at `n` nodes: the
/// score rows in flight (`n²` when maps are kept) plus the `n x d`
/// projections.
pub fn estimate_fsa_bytes(n: usize, d: usize, heads: usize, threads: usize, keep_maps: bool) -> u64 {
    let n = n as u64;
    let scores = if keep_maps {
        heads as u64 * n * n
    } else {
        n.min((ROWS_IN_FLIGHT * threads.max(1)) as u64) * n
    };
    8 * (scores + 8 * n * d as u64)
}

/// Available memory from `/proc/meminfo`, or 4 GiB when unknown.
pub fn default_memory_budget() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("MemAvailable:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .unwrap_or(4 << 30)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub repeats: usize,
    pub fsa_median_s: f64,
    pub dsa_median_s: f64,
    pub speedup: f64,
    pub fsa_score_flops: u64,
    pub dsa_score_flops: u64,
    pub estimated_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MachineInfo {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub threads: usize,
    pub cpu_model: String,
}

impl MachineInfo {
    pub fn detect(threads: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads,
            cpu_model,
        }
    }
}

/// Seeded uniform-cube graph at [`BENCH_DENSITY`].
pub fn synthetic_graph(n: usize, d: usize, seed: u64) -> FeatureGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64 / BENCH_DENSITY).cbrt();
    let positions = Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0..side));
    let features = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    FeatureGraph::new(features, positions).expect("finite")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn time_repeats(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

/// Median forward time of both blocks for one size, after one warm-up run.
pub fn bench_size(size: BenchSize, repeats: usize, seed: u64) -> Result<BenchRow> {
    size.validate()?;
    if repeats == 0 {
        return Err(Error::arg("repeats must be at least 1"));
    }
    let g = synthetic_graph(size.n, size.d, seed);
    let fw = FsaWeights::seeded(size.d, size.heads, seed.wrapping_add(1))?;
    let dw = DsaWeights::seeded(size.d, size.heads, UpsampleMode::Idw, 1.6, 16, seed.wrapping_add(2))?;
    let cfg = DsaConfig {
        keypoints: size.m,
        ..DsaConfig::default()
    };
    let opts = ForwardOptions {
        keep_attention: false,
    };
    let fsa = time_repeats(repeats, || fsa_forward_with(&g, &fw, opts).map(|_| ()))?;
    let dsa = time_repeats(repeats, || dsa_forward_with(&g, &dw, &cfg, opts).map(|_| ()))?;
    Ok(BenchRow {
        n: size.n,
        m: size.m,
        d: size.d,
        heads: size.heads,
        repeats,
        fsa_median_s: fsa,
        dsa_median_s: dsa,
        speedup: fsa / dsa,
        fsa_score_flops: attention_score_flops(size.n, size.d),
        dsa_score_flops: attention_score_flops(size.m, size.d),
        estimated_bytes: 0,
    })
}

/// Run every size, refusing any whose memory estimate exceeds the budget
/// before allocating.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 {
        return Err(Error::arg("repeats must be at least 1"));
    }
    if cfg.sizes.is_empty() {
        return Err(Error::arg("no benchmark sizes given"));
    }
    for s in &cfg.sizes {
        s.validate()?;
        let need = estimate_fsa_bytes(s.n, s.d, s.heads, cfg.threads, false);
        if need > cfg.memory_budget {
            return Err(Error::arg(format!(
                "refusing size {s}: needs about {:.2} GiB, budget is {:.2} GiB",
                need as f64 / (1u64 << 30) as f64,
                cfg.memory_budget as f64 / (1u64 << 30) as f64
            )));
        }
    }
    cfg.sizes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = bench_size(*s, cfg.repeats, cfg.seed.wrapping_add(i as u64 * 7919))?;
            row.estimated_bytes = estimate_fsa_bytes(s.n, s.d, s.heads, cfg.threads, false);
            Ok(row)
        })
        .collect()
}

pub const CSV_HEADER: &str = "n,m,d,heads,repeats,fsa_median_s,dsa_median_s,speedup,fsa_score_flops,dsa_score_flops,estimated_bytes,os,arch,cpus,threads,cpu_model";

/// Timing table with machine metadata on every row.
pub fn bench_csv(rows: &[BenchRow], machine: &MachineInfo) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let model = machine.cpu_model.replace(['"', ','], " ");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3},{},{},{},{},{},{},{},{}\n",
            r.n,
            r.m,
            r.d,
            r.heads,
            r.repeats,
            r.fsa_median_s,
            r.dsa_median_s,
            r.speedup,
            r.fsa_score_flops,
            r.dsa_score_flops,
            r.estimated_bytes,
            machine.os,
            machine.arch,
            machine.cpus,
            machine.threads,
            model
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sizes() {
        let s: BenchSize = "8192:2048:64:4".parse().unwrap();
        assert_eq!((s.n, s.m, s.d, s.heads), (8192, 2048, 64, 4));
        assert!("8:9:4:2".parse::<BenchSize>().is_err());
        assert!("8:2:4".parse::<BenchSize>().is_err());
        assert!("8:2:6:4".parse::<BenchSize>().is_err());
    }

    #[test]
    fn zero_repeats_rejected() {
        let s: BenchSize = "16:4:4:1".parse().unwrap();
        assert!(bench_size(s, 0, 1).is_err());
        let cfg = BenchConfig {
            sizes: vec![s],
            repeats: 0,
            seed: 0,
            memory_budget: u64::MAX,
            threads: 1,
        };
        assert!(run_bench(&cfg).is_err());
    }

    #[test]
    fn equal_subset_gives_equal_score_flops() {
        let row = bench_size("32:32:8:2".parse().unwrap(), 1, 3).unwrap();
        assert_eq!(row.fsa_score_flops, row.dsa_score_flops);
    }

    #[test]
    fn budget_refusal() {
        let cfg = BenchConfig {
            sizes: vec!["100000:100:64:4".parse().unwrap()],
            repeats: 1,
            seed: 0,
            memory_budget: 1 << 20,
            threads: 1,
        };
        let err = run_bench(&cfg).unwrap_err().to_string();
        assert!(err.contains("refusing"), "{err}");
    }

    #[test]
    fn kept_maps_scale_quadratically() {
        let a = estimate_fsa_bytes(1000, 8, 2, 1, true);
        let b = estimate_fsa_bytes(2000, 8, 2, 1, true);
        assert!(b > 3 * a);
    }
}
