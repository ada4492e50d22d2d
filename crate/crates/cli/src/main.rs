//! `pointctx` command-line interface.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input or arguments,
//! 3 I/O failure, 4 a check failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pointctx::bench::{self, BenchConfig, BenchSize, MachineInfo};
use pointctx::check::{self, CheckOptions, SuiteSizes};
use pointctx::costmodel::{self, compare_reports, count_flops, count_params, load_config};
use pointctx::extract::{run_extract, write_extraction, AttentionExport, ExtractConfig, Method};
use pointctx::pcio::load_scan;
use pointctx::Error;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_CHECK_FAILED: u8 = 4;

/// Environment variable holding the default worker thread count.
const THREADS_ENV: &str = "POINTCTX_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pointctx", version, about = "Point-cloud context aggregation toolkit")]
struct Cli {
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discretize a scan and run attention blocks over it.
    Extract(ExtractArgs),
    /// Time full versus subsampled attention on synthetic graphs.
    Bench(BenchArgs),
    /// Parameter and FLOP report for architecture configs.
    Cost(CostArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    /// fsa or dsa
    #[arg(long, default_value = "dsa")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config attention export setting.
    #[arg(long)]
    attention: Option<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated n:m:d:heads entries.
    #[arg(long, default_value = "2048:512:64:4,8192:2048:64:4")]
    sizes: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes bench.csv and manifest.json here; CSV goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Memory budget in MiB (default: available memory).
    #[arg(long)]
    memory_budget_mib: Option<u64>,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Architecture config; repeat to compare against the first.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Treat configs as consecutive (baseline, variant) pairs.
    #[arg(long)]
    pairs: bool,
    /// Evaluate every attention stage at this many nodes.
    #[arg(long)]
    nodes: Option<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Writes cost.json and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: perturb the weights seen by the analytic gradient.
    #[arg(long)]
    perturb_gradient: bool,
    /// Writes check.json and manifest.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Timing {
    stage: String,
    seconds: f64,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    argv: Vec<String>,
    config: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    threads: usize,
    out_dir: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<Timing>,
    status: String,
}

impl RunManifest {
    fn new(command: &'static str, threads: usize) -> Self {
        Self {
            tool: "pointctx",
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config: Vec::new(),
            inputs: Vec::new(),
            seed: None,
            threads,
            out_dir: None,
            outputs: Vec::new(),
            timings: Vec::new(),
            status: "ok".into(),
        }
    }

    fn time(&mut self, stage: &str, seconds: f64) {
        self.timings.push(Timing {
            stage: stage.into(),
            seconds,
        });
    }

    /// Into `out_dir/manifest.json` when there is an output directory,
    /// otherwise to stderr.
    fn emit(&self) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(internal)? + "\n";
        match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
                let p = dir.join("manifest.json");
                fs::write(&p, text).map_err(|e| io_fail(&p, e))
            }
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn internal(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: classify(&e),
            message: e.to_string(),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn cmd_extract(args: &ExtractArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.config.push(args.config.clone());
    m.inputs.push(args.scan.clone());
    m.out_dir = Some(args.out.clone());
    let method: Method = args.mode.parse()?;
    let mut cfg = ExtractConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &args.attention {
        cfg.export.attention = a.parse::<AttentionExport>()?;
    }
    m.seed = Some(cfg.seed);
    let t0 = Instant::now();
    let pc = load_scan(&args.scan)?;
    m.time("load", t0.elapsed().as_secs_f64());
    let ex = run_extract(&pc, &cfg, method).map_err(|e| Failure {
        code: classify(&e.source),
        message: e.to_string(),
    })?;
    for t in &ex.timings {
        m.time(&t.stage, t.seconds);
    }
    let t0 = Instant::now();
    m.outputs = write_extraction(&args.out, &ex, cfg.export.attention)?;
    m.time("write", t0.elapsed().as_secs_f64());
    println!(
        "{} points, {} in range, {} nodes, {} {} layer(s); {} files in {}",
        ex.points_in,
        ex.points_cropped,
        ex.before.n(),
        ex.layers.len(),
        args.mode,
        m.outputs.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.seed = Some(args.seed);
    m.out_dir = args.out.clone();
    let sizes = args
        .sizes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<BenchSize>())
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = BenchConfig {
        sizes,
        repeats: args.repeats,
        seed: args.seed,
        memory_budget: args
            .memory_budget_mib
            .map_or_else(bench::default_memory_budget, |mib| mib << 20),
        threads: m.threads,
    };
    let t0 = Instant::now();
    let rows = bench::run_bench(&cfg)?;
    m.time("bench", t0.elapsed().as_secs_f64());
    let csv = bench::bench_csv(&rows, &MachineInfo::detect(m.threads));
    match &args.out {
        Some(dir) => {
            write_file(&dir.join("bench.csv"), &csv)?;
            m.outputs.push("bench.csv".into());
            for r in &rows {
                println!(
                    "n={:<7} m={:<6} d={:<4} heads={:<2} fsa {:>9.4}s  dsa {:>9.4}s  x{:.2}",
                    r.n, r.m, r.d, r.heads, r.fsa_median_s, r.dsa_median_s, r.speedup
                );
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    nodes: Option<usize>,
    reports: Vec<costmodel::CostReport>,
    comparisons: Vec<costmodel::Comparison>,
}

fn cmd_cost(args: &CostArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.config = args.config.clone();
    m.out_dir = args.out.clone();
    if args.pairs && !args.config.len().is_multiple_of(2) {
        return Err(Failure {
            code: EXIT_VALIDATION,
            message: "--pairs needs an even number of --config entries".into(),
        });
    }
    let t0 = Instant::now();
    let reports = args
        .config
        .iter()
        .map(|p| {
            let cfg = load_config(p)?;
            match args.nodes {
                Some(n) => count_flops(&cfg, n),
                None => count_params(&cfg),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let comparisons: Vec<_> = if args.pairs {
        reports.chunks(2).map(|p| compare_reports(&p[0], &p[1])).collect()
    } else {
        reports[1..].iter().map(|r| compare_reports(&reports[0], r)).collect()
    };
    m.time("cost", t0.elapsed().as_secs_f64());
    let out = CostOutput {
        nodes: args.nodes,
        reports,
        comparisons,
    };
    let json = serde_json::to_string_pretty(&out).map_err(internal)? + "\n";
    if let Some(dir) = &args.out {
        write_file(&dir.join("cost.json"), &json)?;
        m.outputs.push("cost.json".into());
    }
    if args.json {
        print!("{json}");
    } else {
        for r in &out.reports {
            println!("{r}\n");
        }
        if !out.comparisons.is_empty() {
            println!("change (negative = reduction)");
            for c in &out.comparisons {
                println!("{c}");
            }
        }
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs, m: &mut RunManifest) -> Result<(), Failure> {
    m.seed = Some(args.seed);
    m.out_dir = args.out.clone();
    let opts = CheckOptions {
        seed: args.seed,
        perturb_gradient_weights: args.perturb_gradient,
    };
    let outcomes = check::run_suite(opts, SuiteSizes::default());
    for o in &outcomes {
        println!("{o}");
        m.time(o.name, o.seconds);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if let Some(dir) = &args.out {
        let json = serde_json::to_string_pretty(&outcomes).map_err(internal)? + "\n";
        write_file(&dir.join("check.json"), &json)?;
        m.outputs.push("check.json".into());
    }
    println!(
        "{} of {} checks passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK_FAILED,
            message: format!("failed checks: {}", failed.join(", ")),
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(0) => {
            return Err(Failure {
                code: EXIT_VALIDATION,
                message: "--threads must be at least 1".into(),
            })
        }
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(internal)?;
    execute(&cli.command, threads)
}

fn execute(command: &Command, threads: usize) -> Result<(), Failure> {
    let name = match command {
        Command::Extract(_) => "extract",
        Command::Bench(_) => "bench",
        Command::Cost(_) => "cost",
        Command::Check(_) => "check",
    };
    let mut manifest = RunManifest::new(name, threads);
    let t0 = Instant::now();
    let result = match command {
        Command::Extract(a) => cmd_extract(a, &mut manifest),
        Command::Bench(a) => cmd_bench(a, &mut manifest),
        Command::Cost(a) => cmd_cost(a, &mut manifest),
        Command::Check(a) => cmd_check(a, &mut manifest),
    };
    manifest.time("total", t0.elapsed().as_secs_f64());
    if let Err(f) = &result {
        manifest.status = format!("error (exit {}): {}", f.code, f.message);
    }
    let emitted = manifest.emit();
    result.and(emitted)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
    }

    fn exec(args: &[&str]) -> Result<(), Failure> {
        let cli = Cli::try_parse_from(std::iter::once("pointctx").chain(args.iter().copied())).unwrap();
        execute(&cli.command, 1)
    }

    fn code(r: Result<(), Failure>) -> u8 {
        r.err().map_or(0, |f| f.code)
    }

    fn path(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn single_cost_config_has_no_comparisons() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = root().join("configs/arch/pp.toml");
        exec(&["cost", "--config", path(&cfg), "--out", path(dir.path())]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("cost.json")).unwrap()).unwrap();
        assert_eq!(v["reports"].as_array().unwrap().len(), 1);
        assert!(v["comparisons"].as_array().unwrap().is_empty());
        let man: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(man["command"], "cost");
        assert_eq!(man["status"], "ok");
        assert_eq!(man["outputs"][0], "cost.json");
    }

    #[test]
    fn cost_pairs_need_even_count() {
        let cfg = root().join("configs/arch/pp.toml");
        assert_eq!(code(exec(&["cost", "--pairs", "--config", path(&cfg)])), EXIT_VALIDATION);
    }

    #[test]
    fn missing_config_is_io_failure() {
        assert_eq!(code(exec(&["cost", "--config", "/nonexistent/arch.toml"])), EXIT_IO);
    }

    #[test]
    fn malformed_config_is_validation_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        fs::write(&p, "name = \"x\"\nbackbone = \"pointpillars\"\n[input]\nnodes = \"many\"\n").unwrap();
        let err = exec(&["cost", "--config", path(&p)]).unwrap_err();
        assert_eq!(err.code, EXIT_VALIDATION);
        assert!(err.message.contains("input.nodes"), "{}", err.message);
    }

    #[test]
    fn empty_scan_fails_in_crop_stage() {
        let dir = tempfile::tempdir().unwrap();
        let scan = dir.path().join("empty.bin");
        fs::write(&scan, []).unwrap();
        let out = dir.path().join("out");
        let cfg = root().join("configs/extract_kitti_dsa.toml");
        let err = exec(&["extract", "--config", path(&cfg), "--scan", path(&scan), "--out", path(&out)]).unwrap_err();
        assert_eq!(err.code, EXIT_VALIDATION);
        assert!(err.message.contains("crop"), "{}", err.message);
        let man = fs::read_to_string(out.join("manifest.json")).unwrap();
        assert!(man.contains("error (exit 2)"));
    }

    #[test]
    fn missing_scan_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = root().join("configs/extract_kitti_dsa.toml");
        let out = dir.path().join("out");
        let r = exec(&["extract", "--config", path(&cfg), "--scan", "/nonexistent.bin", "--out", path(&out)]);
        assert_eq!(code(r), EXIT_IO);
    }

    #[test]
    fn unknown_mode_is_validation_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = root().join("configs/extract_kitti_dsa.toml");
        let scan = root().join("data/sample_scan.bin");
        let out = dir.path().join("out");
        let r = exec(&["extract", "--config", path(&cfg), "--scan", path(&scan), "--mode", "conv", "--out", path(&out)]);
        assert_eq!(code(r), EXIT_VALIDATION);
    }

    #[test]
    fn bench_rejects_zero_repeats_and_oversized_runs() {
        assert_eq!(code(exec(&["bench", "--sizes", "64:16:8:2", "--repeats", "0"])), EXIT_VALIDATION);
        let r = exec(&["bench", "--sizes", "1000000:1000:64:4", "--repeats", "1", "--memory-budget-mib", "1"]);
        assert_eq!(code(r), EXIT_VALIDATION);
    }

    #[test]
    fn bench_writes_csv_with_machine_columns() {
        let dir = tempfile::tempdir().unwrap();
        exec(&["bench", "--sizes", "64:16:8:2", "--repeats", "1", "--out", path(dir.path())]).unwrap();
        let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), bench::CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("64,16,8,2,1,"));
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn zero_threads_rejected() {
        let cli = Cli::try_parse_from(["pointctx", "--threads", "0", "check"]).unwrap();
        assert_eq!(code(run(cli)), EXIT_VALIDATION);
    }

    #[test]
    fn check_negative_control_fails_with_check_code() {
        assert_eq!(code(exec(&["check", "--perturb-gradient"])), EXIT_CHECK_FAILED);
    }
}
