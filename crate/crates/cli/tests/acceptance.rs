//! Acceptance suite: ten criteria, one PASS/FAIL line each.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pointctx::bench::{bench_size, BenchSize};
use pointctx::check::{self, CheckOptions, CheckOutcome};
use pointctx::costmodel::{compare, count_flops, count_params, load_config, ArchConfig, AttentionKind};

const SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn from_checks(outcomes: &[CheckOutcome]) -> Self {
        Verdict {
            passed: outcomes.iter().all(|o| o.passed),
            detail: outcomes.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("; "),
        }
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn arch(name: &str) -> ArchConfig {
    load_config(root().join("configs/arch").join(format!("{name}.toml"))).expect("shipped config loads")
}

fn opts() -> CheckOptions {
    CheckOptions {
        seed: SEED,
        ..CheckOptions::default()
    }
}

fn oracle_equivalence() -> Verdict {
    Verdict::from_checks(&[check::fsa_oracle(opts(), 50)])
}

fn gradient_correctness() -> Verdict {
    Verdict::from_checks(&[check::fsa_gradient(opts(), 20)])
}

fn permutation_equivariance() -> Verdict {
    Verdict::from_checks(&[check::fsa_permutation(opts(), 100)])
}

fn attention_normalization() -> Verdict {
    Verdict::from_checks(&[
        check::attention_normalization(opts(), 100),
        check::upsample_partition(opts(), 100),
    ])
}

fn deformation_invariants() -> Verdict {
    Verdict::from_checks(&[
        check::deformation_identity(opts(), 100),
        check::deformation_bound(opts(), 1000),
    ])
}

fn complexity() -> Verdict {
    let ratio = check::dsa_score_ratio(opts(), 50);
    let (n, m) = (8192usize, 2048usize);
    let fsa = arch("fsa_pp");
    let dsa = arch("dsa_pp");
    assert_eq!(dsa.attention[0].kind, AttentionKind::Dsa);
    assert_eq!(dsa.attention[0].keypoints, Some(m));
    let f = count_flops(&fsa, n).expect("fsa cost").attention_score_flops();
    let d = count_flops(&dsa, n).expect("dsa cost").attention_score_flops();
    let model_exact = d * (n * n) as u64 == f * (m * m) as u64;
    let size = BenchSize { n, m, d: 64, heads: 4 };
    match bench_size(size, 3, SEED) {
        Ok(row) => Verdict {
            passed: ratio.passed && model_exact && row.speedup >= 1.5,
            detail: format!(
                "{ratio}; cost model scores {f} vs {d} exact={model_exact}; measured fsa {:.3}s dsa {:.3}s speedup {:.2}x (gate 1.5x)",
                row.fsa_median_s, row.dsa_median_s, row.speedup
            ),
        },
        Err(e) => Verdict {
            passed: false,
            detail: format!("benchmark failed: {e}"),
        },
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn parameter_reproduction() -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, target) in [
        ("pp", 4.8e6),
        ("fsa_pp", 1.0e6),
        ("dsa_pp", 1.1e6),
        ("second", 4.6e6),
        ("fsa_second", 2.2e6),
    ] {
        let p = count_params(&arch(name)).expect("params").total_params as f64;
        let ok = within(p, target, 0.15);
        passed &= ok;
        parts.push(format!(
            "{name} {:.3}M vs {:.1}M {}",
            p / 1e6,
            target / 1e6,
            if ok { "ok" } else { "OUT" }
        ));
    }
    for (base, variant, target) in [
        ("pp", "fsa_pp", -79.0),
        ("second", "fsa_second", -52.0),
        ("pointrcnn", "fsa_pointrcnn", -37.0),
        ("pvrcnn", "fsa_pvrcnn", -16.0),
    ] {
        let c = compare(&arch(base), &arch(variant), None).expect("compare");
        let ok = (c.params_change_pct - target).abs() <= 10.0;
        passed &= ok;
        parts.push(format!(
            "{base}->{variant} {:+.1}% vs {target:+.0}% {}",
            c.params_change_pct,
            if ok { "ok" } else { "OUT" }
        ));
    }
    Verdict {
        passed,
        detail: parts.join(", "),
    }
}

fn scale_independence() -> Verdict {
    Verdict::from_checks(&[check::parameter_independence(opts())])
}

fn geometry() -> Verdict {
    Verdict::from_checks(&[check::geometry_oracles(opts(), 100)])
}

fn collect_files(dir: &Path, base: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).expect("read output dir") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            collect_files(&path, base, out);
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(base).expect("prefix").to_path_buf();
            out.insert(rel, std::fs::read(&path).expect("read artifact"));
        }
    }
}

fn run_extract(threads: Option<usize>, out: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pointctx"));
    if let Some(t) = threads {
        cmd.args(["--threads", &t.to_string()]);
    }
    cmd.arg("extract")
        .arg("--config")
        .arg(root().join("configs/extract_kitti_dsa.toml"))
        .arg("--scan")
        .arg(root().join("data/sample_scan.bin"))
        .arg("--out")
        .arg(out)
        .env_remove("POINTCTX_THREADS");
    let res = cmd.output().map_err(|e| e.to_string())?;
    if !res.status.success() {
        return Err(format!(
            "extract exited {:?}: {}",
            res.status.code(),
            String::from_utf8_lossy(&res.stderr)
        ));
    }
    let mut files = BTreeMap::new();
    collect_files(out, out, &mut files);
    Ok(files)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let max = std::thread::available_parallelism().map_or(1, |n| n.get());
    let runs: Vec<(String, Option<usize>)> = vec![
        ("run1".into(), None),
        ("run2".into(), None),
        ("run3".into(), None),
        ("threads1".into(), Some(1)),
        ("threads4".into(), Some(4)),
        (format!("threads{max}"), Some(max)),
    ];
    let mut reference: Option<BTreeMap<PathBuf, Vec<u8>>> = None;
    let mut mismatches = Vec::new();
    let mut count = 0;
    for (label, threads) in &runs {
        let files = match run_extract(*threads, &tmp.path().join(label)) {
            Ok(f) => f,
            Err(e) => {
                return Verdict {
                    passed: false,
                    detail: format!("{label}: {e}"),
                }
            }
        };
        count = files.len();
        match &reference {
            None => reference = Some(files),
            Some(r) => {
                if r.keys().ne(files.keys()) {
                    mismatches.push(format!("{label}: different file set"));
                }
                for (k, v) in &files {
                    if r.get(k) != Some(v) {
                        mismatches.push(format!("{label}: {}", k.display()));
                    }
                }
            }
        }
    }
    Verdict {
        passed: mismatches.is_empty() && count > 0,
        detail: format!(
            "{} runs (threads default x3, 1, 4, {max}), {count} artifacts each, {} mismatches {}",
            runs.len(),
            mismatches.len(),
            mismatches.join(" ")
        ),
    }
}

/// Cost-model reference figures beyond the ten criteria.
fn reference_figures() -> Vec<(String, bool)> {
    let (pp, fpp, dpp) = (arch("pp"), arch("fsa_pp"), arch("dsa_pp"));
    let n = pp.input.nodes;
    let flops = compare(&pp, &fpp, Some(n)).expect("compare");
    let dsa = compare(&pp, &dpp, None).expect("compare");
    let flops_ok = flops.variant_flops < flops.baseline_flops && (flops.flops_change_pct + 50.0).abs() <= 15.0;
    let dsa_ok = (dsa.params_change_pct + 77.0).abs() <= 10.0;
    vec![
        (
            format!(
                "pp->fsa_pp FLOPs at n={n}: {:.2}G -> {:.2}G ({:+.1}%) vs -50% +-15",
                flops.baseline_flops as f64 / 1e9,
                flops.variant_flops as f64 / 1e9,
                flops.flops_change_pct
            ),
            flops_ok,
        ),
        (format!("pp->dsa_pp params: {:+.1}% vs -77% +-10", dsa.params_change_pct), dsa_ok),
    ]
}

type Criterion = (u32, &'static str, f64, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "oracle equivalence", 5.0, oracle_equivalence),
        (2, "gradient correctness", 60.0, gradient_correctness),
        (3, "permutation equivariance", 10.0, permutation_equivariance),
        (4, "attention normalization", f64::INFINITY, attention_normalization),
        (5, "deformation invariants", 5.0, deformation_invariants),
        (6, "complexity", 120.0, complexity),
        (7, "parameter reproduction", 1.0, parameter_reproduction),
        (8, "parameter scale independence", 1.0, scale_independence),
        (9, "geometry oracles", 10.0, geometry),
        (10, "determinism", 60.0, determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let t0 = Instant::now();
        let v = f();
        let secs = t0.elapsed().as_secs_f64();
        let in_time = secs < limit;
        let ok = v.passed && in_time;
        if !ok {
            failed += 1;
        }
        let budget = if limit.is_finite() { format!(" < {limit}s") } else { String::new() };
        println!(
            "criterion {id:>2} {name:<30} {} [{secs:.2}s{budget}{}] {}",
            if ok { "PASS" } else { "FAIL" },
            if in_time { "" } else { " over budget" },
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    let mut figures_failed = 0;
    for (line, ok) in reference_figures() {
        if !ok {
            figures_failed += 1;
        }
        println!("figure {} {line}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 || figures_failed > 0 {
        std::process::exit(1);
    }
}
