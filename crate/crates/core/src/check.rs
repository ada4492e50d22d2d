//! Named invariant suite run at fixed seeds. Each check samples its own
//! instances from the suite seed and reports the worst observed metric.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::costmodel::{self, parse_config, serialize_config, AttentionKind};
use crate::dsa::{
    deform_vertices, dsa_forward, idw_weights, upsample_attention, DsaConfig, DsaWeights,
    UpsampleMode, Upsampler, IDW_EPS,
};
use crate::error::Result;
use crate::fsa::{
    fsa_backward, fsa_forward, fsa_forward_taped, softmax_rows, FsaGrads, FsaWeights,
};
use crate::geom::{ball_query, fps, knn};
use crate::pcio::{
    crop_range, discretize, group_cells, EncoderWeights, FeatureGraph, GridMode, GridSpec, Point,
    PointCloud,
};
use crate::reference as oracle;

pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const MIN_GROUP_VARIANCE: f64 = 1e-3;
/// Two-channel groups normalise to `±gamma` whatever the input, leaving only
/// eps-scale gradients.
pub const MIN_GROUP_SIZE: usize = 3;
pub const PERMUTATION_TOL: f64 = 1e-9;
pub const ROW_SUM_TOL: f64 = 1e-6;
pub const IDW_SUM_TOL: f64 = 1e-9;
pub const SHIFT_TOL: f64 = 1e-12;
pub const DIST_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
#[derive(Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Negative control: the analytic gradient is taken at weights nudged
    /// away from the finite-difference point, so the gradient check must fail.
    pub perturb_gradient_weights: bool,
}


#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<28} n={:<5} metric={:<12.3e} tol={:<9.1e} {:.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.metric,
            self.tolerance,
            self.seconds,
            self.detail
        )
    }
}

struct Measure {
    instances: usize,
    metric: f64,
    passed: bool,
    detail: String,
}

fn run(name: &'static str, tolerance: f64, f: impl FnOnce() -> Result<Measure>) -> CheckOutcome {
    let t0 = Instant::now();
    let res = f();
    let seconds = t0.elapsed().as_secs_f64();
    match res {
        Ok(m) => CheckOutcome {
            name,
            passed: m.passed,
            instances: m.instances,
            metric: m.metric,
            tolerance,
            detail: m.detail,
            seconds,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            instances: 0,
            metric: f64::NAN,
            tolerance,
            detail: format!("error: {e}"),
            seconds,
        },
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Features uniform in [-1, 1), positions uniform in [-scale, scale).
pub fn random_graph(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> FeatureGraph {
    let features = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let positions = Array2::from_shape_fn((n, 3), |_| rng.random_range(-scale..scale));
    FeatureGraph::new(features, positions).expect("finite")
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn heads_and_dim(rng: &mut impl Rng, max_d: usize) -> (usize, usize) {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let per = rng.random_range(1..=max_d / heads);
    (heads, heads * per)
}

/// Production attention block against the scalar double loop.
pub fn fsa_oracle(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("fsa_oracle", ORACLE_TOL, || {
        let mut rng = rng_for(opts.seed, 1);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=8);
            let (heads, d) = heads_and_dim(&mut rng, 8);
            let g = random_graph(&mut rng, n, d, 2.0);
            let w = FsaWeights::seeded_full(d, heads, rng.random())?;
            let out = fsa_forward(&g, &w)?;
            let r = oracle::fsa_forward(&oracle::rows(&g.features), &oracle::rows(&g.positions), &w);
            worst = worst.max(max_abs_diff(&out.output, &oracle::matrix(&r.output)));
            for (a, b) in out.attn.iter().zip(&r.attn) {
                worst = worst.max(max_abs_diff(a, &oracle::matrix(b)));
            }
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst <= ORACLE_TOL,
            detail: "max |prod - scalar| over outputs and maps".into(),
        })
    })
}

/// Elementwise relative error `|a - f| / max(|a|, |f|, floor)` where the
/// floor is `1e-3` times the largest magnitude in that tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-3).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error per named tensor.
pub fn gradient_errors(analytic: &FsaGrads, numeric: &FsaGrads) -> Vec<(&'static str, f64)> {
    oracle::grad_tensors(analytic)
        .into_iter()
        .zip(oracle::grad_tensors(numeric))
        .map(|((name, a), (_, f))| (name, relative_error(&a, &f)))
        .collect()
}

/// Draw a gradient-check instance whose pre-norm groups are not
/// eps-dominated.
pub fn gradient_instance(rng: &mut ChaCha8Rng) -> Result<(FeatureGraph, FsaWeights, usize)> {
    let mut resamples = 0;
    loop {
        let n = rng.random_range(2..=6);
        let (heads, d) = loop {
            let hd = heads_and_dim(rng, 8);
            if hd.1 / hd.0 >= MIN_GROUP_SIZE {
                break hd;
            }
        };
        let g = random_graph(rng, n, d, 1.0);
        let w = FsaWeights::seeded_full(d, heads, rng.random())?;
        let v = oracle::min_group_variance(&oracle::rows(&g.features), &oracle::rows(&g.positions), &w);
        if v >= MIN_GROUP_VARIANCE {
            return Ok((g, w, resamples));
        }
        resamples += 1;
    }
}

/// Reverse-mode gradients against central finite differences.
pub fn fsa_gradient(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("fsa_gradient", GRAD_TOL, || {
        let mut rng = rng_for(opts.seed, 2);
        let mut worst = 0.0f64;
        let mut worst_name = "";
        let mut resamples = 0;
        for _ in 0..instances {
            let (g, w, r) = gradient_instance(&mut rng)?;
            resamples += r;
            let upstream = Array2::from_shape_fn((g.n(), g.d()), |_| rng.random_range(-1.0..1.0));
            let mut wa = w.clone();
            if opts.perturb_gradient_weights {
                wa.wq.mapv_inplace(|x| x * 1.01 + 1e-3);
            }
            let (_, tape) = fsa_forward_taped(&g, &wa)?;
            let analytic = fsa_backward(&tape, &upstream)?;
            let numeric = oracle::finite_difference_grads(&g, &w, &upstream, FD_STEP)?;
            for (name, e) in gradient_errors(&analytic, &numeric) {
                if e > worst || e.is_nan() {
                    worst = e;
                    worst_name = name;
                }
            }
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst < GRAD_TOL,
            detail: format!("worst tensor `{worst_name}`, {resamples} resampled"),
        })
    })
}

fn permute_graph(g: &FeatureGraph, perm: &[usize]) -> FeatureGraph {
    FeatureGraph::new(g.features.select(Axis(0), perm), g.positions.select(Axis(0), perm))
        .expect("same shape")
}

/// `f(P X) = P f(X)` and `A(P X) = P A P^T`.
pub fn fsa_permutation(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("fsa_permutation", PERMUTATION_TOL, || {
        let mut rng = rng_for(opts.seed, 3);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=64);
            let (heads, d) = heads_and_dim(&mut rng, 16);
            let g = random_graph(&mut rng, n, d, 3.0);
            let w = FsaWeights::seeded_full(d, heads, rng.random())?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let base = fsa_forward(&g, &w)?;
            let moved = fsa_forward(&permute_graph(&g, &perm), &w)?;
            worst = worst.max(max_abs_diff(&moved.output, &base.output.select(Axis(0), &perm)));
            for (a, b) in moved.attn.iter().zip(&base.attn) {
                let conj = b.select(Axis(0), &perm).select(Axis(1), &perm);
                worst = worst.max(max_abs_diff(a, &conj));
            }
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst <= PERMUTATION_TOL,
            detail: "outputs permuted, maps conjugated".into(),
        })
    })
}

fn row_sum_error(m: &Array2<f64>) -> (f64, bool) {
    let err = m
        .sum_axis(Axis(1))
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    let in_range = m.iter().all(|v| (0.0..=1.0).contains(v));
    (err, in_range)
}

/// Every softmax row of FSA maps, DSA subset maps and the cross-attention
/// up-sampler sums to one, entries in [0, 1].
pub fn attention_normalization(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("attention_normalization", ROW_SUM_TOL, || {
        let mut rng = rng_for(opts.seed, 4);
        let mut worst = 0.0f64;
        let mut in_range = true;
        let mut rows = 0usize;
        let mut note = |m: &Array2<f64>| {
            let (e, ok) = row_sum_error(m);
            worst = worst.max(e);
            in_range &= ok;
            rows += m.nrows();
        };
        for _ in 0..instances {
            let n = rng.random_range(2..=64);
            let (heads, d) = heads_and_dim(&mut rng, 16);
            let mut g = random_graph(&mut rng, n, d, 4.0);
            let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
            g.features.mapv_inplace(|v| v * scale);
            for m in &fsa_forward(&g, &FsaWeights::seeded_full(d, heads, rng.random())?)?.attn {
                note(m);
            }
            let cfg = DsaConfig {
                keypoints: rng.random_range(1..=n),
                ..DsaConfig::default()
            };
            let w = DsaWeights::seeded(d, heads, UpsampleMode::Attention, 1.6, 16, rng.random())?;
            let out = dsa_forward(&g, &w, &cfg)?;
            for m in &out.attention.attn {
                note(m);
            }
            if let Some(m) = &out.upsample_map {
                note(m);
            }
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst <= ROW_SUM_TOL && in_range,
            detail: format!("{rows} rows, entries in [0,1]: {in_range}"),
        })
    })
}

/// Adding a constant to every logit of a row leaves its softmax unchanged.
pub fn softmax_shift(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("softmax_shift", SHIFT_TOL, || {
        let mut rng = rng_for(opts.seed, 5);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (r, c) = (rng.random_range(1..8), rng.random_range(1..16));
            let logits = Array2::from_shape_fn((r, c), |_| rng.random_range(-5.0..5.0));
            let shift = Array1::from_shape_fn(r, |_| rng.random_range(-50.0..50.0));
            let mut a = logits.clone();
            let mut b = &logits + &shift.insert_axis(Axis(1));
            softmax_rows(&mut a);
            softmax_rows(&mut b);
            worst = worst.max(max_abs_diff(&a, &b));
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst <= SHIFT_TOL,
            detail: "row-wise constant shift".into(),
        })
    })
}

/// `W_offset = 0` leaves sampled positions bit-identical.
pub fn deformation_identity(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("deformation_identity", 0.0, || {
        let mut rng = rng_for(opts.seed, 6);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=64);
            let d = rng.random_range(1..=8);
            let g = random_graph(&mut rng, n, d, 5.0);
            let mut w = DsaWeights::seeded(d, 1, UpsampleMode::Idw, 1.6, 16, rng.random())?;
            w.w_offset.fill(0.0);
            w.w_align.mapv_inplace(|v| v * 100.0);
            let cfg = DsaConfig {
                keypoints: rng.random_range(1..=n),
                ..DsaConfig::default()
            };
            let out = dsa_forward(&g, &w, &cfg)?;
            worst = worst.max(max_abs_diff(&out.subset.displacements(&g), &Array2::zeros((cfg.keypoints, 3))));
            let sampled = g.positions.select(Axis(0), &out.subset.indices.indices);
            if out.subset.refined != sampled {
                worst = worst.max(f64::MIN_POSITIVE);
            }
        }
        Ok(Measure {
            instances,
            metric: worst,
            passed: worst == 0.0,
            detail: "refined == sampled, bitwise".into(),
        })
    })
}

/// Every displacement coordinate lies strictly inside (-1, 1) over random
/// weight draws on a fixed graph.
pub fn deformation_bound(opts: CheckOptions, draws: usize) -> CheckOutcome {
    run("deformation_bound", 1.0, || {
        let mut rng = rng_for(opts.seed, 7);
        let g = random_graph(&mut rng, 256, 16, 4.0);
        let cfg = DsaConfig {
            keypoints: 64,
            ..DsaConfig::default()
        };
        let subset = fps(g.positions.view(), cfg.keypoints)?;
        let sampled = g.positions.select(Axis(0), &subset.indices);
        let nbhd = ball_query(sampled.view(), g.positions.view(), cfg.deform_radius, cfg.deform_k)?;
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let w = DsaWeights::seeded(16, 1, UpsampleMode::Idw, 1.6, 16, rng.random())?;
            let (refined, _) = deform_vertices(&g, &subset, &nbhd, w.w_offset.view(), w.w_align.view())?;
            worst = worst.max(max_abs_diff(&refined, &sampled));
        }
        Ok(Measure {
            instances: draws,
            metric: worst,
            passed: worst < 1.0,
            detail: "max |v' - v| per coordinate".into(),
        })
    })
}

/// DSA score MACs are `(m/n)^2` times FSA's on the same graph, exactly, for
/// both the measured blocks and the cost model.
pub fn dsa_score_ratio(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("dsa_score_ratio", 0.0, || {
        let mut rng = rng_for(opts.seed, 8);
        let mut mismatches = 0usize;
        for _ in 0..instances {
            let n = rng.random_range(2..=64);
            let m = rng.random_range(1..=n);
            let (heads, d) = heads_and_dim(&mut rng, 8);
            let g = random_graph(&mut rng, n, d, 3.0);
            let f = fsa_forward(&g, &FsaWeights::seeded(d, heads, rng.random())?)?;
            let w = DsaWeights::seeded(d, heads, UpsampleMode::Idw, 1.6, 16, rng.random())?;
            let s = dsa_forward(&g, &w, &DsaConfig { keypoints: m, ..DsaConfig::default() })?;
            let (n2, m2) = ((n * n) as u64, (m * m) as u64);
            if s.score_macs() * n2 != f.score_macs * m2 {
                mismatches += 1;
            }
            let (cf, cd) = (costmodel::attention_score_flops(n, d), costmodel::attention_score_flops(m, d));
            if cd * n2 != cf * m2 {
                mismatches += 1;
            }
        }
        Ok(Measure {
            instances,
            metric: mismatches as f64,
            passed: mismatches == 0,
            detail: "score count ratio == (m/n)^2".into(),
        })
    })
}

/// IDW weights per target sum to one; cross-attention rows sum to one.
pub fn upsample_partition(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("upsample_partition", IDW_SUM_TOL, || {
        let mut rng = rng_for(opts.seed, 9);
        let mut worst_idw = 0.0f64;
        let mut worst_attn = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=128);
            let m = rng.random_range(1..=n);
            let d = rng.random_range(1..=8);
            let g = random_graph(&mut rng, n, d, 5.0);
            let sub = g.select(&fps(g.positions.view(), m)?.indices);
            let radius = rng.random_range(0.2..3.0);
            for row in idw_weights(sub.positions.view(), g.positions.view(), radius, 16)? {
                let s: f64 = row.iter().map(|p| p.1).sum();
                worst_idw = worst_idw.max((s - 1.0).abs());
            }
            let w = DsaWeights::seeded(d, 1, UpsampleMode::Attention, radius, 16, rng.random())?;
            if let Upsampler::Attention(c) = &w.upsampler {
                let (_, map) = upsample_attention(sub.features.view(), g.features.view(), c)?;
                worst_attn = worst_attn.max(row_sum_error(&map).0);
            }
        }
        Ok(Measure {
            instances,
            metric: worst_idw,
            passed: worst_idw <= IDW_SUM_TOL && worst_attn <= ROW_SUM_TOL,
            detail: format!("idw eps {IDW_EPS:e}; cross-attention worst {worst_attn:.2e}"),
        })
    })
}

/// Same inputs give bit-identical FSA and DSA outputs across runs and
/// thread-pool sizes.
pub fn block_determinism(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("block_determinism", 0.0, || {
        let mut rng = rng_for(opts.seed, 10);
        let mut diffs = 0usize;
        for _ in 0..instances {
            let n = rng.random_range(300..=700);
            let g = random_graph(&mut rng, n, 8, 10.0);
            let fw = FsaWeights::seeded(8, 2, rng.random())?;
            let dw = DsaWeights::seeded(8, 2, UpsampleMode::Idw, 1.6, 16, rng.random())?;
            let cfg = DsaConfig { keypoints: n / 4, ..DsaConfig::default() };
            let mut outs = Vec::new();
            for threads in [1usize, 2, 3] {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| crate::Error::arg(e.to_string()))?;
                let r: Result<(Array2<f64>, Array2<f64>)> = pool.install(|| {
                    Ok((fsa_forward(&g, &fw)?.output, dsa_forward(&g, &dw, &cfg)?.output))
                });
                outs.push(r?);
            }
            diffs += outs.windows(2).filter(|p| p[0] != p[1]).count();
        }
        Ok(Measure {
            instances,
            metric: diffs as f64,
            passed: diffs == 0,
            detail: "thread pools of 1, 2, 3".into(),
        })
    })
}

/// Weight storage depends on `d` and head count only.
pub fn parameter_independence(opts: CheckOptions) -> CheckOutcome {
    run("parameter_independence", 0.0, || {
        let mut rng = rng_for(opts.seed, 11);
        let d = 64;
        let small = random_graph(&mut rng, 100, d, 10.0);
        let large = random_graph(&mut rng, 100_000, d, 10.0);
        let ws = FsaWeights::seeded(small.d(), 4, 1)?;
        let wl = FsaWeights::seeded(large.d(), 4, 1)?;
        let diff = ws.byte_size().abs_diff(wl.byte_size());
        let arch = parse_config(PROBE_ARCH)?;
        let p_small = costmodel::cost_report(&arch.with_nodes(100), &costmodel::CountingRules::builtin())?;
        let p_large = costmodel::cost_report(&arch.with_nodes(1_000_000), &costmodel::CountingRules::builtin())?;
        let pdiff = p_small.total_params.abs_diff(p_large.total_params);
        Ok(Measure {
            instances: 2,
            metric: (diff as u64 + pdiff) as f64,
            passed: diff == 0 && pdiff == 0,
            detail: format!("{} bytes at n=100 and n=100000", ws.byte_size()),
        })
    })
}

const PROBE_ARCH: &str = r#"
name = "probe"
backbone = "pointpillars"
[input]
nodes = 1000
[[attention]]
stage = "bev"
kind = "fsa"
layers = 2
heads = 4
dim = 64
in_dim = 64
deform_radius = [3.0]
pool_radius = [2.0]
interp_mlp_dim = [64]
interp_radius = [1.6]
interp_samples = [16]
"#;

/// Cost model: FLOPs strictly increase in `n`; config survives a round trip.
pub fn cost_invariants(_opts: CheckOptions) -> CheckOutcome {
    run("cost_invariants", 0.0, || {
        let arch = parse_config(PROBE_ARCH)?;
        let mut last = 0u64;
        let mut violations = 0usize;
        for n in [1usize, 2, 10, 100, 1000, 6000, 10_000, 100_000] {
            let f = costmodel::count_flops(&arch, n)?.total_flops;
            if f <= last {
                violations += 1;
            }
            last = f;
        }
        let dsa = arch.with_kind(AttentionKind::Dsa, Some(100));
        for cfg in [&arch, &dsa] {
            if parse_config(&serialize_config(cfg)?)? != *cfg {
                violations += 1;
            }
        }
        Ok(Measure {
            instances: 10,
            metric: violations as f64,
            passed: violations == 0,
            detail: "flop monotonicity in n, parse/serialize round trip".into(),
        })
    })
}

fn grid_cloud(rng: &mut impl Rng, n: usize) -> Rows3 {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-256..256) as f64 / 64.0,
                rng.random_range(-256..256) as f64 / 64.0,
                rng.random_range(-256..256) as f64 / 64.0,
            ]
        })
        .collect()
}

type Rows3 = Vec<[f64; 3]>;

fn as_matrix(p: &Rows3) -> Array2<f64> {
    Array2::from_shape_fn((p.len(), 3), |(i, a)| p[i][a])
}

/// Neighborhood and sampling queries against exhaustive search. Also checks
/// the fps prefix property and translation invariance.
pub fn geometry_oracles(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("geometry_oracles", 0.0, || {
        let mut rng = rng_for(opts.seed, 12);
        let mut mismatches = 0usize;
        let mut dist_err = 0.0f64;
        for _ in 0..instances {
            let n = rng.random_range(1..=128);
            let p = grid_cloud(&mut rng, n);
            let pm = as_matrix(&p);
            let pr = oracle::rows(&pm);
            let m = rng.random_range(1..=n);
            let got = fps(pm.view(), m)?.indices;
            if got != oracle::fps(&pr, m) {
                mismatches += 1;
            }
            let j = rng.random_range(1..=m);
            if fps(pm.view(), j)?.indices != got[..j] {
                mismatches += 1;
            }
            let nq = rng.random_range(1..=16);
            let q = as_matrix(&grid_cloud(&mut rng, nq));
            let qr = oracle::rows(&q);
            let k = rng.random_range(1..=n + 2);
            let radius = rng.random_range(0.1..3.0);
            let kn = knn(q.view(), pm.view(), k)?;
            let bq = ball_query(q.view(), pm.view(), radius, k)?;
            let strip = |nb: &crate::Neighborhood| -> Vec<Vec<usize>> {
                nb.rows.iter().map(|r| r.iter().map(|x| x.index).collect()).collect()
            };
            let ostrip = |nb: Vec<Vec<(usize, f64)>>| -> Vec<Vec<usize>> {
                nb.into_iter().map(|r| r.into_iter().map(|x| x.0).collect()).collect()
            };
            if strip(&kn) != ostrip(oracle::knn(&qr, &pr, k)) {
                mismatches += 1;
            }
            if strip(&bq) != ostrip(oracle::ball_query(&qr, &pr, radius, k)) {
                mismatches += 1;
            }
            for (qi, row) in kn.rows.iter().chain(&bq.rows).enumerate() {
                let qv = &qr[qi % qr.len()];
                for nb in row {
                    let pj = &p[nb.index];
                    let exact = (0..3).map(|a| (qv[a] - pj[a]).powi(2)).sum::<f64>();
                    dist_err = dist_err.max((exact - nb.dist2).abs());
                }
            }
            let shift = [
                rng.random_range(-8..8) as f64,
                rng.random_range(-8..8) as f64,
                rng.random_range(-8..8) as f64,
            ];
            let moved = |m: &Array2<f64>| {
                Array2::from_shape_fn(m.dim(), |(i, a)| m[[i, a]] + shift[a])
            };
            let (pt, qt) = (moved(&pm), moved(&q));
            if strip(&knn(qt.view(), pt.view(), k)?) != strip(&kn)
                || strip(&ball_query(qt.view(), pt.view(), radius, k)?) != strip(&bq)
            {
                mismatches += 1;
            }
        }
        Ok(Measure {
            instances,
            metric: mismatches as f64 + dist_err,
            passed: mismatches == 0 && dist_err <= DIST_TOL,
            detail: format!("{mismatches} index mismatches, distance error {dist_err:.1e}"),
        })
    })
}

/// Min pairwise distance of an fps subset beats the mean over random
/// subsets of the same size.
pub fn fps_spread(opts: CheckOptions, clouds: usize) -> CheckOutcome {
    run("fps_spread", 0.0, || {
        let mut rng = rng_for(opts.seed, 13);
        let min_pair = |p: &Array2<f64>, idx: &[usize]| -> f64 {
            let mut best = f64::INFINITY;
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    let d = (0..3).map(|c| (p[[idx[a], c]] - p[[idx[b], c]]).powi(2)).sum::<f64>();
                    best = best.min(d);
                }
            }
            best.sqrt()
        };
        let mut worst_margin = f64::INFINITY;
        for _ in 0..clouds {
            let n = rng.random_range(64..=256);
            let m = rng.random_range(4..=16);
            let g = random_graph(&mut rng, n, 1, 5.0);
            let chosen = fps(g.positions.view(), m)?.indices;
            let f = min_pair(&g.positions, &chosen);
            let mut all: Vec<usize> = (0..n).collect();
            let trials = 50;
            let mut mean = 0.0;
            for _ in 0..trials {
                all.shuffle(&mut rng);
                mean += min_pair(&g.positions, &all[..m]) / trials as f64;
            }
            worst_margin = worst_margin.min(f - mean);
        }
        Ok(Measure {
            instances: clouds,
            metric: worst_margin,
            passed: worst_margin >= 0.0,
            detail: "min over clouds of fps spread minus random mean".into(),
        })
    })
}

fn random_cloud(rng: &mut impl Rng, n: usize, spec: &GridSpec) -> PointCloud {
    let pad = 1.0;
    PointCloud::new(
        (0..n)
            .map(|_| {
                let mut c = |a: usize| rng.random_range(spec.range_min[a] - pad..spec.range_max[a] + pad);
                let (x, y, z) = (c(0), c(1), c(2));
                Point::new(x, y, z, rng.random_range(0.0..1.0))
            })
            .collect(),
    )
}

/// Discretization: shuffle invariance, count conservation, idempotent crop.
pub fn discretize_invariants(opts: CheckOptions, instances: usize) -> CheckOutcome {
    run("discretize_invariants", 0.0, || {
        let mut rng = rng_for(opts.seed, 14);
        let spec = GridSpec::new([0.0, -4.0, -2.0], [8.0, 4.0, 2.0], vec![0.5, 0.5, 0.5])?;
        let pillar = GridSpec::new(spec.range_min, spec.range_max, vec![0.5, 0.5])?;
        let enc = EncoderWeights::seeded(8, opts.seed);
        let mut violations = 0usize;
        for _ in 0..instances {
            let count = rng.random_range(1..400);
            let pc = random_cloud(&mut rng, count, &spec);
            let cropped = crop_range(&pc, &spec);
            if crop_range(&cropped, &spec) != cropped {
                violations += 1;
            }
            let mut shuffled = cropped.clone();
            shuffled.points.shuffle(&mut rng);
            for (grid, mode) in [(&spec, GridMode::Voxel), (&pillar, GridMode::Pillar)] {
                if cropped.is_empty() {
                    continue;
                }
                let a = discretize(&cropped, grid, mode, &enc)?;
                let b = discretize(&shuffled, grid, mode, &enc)?;
                if a != b {
                    violations += 1;
                }
                let total: usize = group_cells(&cropped, grid, mode)?.iter().map(|c| c.members.len()).sum();
                if total != cropped.len() {
                    violations += 1;
                }
            }
        }
        Ok(Measure {
            instances,
            metric: violations as f64,
            passed: violations == 0,
            detail: "shuffle, count conservation, crop idempotence".into(),
        })
    })
}

/// Instance counts used by the full suite.
#[derive(Debug, Clone, Copy)]
pub struct SuiteSizes {
    pub oracle: usize,
    pub gradient: usize,
    pub permutation: usize,
    pub normalization: usize,
    pub deformation_draws: usize,
    pub geometry: usize,
    pub fps_clouds: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            oracle: 50,
            gradient: 20,
            permutation: 100,
            normalization: 100,
            deformation_draws: 1000,
            geometry: 100,
            fps_clouds: 20,
        }
    }
}

/// Run every check.
pub fn run_suite(opts: CheckOptions, sizes: SuiteSizes) -> Vec<CheckOutcome> {
    vec![
        fsa_oracle(opts, sizes.oracle),
        fsa_gradient(opts, sizes.gradient),
        fsa_permutation(opts, sizes.permutation),
        attention_normalization(opts, sizes.normalization),
        softmax_shift(opts, 100),
        deformation_identity(opts, 100),
        deformation_bound(opts, sizes.deformation_draws),
        dsa_score_ratio(opts, 50),
        upsample_partition(opts, 100),
        block_determinism(opts, 3),
        parameter_independence(opts),
        cost_invariants(opts),
        geometry_oracles(opts, sizes.geometry),
        fps_spread(opts, sizes.fps_clouds),
        discretize_invariants(opts, 50),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_tensor_floor() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        let e = relative_error(&[2.0, 1e-9], &[2.0, 0.0]);
        assert!(e > 0.0 && e < 1e-5);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
