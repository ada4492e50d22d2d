//! Slow scalar implementations used as test oracles. Everything here works on
//! nested `Vec`s with explicit loops and shares no code with the production
//! kernels beyond the weight containers.

#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::fsa::{fsa_forward_with, ForwardOptions, FsaGrads, FsaWeights};
use crate::pcio::FeatureGraph;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn matrix(r: &Rows) -> Array2<f64> {
    let n = r.len();
    let d = r.first().map_or(0, Vec::len);
    Array2::from_shape_fn((n, d), |(i, j)| r[i][j])
}

fn matmul(a: &Rows, w: &Array2<f64>) -> Rows {
    a.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| {
                    let mut acc = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        acc += x * w[[k, j]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of the scalar attention block.
#[derive(Debug, Clone)]
pub struct RefAttention {
    pub output: Rows,
    /// `attn[h][i][j]`
    pub attn: Vec<Rows>,
}

pub fn group_norm(x: &Rows, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    let d = x.first().map_or(0, Vec::len);
    let gs = d / groups;
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; d];
            for g in 0..groups {
                let seg = &row[g * gs..(g + 1) * gs];
                let mean = seg.iter().sum::<f64>() / gs as f64;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gs as f64;
                for c in g * gs..(g + 1) * gs {
                    out[c] = gamma[c] * (row[c] - mean) / (var + eps).sqrt() + beta[c];
                }
            }
            out
        })
        .collect()
}

/// Double-loop multi-head attention block.
pub fn fsa_forward(features: &Rows, positions: &Rows, w: &FsaWeights) -> RefAttention {
    let n = features.len();
    let d = w.d();
    let dh = d / w.heads;
    let mut enc = features.clone();
    for i in 0..n {
        for c in 0..d {
            for a in 0..3 {
                enc[i][c] += positions[i][a] * w.wpos[[a, c]];
            }
        }
    }
    let q = matmul(&enc, &w.wq);
    let k = matmul(&enc, &w.wk);
    let v = matmul(&enc, &w.wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![vec![0.0; d]; n];
    let mut attn = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in cols.clone() {
                    *l += q[i][c] * k[j][c];
                }
                *l *= scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..n {
                a[i][j] = (logits[j] - mx).exp() / z;
            }
            for c in cols.clone() {
                for j in 0..n {
                    ctx[i][c] += a[i][j] * v[j][c];
                }
            }
        }
        attn.push(a);
    }
    let proj = matmul(&ctx, &w.wo);
    let upd = group_norm(&proj, w.groups, w.gamma.as_slice().unwrap(), w.beta.as_slice().unwrap(), w.eps);
    let output = (0..n)
        .map(|i| (0..d).map(|c| features[i][c] + upd[i][c]).collect())
        .collect();
    RefAttention { output, attn }
}

/// Smallest per-row, per-group variance of the pre-normalisation projection.
pub fn min_group_variance(features: &Rows, positions: &Rows, w: &FsaWeights) -> f64 {
    let n = features.len();
    let d = w.d();
    let gs = d / w.groups;
    let mut enc = features.clone();
    for i in 0..n {
        for c in 0..d {
            for a in 0..3 {
                enc[i][c] += positions[i][a] * w.wpos[[a, c]];
            }
        }
    }
    let q = matmul(&enc, &w.wq);
    let k = matmul(&enc, &w.wk);
    let v = matmul(&enc, &w.wv);
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..w.heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..n {
                let a = (logits[j] - mx).exp() / z;
                for c in h * dh..(h + 1) * dh {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    let proj = matmul(&ctx, &w.wo);
    let mut min = f64::INFINITY;
    for row in &proj {
        for g in 0..w.groups {
            let seg = &row[g * gs..(g + 1) * gs];
            let mean = seg.iter().sum::<f64>() / gs as f64;
            let var = seg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / gs as f64;
            min = min.min(var);
        }
    }
    min
}

/// Greedy max-min sampling from node 0, recomputing every min distance from
/// scratch each round. Ties go to the lowest index.
pub fn fps(points: &Rows, m: usize) -> Vec<usize> {
    let mut sel = vec![0usize];
    while sel.len() < m {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let dmin = sel
                .iter()
                .map(|&s| sq(&points[i], &points[s]))
                .fold(f64::INFINITY, f64::min);
            if dmin > best_d {
                best_d = dmin;
                best = Some(i);
            }
        }
        sel.push(best.expect("m <= n"));
    }
    sel
}

fn ranked(q: &[f64], base: &Rows) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = base.iter().enumerate().map(|(j, b)| (j, sq(q, b))).collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

/// Exhaustive k nearest, sorted by distance then index.
pub fn knn(query: &Rows, base: &Rows, k: usize) -> Vec<Vec<(usize, f64)>> {
    query
        .iter()
        .map(|q| ranked(q, base).into_iter().take(k).collect())
        .collect()
}

/// Exhaustive radius search (`d² <= r²`), nearest first, capped at `k`.
pub fn ball_query(query: &Rows, base: &Rows, radius: f64, k: usize) -> Vec<Vec<(usize, f64)>> {
    query
        .iter()
        .map(|q| {
            ranked(q, base)
                .into_iter()
                .filter(|&(_, d)| d <= radius * radius)
                .take(k)
                .collect()
        })
        .collect()
}

/// Vertex refinement for subset nodes `subset` with neighbor lists `nbhd`.
pub fn deform(
    features: &Rows,
    positions: &Rows,
    subset: &[usize],
    nbhd: &[Vec<(usize, f64)>],
    w_offset: &Array2<f64>,
    w_align: &Array1<f64>,
) -> (Rows, Vec<f64>) {
    let d = features[0].len();
    let mut refined = Vec::new();
    let mut xs = Vec::new();
    for (s, &i) in subset.iter().enumerate() {
        let row = &nbhd[s];
        let mut x = 0.0;
        if !row.is_empty() {
            let mut acc = 0.0;
            for &(j, _) in row {
                for a in 0..3 {
                    let mut off = 0.0;
                    for c in 0..d {
                        off += (features[i][c] - features[j][c]) * w_offset[[c, a]];
                    }
                    acc += off * (positions[i][a] - positions[j][a]);
                }
            }
            x = if acc > 0.0 { acc } else { 0.0 } / row.len() as f64;
        }
        xs.push(x);
        refined.push((0..3).map(|a| positions[i][a] + (w_align[a] * x).tanh()).collect());
    }
    (refined, xs)
}

/// Max-pool of `x W_out` over a radius ball (1-NN when empty).
pub fn aggregate(
    features: &Rows,
    positions: &Rows,
    refined: &Rows,
    w_out: &Array2<f64>,
    radius: f64,
    k: usize,
) -> Rows {
    let mapped = matmul(features, w_out);
    let balls = ball_query(refined, positions, radius, k);
    let nearest = knn(refined, positions, 1);
    balls
        .iter()
        .zip(&nearest)
        .map(|(ball, nn)| {
            let members = if ball.is_empty() { nn } else { ball };
            (0..w_out.ncols())
                .map(|c| {
                    members
                        .iter()
                        .map(|&(j, _)| mapped[j][c])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect()
}

/// Element-wise max of `x H` over each neighbor list.
pub fn maxpool(features: &Rows, nbhd: &[Vec<(usize, f64)>], h: &Array2<f64>) -> Rows {
    let mapped = matmul(features, h);
    nbhd.iter()
        .map(|row| {
            (0..h.ncols())
                .map(|c| row.iter().map(|&(j, _)| mapped[j][c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect()
}

/// Normalised inverse-distance weights, `1 / (d² + eps)`.
pub fn idw_weights(
    subset_pos: &Rows,
    all_pos: &Rows,
    radius: f64,
    k: usize,
    eps: f64,
) -> Vec<Vec<(usize, f64)>> {
    let balls = ball_query(all_pos, subset_pos, radius, k);
    let nearest = knn(all_pos, subset_pos, 1);
    balls
        .into_iter()
        .zip(nearest)
        .map(|(ball, nn)| {
            let members = if ball.is_empty() { nn } else { ball };
            let raw: Vec<(usize, f64)> = members.iter().map(|&(j, d)| (j, 1.0 / (d + eps))).collect();
            let z: f64 = raw.iter().map(|p| p.1).sum();
            raw.into_iter().map(|(j, w)| (j, w / z)).collect()
        })
        .collect()
}

/// Cross-attention from all nodes to subset nodes; returns `(out, map)`.
pub fn upsample_attention(
    subset_out: &Rows,
    all_feats: &Rows,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
) -> (Rows, Rows) {
    let q = matmul(all_feats, wq);
    let k = matmul(subset_out, wk);
    let v = matmul(subset_out, wv);
    let scale = 1.0 / (wk.ncols() as f64).sqrt();
    let mut out = Vec::new();
    let mut map = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
        out.push(
            (0..wv.ncols())
                .map(|c| a.iter().zip(&v).map(|(p, vj)| p * vj[c]).sum())
                .collect(),
        );
        map.push(a);
    }
    (out, map)
}

type Slot = for<'a> fn(&'a mut FeatureGraph, &'a mut FsaWeights) -> &'a mut [f64];

fn fd_tensor(
    graph: &FeatureGraph,
    w: &FsaWeights,
    upstream: &Array2<f64>,
    h: f64,
    slot: Slot,
) -> Result<Vec<f64>> {
    let eval = |g: &FeatureGraph, w: &FsaWeights| -> Result<Array2<f64>> {
        Ok(fsa_forward_with(g, w, ForwardOptions { keep_attention: false })?.output)
    };
    let mut g = graph.clone();
    let mut ww = w.clone();
    let len = slot(&mut g, &mut ww).len();
    let mut grads = Vec::with_capacity(len);
    for k in 0..len {
        let x0 = slot(&mut g, &mut ww)[k];
        slot(&mut g, &mut ww)[k] = x0 + h;
        let up = eval(&g, &ww)?;
        slot(&mut g, &mut ww)[k] = x0 - h;
        let down = eval(&g, &ww)?;
        slot(&mut g, &mut ww)[k] = x0;
        grads.push(((&up - &down) * upstream).sum() / (2.0 * h));
    }
    Ok(grads)
}

fn slice2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Central finite-difference gradients of `sum(upstream * output)` for every
/// input and weight tensor. Outputs are differenced elementwise before the
/// contraction.
pub fn finite_difference_grads(
    graph: &FeatureGraph,
    w: &FsaWeights,
    upstream: &Array2<f64>,
    h: f64,
) -> Result<FsaGrads> {
    let shape2 = |a: &Array2<f64>, v: Vec<f64>| Array2::from_shape_vec(a.dim(), v).expect("shape");
    let fd = |slot: Slot| fd_tensor(graph, w, upstream, h, slot);
    Ok(FsaGrads {
        features: shape2(&graph.features, fd(|g, _| slice2(&mut g.features))?),
        positions: shape2(&graph.positions, fd(|g, _| slice2(&mut g.positions))?),
        wq: shape2(&w.wq, fd(|_, w| slice2(&mut w.wq))?),
        wk: shape2(&w.wk, fd(|_, w| slice2(&mut w.wk))?),
        wv: shape2(&w.wv, fd(|_, w| slice2(&mut w.wv))?),
        wo: shape2(&w.wo, fd(|_, w| slice2(&mut w.wo))?),
        wpos: shape2(&w.wpos, fd(|_, w| slice2(&mut w.wpos))?),
        gamma: Array1::from(fd(|_, w| slice1(&mut w.gamma))?),
        beta: Array1::from(fd(|_, w| slice1(&mut w.beta))?),
    })
}

/// Named gradient tensors, flattened, in a fixed order.
pub fn grad_tensors(g: &FsaGrads) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("features", g.features.iter().copied().collect()),
        ("positions", g.positions.iter().copied().collect()),
        ("wq", g.wq.iter().copied().collect()),
        ("wk", g.wk.iter().copied().collect()),
        ("wv", g.wv.iter().copied().collect()),
        ("wo", g.wo.iter().copied().collect()),
        ("wpos", g.wpos.iter().copied().collect()),
        ("gamma", g.gamma.to_vec()),
        ("beta", g.beta.to_vec()),
    ]
}
