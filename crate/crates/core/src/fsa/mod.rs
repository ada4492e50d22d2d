//! Full self-attention over every node of a [`FeatureGraph`].
//!
//! Composition, per block:
//!
//! ```text
//! X'  = X + P Wpos                          (absolute position encoding)
//! Q,K,V = X' Wq, X' Wk, X' Wv               (split into heads along channels)
//! A_h = softmax(Q_h K_h^T / sqrt(d_h))      (row softmax, max-subtracted)
//! C   = [A_1 V_1 | ... | A_H V_H]
//! Y   = X + GroupNorm(C Wo)
//! ```
//!
//! Row-vector convention throughout: a linear map is `x W` with `W` stored
//! `in x out`.

mod backward;

pub use backward::{fsa_backward, FsaGrads, GradTape};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Neighborhood;
use crate::init;
use crate::pcio::FeatureGraph;

/// Rows of the score matrix materialised at once per head.
const ROW_BLOCK: usize = 256;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Learned tensors of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct FsaWeights {
    pub heads: usize,
    /// Group-norm groups; equal to `heads` unless set explicitly.
    pub groups: usize,
    pub eps: f64,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    /// 3 x d
    pub wpos: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl FsaWeights {
    /// Glorot-uniform projections, small position map, unit norm affine.
    pub fn seeded(d: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::arg(format!(
                "head count {heads} must divide model dim {d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = init::glorot(d, d);
        let w = Self {
            heads,
            groups: heads,
            eps: DEFAULT_EPS,
            wq: init::uniform_matrix(&mut rng, d, d, g),
            wk: init::uniform_matrix(&mut rng, d, d, g),
            wv: init::uniform_matrix(&mut rng, d, d, g),
            wo: init::uniform_matrix(&mut rng, d, d, g),
            wpos: init::uniform_matrix(&mut rng, 3, d, 0.1),
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        };
        Ok(w)
    }

    /// Seeded weights with randomised norm affine as well, used by gradient checks.
    pub fn seeded_full(d: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut w = Self::seeded(d, heads, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_fa11);
        w.gamma = init::uniform_vector(&mut rng, d, 0.5).mapv(|v| v + 1.0);
        w.beta = init::uniform_vector(&mut rng, d, 0.5);
        Ok(w)
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::arg(format!(
                "head count {} must divide model dim {d}",
                self.heads
            )));
        }
        if self.groups == 0 || !d.is_multiple_of(self.groups) {
            return Err(Error::arg(format!(
                "group count {} must divide model dim {d}",
                self.groups
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::arg("group-norm eps must be positive"));
        }
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if m.dim() != (d, d) {
                return Err(Error::Format(format!("{name} must be {d}x{d}")));
            }
        }
        if self.wpos.dim() != (3, d) {
            return Err(Error::Format(format!("wpos must be 3x{d}")));
        }
        if self.gamma.len() != d || self.beta.len() != d {
            return Err(Error::Format(format!("norm affine must have length {d}")));
        }
        let finite = self
            .named_tensors()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::arg("non-finite weight"));
        }
        Ok(())
    }

    /// Learned scalars: four d x d projections, 3 x d position map, 2d affine.
    /// Depends on d only, never on the node count.
    pub fn param_count(&self) -> usize {
        let d = self.d();
        4 * d * d + 3 * d + 2 * d
    }

    /// Serialized payload size in bytes (64-bit reals).
    pub fn byte_size(&self) -> usize {
        self.param_count() * std::mem::size_of::<f64>()
    }

    /// `(name, shape, row-major data)` in serialization order.
    pub fn named_tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mat = |m: &Array2<f64>| (vec![m.nrows(), m.ncols()], m.iter().copied().collect());
        let vec = |v: &Array1<f64>| (vec![v.len()], v.to_vec());
        let mut out = Vec::new();
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("wpos", &self.wpos),
        ] {
            let (shape, data) = mat(m);
            out.push((name, shape, data));
        }
        for (name, v) in [("gamma", &self.gamma), ("beta", &self.beta)] {
            let (shape, data) = vec(v);
            out.push((name, shape, data));
        }
        out
    }
}

/// Result of one attention block over n nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// n x d, `input + update`
    pub output: Array2<f64>,
    /// One n x n map per head; empty when the forward pass did not keep them.
    pub attn: Vec<Array2<f64>>,
    /// n x d concatenated per-head context vectors (before the output map).
    pub context: Array2<f64>,
    /// n x d group-normalised projected context, the residual increment.
    pub update: Array2<f64>,
    /// Multiply-accumulates spent on query-key scores (`n^2 d`).
    pub score_macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub keep_attention: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            keep_attention: true,
        }
    }
}

/// `features + positions Wpos`.
pub fn encode_positions(graph: &FeatureGraph, wpos: ArrayView2<f64>) -> Result<Array2<f64>> {
    if wpos.nrows() != 3 {
        return Err(Error::DimMismatch {
            context: "position map rows",
            expected: 3,
            actual: wpos.nrows(),
        });
    }
    if wpos.ncols() != graph.d() {
        return Err(Error::DimMismatch {
            context: "position map width",
            expected: graph.d(),
            actual: wpos.ncols(),
        });
    }
    Ok(&graph.features + &graph.positions.dot(&wpos))
}

/// Per-row, per-contiguous-channel-group standardisation with affine.
pub fn group_norm(
    x: ArrayView2<f64>,
    groups: usize,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    Ok(group_norm_parts(x, groups, gamma, beta, eps)?.0)
}

/// Returns `(y, xhat, rstd)` where `rstd` is `n x groups`.
pub(crate) fn group_norm_parts(
    x: ArrayView2<f64>,
    groups: usize,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let (n, d) = x.dim();
    if groups == 0 || d % groups != 0 {
        return Err(Error::arg(format!(
            "group count {groups} must divide channel count {d}"
        )));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::DimMismatch {
            context: "group-norm affine",
            expected: d,
            actual: gamma.len().min(beta.len()),
        });
    }
    let gs = d / groups;
    let mut y = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array2::zeros((n, groups));
    for i in 0..n {
        for g in 0..groups {
            let lo = g * gs;
            let seg = x.slice(s![i, lo..lo + gs]);
            let mean = seg.sum() / gs as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[[i, g]] = r;
            for c in lo..lo + gs {
                let h = (x[[i, c]] - mean) * r;
                xhat[[i, c]] = h;
                y[[i, c]] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok((y, xhat, rstd))
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Scaled dot-product attention of `q` against `k`/`v` for one head, in
/// row blocks. Returns the `n_q x d_v` context and, if asked, the full map.
pub(crate) fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    scale: f64,
    keep: bool,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let nq = q.nrows();
    let blocks: Vec<(usize, usize)> = (0..nq)
        .step_by(ROW_BLOCK)
        .map(|r0| (r0, (r0 + ROW_BLOCK).min(nq)))
        .collect();
    let kt = k.t();
    let parts: Vec<(Array2<f64>, Option<Array2<f64>>)> = blocks
        .par_iter()
        .map(|&(r0, r1)| {
            let mut sc = q.slice(s![r0..r1, ..]).dot(&kt);
            sc.mapv_inplace(|x| x * scale);
            softmax_rows(&mut sc);
            let ctx = sc.dot(&v);
            (ctx, keep.then_some(sc))
        })
        .collect();
    let mut ctx = Array2::zeros((nq, v.ncols()));
    let mut map = keep.then(|| Array2::zeros((nq, k.nrows())));
    for (&(r0, r1), (c, a)) in blocks.iter().zip(parts) {
        ctx.slice_mut(s![r0..r1, ..]).assign(&c);
        if let (Some(m), Some(a)) = (map.as_mut(), a) {
            m.slice_mut(s![r0..r1, ..]).assign(&a);
        }
    }
    (ctx, map)
}

pub(crate) fn check_graph(graph: &FeatureGraph, d: usize) -> Result<()> {
    if graph.d() != d {
        return Err(Error::DimMismatch {
            context: "graph feature dim",
            expected: d,
            actual: graph.d(),
        });
    }
    if graph.positions.ncols() != 3 || graph.positions.nrows() != graph.n() {
        return Err(Error::Format("graph positions must be n x 3".into()));
    }
    if graph.n() == 0 {
        return Err(Error::arg("attention over an empty graph"));
    }
    let bad = graph
        .features
        .outer_iter()
        .zip(graph.positions.outer_iter())
        .position(|(f, p)| f.iter().chain(p.iter()).any(|v| !v.is_finite()));
    if let Some(index) = bad {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

pub(crate) struct ForwardParts {
    pub encoded: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub xhat: Array2<f64>,
    pub rstd: Array2<f64>,
}

pub(crate) fn forward_impl(
    graph: &FeatureGraph,
    w: &FsaWeights,
    opts: ForwardOptions,
) -> Result<(AttentionOutput, ForwardParts)> {
    w.validate()?;
    let d = w.d();
    check_graph(graph, d)?;
    let n = graph.n();
    let dh = w.head_dim();
    let encoded = encode_positions(graph, w.wpos.view())?;
    let q = encoded.dot(&w.wq);
    let k = encoded.dot(&w.wk);
    let v = encoded.dot(&w.wv);
    let scale = 1.0 / (dh as f64).sqrt();

    let heads: Vec<(Array2<f64>, Option<Array2<f64>>)> = (0..w.heads)
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            attend(
                q.slice(cols),
                k.slice(cols),
                v.slice(cols),
                scale,
                opts.keep_attention,
            )
        })
        .collect();
    let mut context = Array2::zeros((n, d));
    let mut attn = Vec::new();
    for (h, (ctx, map)) in heads.into_iter().enumerate() {
        context.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ctx);
        if let Some(m) = map {
            attn.push(m);
        }
    }
    let proj = context.dot(&w.wo);
    let (update, xhat, rstd) = group_norm_parts(proj.view(), w.groups, &w.gamma, &w.beta, w.eps)?;
    let output = &graph.features + &update;
    let out = AttentionOutput {
        output,
        attn,
        context,
        update,
        score_macs: (n as u64) * (n as u64) * (d as u64),
    };
    Ok((
        out,
        ForwardParts {
            encoded,
            q,
            k,
            v,
            xhat,
            rstd,
        },
    ))
}

/// Full self-attention block, attention maps retained.
pub fn fsa_forward(graph: &FeatureGraph, w: &FsaWeights) -> Result<AttentionOutput> {
    fsa_forward_with(graph, w, ForwardOptions::default())
}

pub fn fsa_forward_with(
    graph: &FeatureGraph,
    w: &FsaWeights,
    opts: ForwardOptions,
) -> Result<AttentionOutput> {
    Ok(forward_impl(graph, w, opts)?.0)
}

/// Forward pass that also records a [`GradTape`] for [`fsa_backward`].
pub fn fsa_forward_taped(
    graph: &FeatureGraph,
    w: &FsaWeights,
) -> Result<(AttentionOutput, GradTape)> {
    let (out, parts) = forward_impl(graph, w, ForwardOptions::default())?;
    let tape = GradTape::record(graph, w, &out, parts);
    Ok((out, tape))
}

/// Fixed-weight local baseline: per node, elementwise max over its
/// neighbors of `x_l H`.
pub fn local_maxpool_baseline(
    graph: &FeatureGraph,
    nbhd: &Neighborhood,
    h: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let d = graph.d();
    if h.nrows() != d {
        return Err(Error::DimMismatch {
            context: "baseline map rows",
            expected: d,
            actual: h.nrows(),
        });
    }
    if nbhd.len() != graph.n() {
        return Err(Error::DimMismatch {
            context: "neighborhood rows",
            expected: graph.n(),
            actual: nbhd.len(),
        });
    }
    let mapped = graph.features.dot(&h);
    let mut out = Array2::from_elem((graph.n(), h.ncols()), f64::NEG_INFINITY);
    for (i, row) in nbhd.rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::EmptyNeighborhood { node: i });
        }
        let mut dst = out.row_mut(i);
        for nb in row {
            for (o, m) in dst.iter_mut().zip(mapped.row(nb.index)) {
                if *m > *o {
                    *o = *m;
                }
            }
        }
    }
    Ok(out)
}

/// Stack `layers` blocks, feeding each output back in with unchanged positions.
pub fn fsa_stack(
    graph: &FeatureGraph,
    layers: &[FsaWeights],
    opts: ForwardOptions,
) -> Result<Vec<AttentionOutput>> {
    let mut outs: Vec<AttentionOutput> = Vec::with_capacity(layers.len());
    let mut current = graph.clone();
    for w in layers {
        let out = fsa_forward_with(&current, w, opts)?;
        current.features = out.output.clone();
        outs.push(out);
    }
    Ok(outs)
}

/// Row sums of every head map; used by normalisation checks.
pub fn attention_row_sums(out: &AttentionOutput) -> Vec<f64> {
    out.attn
        .iter()
        .flat_map(|m| m.sum_axis(Axis(1)).to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn graph(features: Array2<f64>, positions: Array2<f64>) -> FeatureGraph {
        FeatureGraph::new(features, positions).unwrap()
    }

    #[test]
    fn zero_position_map_is_identity() {
        let g = graph(array![[1., 2.], [3., 4.]], array![[1., 2., 3.], [4., 5., 6.]]);
        let out = encode_positions(&g, Array2::zeros((3, 2)).view()).unwrap();
        assert_eq!(out, g.features);
    }

    #[test]
    fn origin_node_unchanged() {
        let g = graph(array![[1., -2.]], array![[0., 0., 0.]]);
        let wpos = array![[5., 6.], [7., 8.], [9., 10.]];
        assert_eq!(encode_positions(&g, wpos.view()).unwrap(), g.features);
    }

    #[test]
    fn hand_computed_position_encoding() {
        let g = graph(array![[1., 0.], [0., 1.]], array![[1., 0., 2.], [0., -1., 1.]]);
        let wpos = array![[0.5, 1.0], [2.0, -1.0], [0.25, 0.0]];
        let out = encode_positions(&g, wpos.view()).unwrap();
        // row0: [1 + 0.5 + 0.5, 0 + 1 + 0] ; row1: [0 - 2 + 0.25, 1 + 1 + 0]
        assert_eq!(out, array![[2.0, 1.0], [-1.75, 2.0]]);
        assert!(encode_positions(&g, Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn group_norm_edge_rows() {
        let gamma = Array1::ones(4);
        let beta = array![0.5, -0.5, 1.0, 2.0];
        let zeros = group_norm(Array2::zeros((1, 4)).view(), 2, &gamma, &Array1::zeros(4), 1e-5)
            .unwrap();
        assert!(zeros.iter().all(|v| *v == 0.0));
        let c = group_norm(Array2::from_elem((1, 4), 3.7).view(), 2, &gamma, &beta, 1e-5).unwrap();
        assert_eq!(c.row(0).to_vec(), beta.to_vec());
        assert!(group_norm(Array2::zeros((1, 4)).view(), 3, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn singleton_attention_is_one() {
        let w = FsaWeights::seeded(8, 4, 3).unwrap();
        let g = graph(Array2::from_elem((1, 8), 0.3), array![[1., 2., 3.]]);
        let out = fsa_forward(&g, &w).unwrap();
        assert_eq!(out.attn.len(), 4);
        assert!(out.attn.iter().all(|m| m[[0, 0]] == 1.0));
    }

    #[test]
    fn identical_nodes_split_evenly() {
        let w = FsaWeights::seeded(4, 2, 9).unwrap();
        let row = array![0.1, -0.4, 0.9, 0.2];
        let feats = ndarray::stack![Axis(0), row, row];
        let g = graph(feats, array![[1., 1., 1.], [1., 1., 1.]]);
        let out = fsa_forward(&g, &w).unwrap();
        assert!(out.attn.iter().flat_map(|m| m.iter()).all(|v| *v == 0.5));
        assert_eq!(out.output.row(0), out.output.row(1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = FsaWeights::seeded(4, 2, 1).unwrap();
        let g = graph(Array2::zeros((2, 6)), Array2::zeros((2, 3)));
        assert!(matches!(fsa_forward(&g, &w), Err(Error::DimMismatch { .. })));
        let mut bad = graph(Array2::zeros((2, 4)), Array2::zeros((2, 3)));
        bad.features[[1, 2]] = f64::NAN;
        assert!(matches!(fsa_forward(&bad, &w), Err(Error::NonFinite { index: 1 })));
        assert!(FsaWeights::seeded(6, 4, 0).is_err());
    }

    #[test]
    fn unkept_maps_leave_output_unchanged() {
        let w = FsaWeights::seeded(8, 2, 5).unwrap();
        let g = graph(
            Array2::from_shape_fn((300, 8), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0),
            Array2::from_shape_fn((300, 3), |(i, j)| ((i * 5 + j) % 13) as f64),
        );
        let kept = fsa_forward(&g, &w).unwrap();
        let lean = fsa_forward_with(&g, &w, ForwardOptions { keep_attention: false }).unwrap();
        assert!(lean.attn.is_empty());
        assert_eq!(kept.output, lean.output);
        for s in attention_row_sums(&kept) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_self_and_pair() {
        use crate::geom::{Neighbor, Neighborhood};
        let g = graph(array![[1., 5.], [3., 2.]], Array2::zeros((2, 3)));
        let selfish = Neighborhood {
            rows: vec![
                vec![Neighbor { index: 0, dist2: 0. }],
                vec![Neighbor { index: 1, dist2: 0. }],
            ],
        };
        let h = array![[2., 0.], [1., 1.]];
        let out = local_maxpool_baseline(&g, &selfish, h.view()).unwrap();
        assert_eq!(out, g.features.dot(&h));
        let both = vec![
            Neighbor { index: 0, dist2: 0. },
            Neighbor { index: 1, dist2: 1. },
        ];
        let mutual = Neighborhood {
            rows: vec![both.clone(), both],
        };
        let eye = Array2::eye(2);
        let out = local_maxpool_baseline(&g, &mutual, eye.view()).unwrap();
        assert_eq!(out, array![[3., 5.], [3., 5.]]);
        let empty = Neighborhood {
            rows: vec![vec![], vec![]],
        };
        assert!(matches!(
            local_maxpool_baseline(&g, &empty, eye.view()),
            Err(Error::EmptyNeighborhood { node: 0 })
        ));
    }
}
