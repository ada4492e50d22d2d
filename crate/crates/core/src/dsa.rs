//! Deformable self-attention: attend over a farthest-point subset whose
//! positions are nudged by a learned, bounded offset, then spread the
//! attended context back to every node.
//!
//! Stages, for subset node `i` with neighbors `N(i)` (`k = |N(i)|`):
//!
//! ```text
//! x*_i  = ReLU( sum_j ((x_i - x_j) W_offset) . (v_i - v_j) ) / k      scalar
//! v'_i  = v_i + tanh(W_align x*_i)                                   per axis
//! x'_i  = max_{j in N'(i)} x_j W_out          N'(i) gathered around v'_i
//! ```
//!
//! The subset `(x', v')` goes through one attention block; its residual
//! increment is up-sampled to all nodes and added to the input features.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsa::{attend, fsa_forward_with, AttentionOutput, ForwardOptions, FsaWeights};
use crate::geom::{self, ball_query, fps, knn, IndexSet, Neighborhood};
use crate::init;
use crate::pcio::FeatureGraph;

/// Added to squared distances before inverting for IDW weights.
pub const IDW_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Idw,
    Attention,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idw" => Ok(UpsampleMode::Idw),
            "attention" => Ok(UpsampleMode::Attention),
            other => Err(Error::arg(format!("unknown upsample mode `{other}`"))),
        }
    }
}

/// Single-head cross-attention weights: queries from the full node set,
/// keys and values from the subset.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Upsampler {
    Idw {
        radius: f64,
        max_samples: usize,
        /// d x d refinement applied after interpolation.
        mlp: Array2<f64>,
    },
    Attention(CrossAttention),
}

impl Upsampler {
    pub fn param_count(&self) -> usize {
        match self {
            Upsampler::Idw { mlp, .. } => mlp.len(),
            Upsampler::Attention(c) => c.wq.len() + c.wk.len() + c.wv.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsaWeights {
    pub fsa: FsaWeights,
    /// d x 3
    pub w_offset: Array2<f64>,
    /// 3-vector: scalar x* -> per-axis offset.
    pub w_align: Array1<f64>,
    /// d x d
    pub w_out: Array2<f64>,
    pub upsampler: Upsampler,
}

impl DsaWeights {
    pub fn seeded(
        d: usize,
        heads: usize,
        mode: UpsampleMode,
        interp_radius: f64,
        interp_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let fsa = FsaWeights::seeded(d, heads, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xd5a));
        let g = init::glorot(d, d);
        let w_offset = init::uniform_matrix(&mut rng, d, 3, init::glorot(d, 3));
        let w_align = init::uniform_vector(&mut rng, 3, 1.0);
        let w_out = init::uniform_matrix(&mut rng, d, d, g);
        let upsampler = match mode {
            UpsampleMode::Idw => Upsampler::Idw {
                radius: interp_radius,
                max_samples: interp_samples,
                mlp: init::uniform_matrix(&mut rng, d, d, g),
            },
            UpsampleMode::Attention => Upsampler::Attention(CrossAttention {
                wq: init::uniform_matrix(&mut rng, d, d, g),
                wk: init::uniform_matrix(&mut rng, d, d, g),
                wv: init::uniform_matrix(&mut rng, d, d, g),
            }),
        };
        let w = Self {
            fsa,
            w_offset,
            w_align,
            w_out,
            upsampler,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d(&self) -> usize {
        self.fsa.d()
    }

    pub fn validate(&self) -> Result<()> {
        self.fsa.validate()?;
        let d = self.d();
        if self.w_offset.dim() != (d, 3) {
            return Err(Error::Format(format!("w_offset must be {d}x3")));
        }
        if self.w_align.len() != 3 {
            return Err(Error::Format("w_align must have 3 entries".into()));
        }
        if self.w_out.dim() != (d, d) {
            return Err(Error::Format(format!("w_out must be {d}x{d}")));
        }
        match &self.upsampler {
            Upsampler::Idw {
                radius,
                max_samples,
                mlp,
            } => {
                if !(radius.is_finite() && *radius > 0.0) || *max_samples == 0 {
                    return Err(Error::arg("idw radius must be positive and max_samples >= 1"));
                }
                if mlp.dim() != (d, d) {
                    return Err(Error::Format(format!("idw mlp must be {d}x{d}")));
                }
            }
            Upsampler::Attention(c) => {
                if [&c.wq, &c.wk, &c.wv].iter().any(|m| m.dim() != (d, d)) {
                    return Err(Error::Format(format!("cross-attention maps must be {d}x{d}")));
                }
            }
        }
        let finite = self
            .w_offset
            .iter()
            .chain(self.w_align.iter())
            .chain(self.w_out.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::arg("non-finite weight"));
        }
        Ok(())
    }

    /// Attention block plus `3d + 3 + d^2` deformation/pooling scalars plus
    /// the up-sampler.
    pub fn param_count(&self) -> usize {
        self.fsa.param_count()
            + self.w_offset.len()
            + self.w_align.len()
            + self.w_out.len()
            + self.upsampler.param_count()
    }
}

/// Subset sampling and neighborhood settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsaConfig {
    /// Subset size.
    pub keypoints: usize,
    pub deform_radius: f64,
    pub deform_k: usize,
    pub pool_radius: f64,
    pub pool_k: usize,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            keypoints: 2048,
            deform_radius: 3.0,
            deform_k: 16,
            pool_radius: 2.0,
            pool_k: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformedSubset {
    pub indices: IndexSet,
    /// m x 3
    pub refined: Array2<f64>,
    /// m x d
    pub aggregated: Array2<f64>,
    pub x_star: Array1<f64>,
    /// Subset nodes whose deformation ball was empty.
    pub empty_deform: usize,
    /// Subset nodes that fell back to their nearest node for pooling.
    pub pool_fallbacks: usize,
}

impl DeformedSubset {
    /// `v' - v` per subset node, m x 3.
    pub fn displacements(&self, graph: &FeatureGraph) -> Array2<f64> {
        let sampled = graph.positions.select(ndarray::Axis(0), &self.indices.indices);
        &self.refined - &sampled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsaOutput {
    /// n x d
    pub output: Array2<f64>,
    pub subset: DeformedSubset,
    /// Attention over the m-subset (maps are m x m).
    pub attention: AttentionOutput,
    /// n x d up-sampled context added to the input.
    pub upsampled: Array2<f64>,
    /// n x m cross-attention map when the attention up-sampler kept it.
    pub upsample_map: Option<Array2<f64>>,
}

impl DsaOutput {
    pub fn score_macs(&self) -> u64 {
        self.attention.score_macs
    }
}

/// Vertex refinement. `nbhd` row `s` lists graph neighbors of subset node
/// `subset.indices[s]`. Nodes with no neighbors keep their position and get
/// `x* = 0`. Returns `(v', x*)`.
pub fn deform_vertices(
    graph: &FeatureGraph,
    subset: &IndexSet,
    nbhd: &Neighborhood,
    w_offset: ArrayView2<f64>,
    w_align: ArrayView1<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = graph.d();
    if w_offset.dim() != (d, 3) {
        return Err(Error::DimMismatch {
            context: "w_offset rows",
            expected: d,
            actual: w_offset.nrows(),
        });
    }
    if w_align.len() != 3 {
        return Err(Error::DimMismatch {
            context: "w_align length",
            expected: 3,
            actual: w_align.len(),
        });
    }
    if nbhd.len() != subset.len() {
        return Err(Error::DimMismatch {
            context: "deformation neighborhood rows",
            expected: subset.len(),
            actual: nbhd.len(),
        });
    }
    let m = subset.len();
    let pos = graph.positions.view();
    let mut refined = Array2::zeros((m, 3));
    let mut x_star = Array1::zeros(m);
    let mut diff = vec![0f64; d];
    for (s, &i) in subset.indices.iter().enumerate() {
        let vi = geom::point(&pos, i);
        let row = nbhd.row(s);
        let mut xs = 0.0;
        if !row.is_empty() {
            let mut acc = 0.0;
            for nb in row {
                let j = nb.index;
                for (c, dv) in diff.iter_mut().enumerate() {
                    *dv = graph.features[[i, c]] - graph.features[[j, c]];
                }
                let vj = geom::point(&pos, j);
                for a in 0..3 {
                    let mut off = 0.0;
                    for (c, dv) in diff.iter().enumerate() {
                        off += dv * w_offset[[c, a]];
                    }
                    acc += off * (vi[a] - vj[a]);
                }
            }
            xs = acc.max(0.0) / row.len() as f64;
        }
        x_star[s] = xs;
        for a in 0..3 {
            refined[[s, a]] = shift_within_unit(vi[a], (w_align[a] * xs).tanh());
        }
    }
    Ok((refined, x_star))
}

/// `v + t` for `|t| <= 1`, stepped toward `v` until the rounded
/// displacement is strictly inside (-1, 1).
fn shift_within_unit(v: f64, t: f64) -> f64 {
    let mut r = v + t;
    while (r - v).abs() >= 1.0 {
        r = if r > v { r.next_down() } else { r.next_up() };
    }
    r
}

/// Feature pooling around refined positions. Each subset node takes the
/// elementwise max of `x_j W_out` over graph nodes within `radius` (at most
/// `k`, nearest first); an empty ball falls back to the single nearest node.
/// Returns the pooled features and the number of fallbacks.
pub fn aggregate_features(
    graph: &FeatureGraph,
    refined: ArrayView2<f64>,
    w_out: ArrayView2<f64>,
    radius: f64,
    k: usize,
) -> Result<(Array2<f64>, usize)> {
    let d = graph.d();
    if w_out.nrows() != d {
        return Err(Error::DimMismatch {
            context: "w_out rows",
            expected: d,
            actual: w_out.nrows(),
        });
    }
    if graph.n() == 0 {
        return Err(Error::arg("feature pooling over an empty graph"));
    }
    let mut nbhd = ball_query(refined, graph.positions.view(), radius, k)?;
    let empty: Vec<usize> = (0..nbhd.len()).filter(|&s| nbhd.row(s).is_empty()).collect();
    if !empty.is_empty() {
        let q = refined.select(ndarray::Axis(0), &empty);
        let nearest = knn(q.view(), graph.positions.view(), 1)?;
        for (s, row) in empty.iter().zip(nearest.rows) {
            nbhd.rows[*s] = row;
        }
        log::debug!("feature pooling: {} subset nodes fell back to 1-NN", empty.len());
    }
    let mapped = graph.features.dot(&w_out);
    let mut out = Array2::from_elem((refined.nrows(), w_out.ncols()), f64::NEG_INFINITY);
    for (s, row) in nbhd.rows.iter().enumerate() {
        let mut dst = out.row_mut(s);
        for nb in row {
            for (o, v) in dst.iter_mut().zip(mapped.row(nb.index)) {
                if *v > *o {
                    *o = *v;
                }
            }
        }
    }
    Ok((out, empty.len()))
}

/// Normalised inverse-distance weights per target: up to `max_samples`
/// subset nodes within `radius`, nearest first, falling back to the single
/// nearest subset node when the ball is empty.
pub fn idw_weights(
    subset_pos: ArrayView2<f64>,
    all_pos: ArrayView2<f64>,
    radius: f64,
    max_samples: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if subset_pos.nrows() == 0 {
        return Err(Error::arg("up-sampling from an empty subset"));
    }
    let mut nbhd = ball_query(all_pos, subset_pos, radius, max_samples)?;
    let empty: Vec<usize> = (0..nbhd.len()).filter(|&t| nbhd.row(t).is_empty()).collect();
    if !empty.is_empty() {
        let q = all_pos.select(ndarray::Axis(0), &empty);
        let nearest = knn(q.view(), subset_pos, 1)?;
        for (t, row) in empty.iter().zip(nearest.rows) {
            nbhd.rows[*t] = row;
        }
        log::debug!("idw: {} targets fell back to 1-NN", empty.len());
    }
    Ok(nbhd
        .rows
        .into_iter()
        .map(|row| {
            let raw: Vec<(usize, f64)> = row
                .iter()
                .map(|nb| (nb.index, 1.0 / (nb.dist2 + IDW_EPS)))
                .collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter().map(|(j, w)| (j, w / total)).collect()
        })
        .collect())
}

/// Inverse-distance feature propagation followed by the `d x d` refinement.
pub fn upsample_idw(
    subset_out: ArrayView2<f64>,
    subset_pos: ArrayView2<f64>,
    all_pos: ArrayView2<f64>,
    radius: f64,
    max_samples: usize,
    mlp: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (m, d) = subset_out.dim();
    if subset_pos.nrows() != m {
        return Err(Error::DimMismatch {
            context: "subset positions",
            expected: m,
            actual: subset_pos.nrows(),
        });
    }
    if mlp.nrows() != d {
        return Err(Error::DimMismatch {
            context: "idw refinement rows",
            expected: d,
            actual: mlp.nrows(),
        });
    }
    let weights = idw_weights(subset_pos, all_pos, radius, max_samples)?;
    let mut interp = Array2::zeros((all_pos.nrows(), d));
    for (t, row) in weights.iter().enumerate() {
        let mut dst = interp.row_mut(t);
        for &(j, w) in row {
            dst.scaled_add(w, &subset_out.row(j));
        }
    }
    Ok(interp.dot(&mlp))
}

/// Cross-attention up-sampling; returns the n x d result and the n x m map.
pub fn upsample_attention(
    subset_out: ArrayView2<f64>,
    all_feats: ArrayView2<f64>,
    weights: &CrossAttention,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (out, map) = upsample_attention_impl(subset_out, all_feats, weights, true)?;
    Ok((out, map.expect("map kept")))
}

fn upsample_attention_impl(
    subset_out: ArrayView2<f64>,
    all_feats: ArrayView2<f64>,
    w: &CrossAttention,
    keep: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let d = all_feats.ncols();
    if subset_out.ncols() != d {
        return Err(Error::DimMismatch {
            context: "subset feature dim",
            expected: d,
            actual: subset_out.ncols(),
        });
    }
    if [&w.wq, &w.wk, &w.wv].iter().any(|m| m.nrows() != d) {
        return Err(Error::DimMismatch {
            context: "cross-attention map rows",
            expected: d,
            actual: w.wq.nrows(),
        });
    }
    if subset_out.nrows() == 0 {
        return Err(Error::arg("up-sampling from an empty subset"));
    }
    let q = all_feats.dot(&w.wq);
    let k = subset_out.dot(&w.wk);
    let v = subset_out.dot(&w.wv);
    let scale = 1.0 / (w.wk.ncols() as f64).sqrt();
    Ok(attend(q.view(), k.view(), v.view(), scale, keep))
}

/// Full pipeline with attention maps kept.
pub fn dsa_forward(graph: &FeatureGraph, w: &DsaWeights, cfg: &DsaConfig) -> Result<DsaOutput> {
    dsa_forward_with(graph, w, cfg, ForwardOptions::default())
}

pub fn dsa_forward_with(
    graph: &FeatureGraph,
    w: &DsaWeights,
    cfg: &DsaConfig,
    opts: ForwardOptions,
) -> Result<DsaOutput> {
    w.validate()?;
    crate::fsa::check_graph(graph, w.d())?;
    let subset = fps(graph.positions.view(), cfg.keypoints)?;
    let sampled = graph.positions.select(ndarray::Axis(0), &subset.indices);
    let nbhd = ball_query(
        sampled.view(),
        graph.positions.view(),
        cfg.deform_radius,
        cfg.deform_k,
    )?;
    let empty_deform = nbhd.rows.iter().filter(|r| r.is_empty()).count();
    let (refined, x_star) = deform_vertices(
        graph,
        &subset,
        &nbhd,
        w.w_offset.view(),
        w.w_align.view(),
    )?;
    let (aggregated, pool_fallbacks) = aggregate_features(
        graph,
        refined.view(),
        w.w_out.view(),
        cfg.pool_radius,
        cfg.pool_k,
    )?;
    let sub_graph = FeatureGraph::new(aggregated.clone(), refined.clone())?;
    let attention = fsa_forward_with(&sub_graph, &w.fsa, opts)?;
    let (upsampled, upsample_map) = match &w.upsampler {
        Upsampler::Idw {
            radius,
            max_samples,
            mlp,
        } => (
            upsample_idw(
                attention.update.view(),
                refined.view(),
                graph.positions.view(),
                *radius,
                *max_samples,
                mlp.view(),
            )?,
            None,
        ),
        Upsampler::Attention(c) => upsample_attention_impl(
            attention.update.view(),
            graph.features.view(),
            c,
            opts.keep_attention,
        )?,
    };
    let output = &graph.features + &upsampled;
    Ok(DsaOutput {
        output,
        subset: DeformedSubset {
            indices: subset,
            refined,
            aggregated,
            x_star,
            empty_deform,
            pool_fallbacks,
        },
        attention,
        upsampled,
        upsample_map,
    })
}

/// Stack blocks; each layer re-samples on the unchanged positions.
pub fn dsa_stack(
    graph: &FeatureGraph,
    layers: &[DsaWeights],
    cfg: &DsaConfig,
    opts: ForwardOptions,
) -> Result<Vec<DsaOutput>> {
    let mut outs: Vec<DsaOutput> = Vec::with_capacity(layers.len());
    let mut current = graph.clone();
    for w in layers {
        let out = dsa_forward_with(&current, w, cfg, opts)?;
        current.features = out.output.clone();
        outs.push(out);
    }
    Ok(outs)
}

/// Slice helper kept for diagnostics: first `m` rows of a matrix.
pub fn head_rows(m: &Array2<f64>, rows: usize) -> Array2<f64> {
    m.slice(s![..rows.min(m.nrows()), ..]).to_owned()
}
