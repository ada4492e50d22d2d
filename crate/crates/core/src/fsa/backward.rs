//! Exact reverse-mode gradients of the attention block.

use ndarray::{s, Array1, Array2, Axis};

use super::{forward_impl, AttentionOutput, ForwardOptions, ForwardParts, FsaWeights};
use crate::error::{Error, Result};
use crate::pcio::FeatureGraph;

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    graph: FeatureGraph,
    weights: FsaWeights,
    encoded: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    context: Array2<f64>,
    xhat: Array2<f64>,
    rstd: Array2<f64>,
    output: Array2<f64>,
}

impl GradTape {
    pub(crate) fn record(
        graph: &FeatureGraph,
        w: &FsaWeights,
        out: &AttentionOutput,
        parts: ForwardParts,
    ) -> Self {
        Self {
            graph: graph.clone(),
            weights: w.clone(),
            encoded: parts.encoded,
            q: parts.q,
            k: parts.k,
            v: parts.v,
            attn: out.attn.clone(),
            context: out.context.clone(),
            xhat: parts.xhat,
            rstd: parts.rstd,
            output: out.output.clone(),
        }
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn weights(&self) -> &FsaWeights {
        &self.weights
    }

    /// Re-run the recorded forward pass.
    pub fn replay(&self) -> Result<Array2<f64>> {
        let (out, _) = forward_impl(&self.graph, &self.weights, ForwardOptions::default())?;
        Ok(out.output)
    }
}

/// Gradients of a scalar loss with respect to block inputs and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FsaGrads {
    pub features: Array2<f64>,
    pub positions: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub wpos: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub fn fsa_backward(tape: &GradTape, d_output: &Array2<f64>) -> Result<FsaGrads> {
    let w = &tape.weights;
    let (n, d) = tape.output.dim();
    if d_output.dim() != (n, d) {
        return Err(Error::DimMismatch {
            context: "output gradient shape",
            expected: n * d,
            actual: d_output.len(),
        });
    }
    if tape.attn.len() != w.heads {
        return Err(Error::Format("tape recorded without attention maps".into()));
    }
    let dh = w.head_dim();
    let gs = d / w.groups;
    let scale = 1.0 / (dh as f64).sqrt();

    // Y = X + gamma * xhat + beta
    let d_gamma = (d_output * &tape.xhat).sum_axis(Axis(0));
    let d_beta = d_output.sum_axis(Axis(0));
    let mut d_proj = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for g in 0..w.groups {
            let lo = g * gs;
            let mut mean_dx = 0.0;
            let mut mean_dx_x = 0.0;
            for c in lo..lo + gs {
                let dx = d_output[[i, c]] * w.gamma[c];
                mean_dx += dx;
                mean_dx_x += dx * tape.xhat[[i, c]];
            }
            mean_dx /= gs as f64;
            mean_dx_x /= gs as f64;
            let r = tape.rstd[[i, g]];
            for c in lo..lo + gs {
                let dx = d_output[[i, c]] * w.gamma[c];
                d_proj[[i, c]] = r * (dx - mean_dx - tape.xhat[[i, c]] * mean_dx_x);
            }
        }
    }

    let d_wo = tape.context.t().dot(&d_proj);
    let d_context = d_proj.dot(&w.wo.t());

    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &tape.attn[h];
        let dc = d_context.slice(cols);
        let vh = tape.v.slice(cols);
        let da = dc.dot(&vh.t());
        dv.slice_mut(cols).assign(&a.t().dot(&dc));
        // softmax: dS = A * (dA - rowsum(A * dA))
        let mut ds = &da * a;
        let row_dot = ds.sum_axis(Axis(1));
        for (mut row, (arow, rd)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(&row_dot)) {
            for (x, av) in row.iter_mut().zip(arow) {
                *x -= av * rd;
            }
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&tape.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&tape.q.slice(cols)));
    }

    let et = tape.encoded.t();
    let d_wq = et.dot(&dq);
    let d_wk = et.dot(&dk);
    let d_wv = et.dot(&dv);
    let d_encoded = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    let d_wpos = tape.graph.positions.t().dot(&d_encoded);
    let d_positions = d_encoded.dot(&w.wpos.t());
    let d_features = &d_encoded + d_output;

    Ok(FsaGrads {
        features: d_features,
        positions: d_positions,
        wq: d_wq,
        wk: d_wk,
        wv: d_wv,
        wo: d_wo,
        wpos: d_wpos,
        gamma: d_gamma,
        beta: d_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fsa_forward_taped;
    use super::*;

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let w = FsaWeights::seeded_full(8, 4, 11).unwrap();
        let g = FeatureGraph::new(
            Array2::from_shape_fn((5, 8), |(i, j)| (i as f64 - j as f64) * 0.1),
            Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.2),
        )
        .unwrap();
        let (_, tape) = fsa_forward_taped(&g, &w).unwrap();
        let grads = fsa_backward(&tape, &Array2::zeros((5, 8))).unwrap();
        for m in [&grads.features, &grads.positions, &grads.wq, &grads.wk, &grads.wv, &grads.wo, &grads.wpos] {
            assert!(m.iter().all(|v| *v == 0.0));
        }
        assert!(grads.gamma.iter().chain(grads.beta.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let w = FsaWeights::seeded(4, 2, 2).unwrap();
        let g = FeatureGraph::new(
            Array2::from_shape_fn((3, 4), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.3),
            Array2::from_shape_fn((3, 3), |(i, j)| (i + j) as f64),
        )
        .unwrap();
        let (_, tape) = fsa_forward_taped(&g, &w).unwrap();
        assert_eq!(&tape.replay().unwrap(), tape.output());
    }

    #[test]
    fn wrong_shape_rejected() {
        let w = FsaWeights::seeded(4, 2, 2).unwrap();
        let g = FeatureGraph::new(Array2::ones((2, 4)), Array2::zeros((2, 3))).unwrap();
        let (_, tape) = fsa_forward_taped(&g, &w).unwrap();
        assert!(fsa_backward(&tape, &Array2::zeros((3, 4))).is_err());
    }
}
