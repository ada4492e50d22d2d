//! Production kernels against independent scalar oracles.

use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointctx::check::{random_graph, relative_error, gradient_errors};
use pointctx::dsa::{
    aggregate_features, deform_vertices, dsa_forward, idw_weights, upsample_attention,
    upsample_idw, CrossAttention, DsaConfig, DsaWeights, UpsampleMode, Upsampler,
};
use pointctx::fsa::{
    fsa_backward, fsa_forward, fsa_forward_taped, fsa_forward_with, group_norm,
    local_maxpool_baseline, ForwardOptions, FsaWeights,
};
use pointctx::geom::{ball_query, fps, knn, IndexSet};
use pointctx::pcio::{discretize, EncoderWeights, FeatureGraph, GridMode, GridSpec, Point, PointCloud};
use pointctx::reference as oracle;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

#[test]
fn discretize_matches_naive_cell_max() {
    let pc = PointCloud::new(vec![
        Point::new(0.10, 0.20, 0.0, 0.3),
        Point::new(0.30, 0.10, -1.0, 0.9),
        Point::new(1.70, -0.40, 0.5, 0.1),
    ]);
    let spec = GridSpec::new([0.0, -2.0, -3.0], [4.0, 2.0, 1.0], vec![1.0, 1.0]).unwrap();
    let enc = EncoderWeights::seeded(4, 99);
    let g = discretize(&pc, &spec, GridMode::Pillar, &enc).unwrap();
    assert_eq!(g.n(), 2);
    // Naive grouping by floored coordinates.
    let mut cells: Vec<((i64, i64), Vec<Point>)> = Vec::new();
    for p in &pc.points {
        let key = ((p.x / 1.0).floor() as i64, ((p.y + 2.0) / 1.0).floor() as i64);
        match cells.iter_mut().find(|c| c.0 == key) {
            Some(c) => c.1.push(*p),
            None => cells.push((key, vec![*p])),
        }
    }
    cells.sort_by_key(|c| c.0);
    for (node, (_, pts)) in cells.iter().enumerate() {
        let k = pts.len() as f64;
        let c = [
            pts.iter().map(|p| p.x).sum::<f64>() / k,
            pts.iter().map(|p| p.y).sum::<f64>() / k,
            pts.iter().map(|p| p.z).sum::<f64>() / k,
        ];
        for (a, ca) in c.iter().enumerate() {
            assert!((g.positions[[node, a]] - ca).abs() < 1e-12);
        }
        for ch in 0..4 {
            let want = pts
                .iter()
                .map(|p| {
                    let desc = [p.x - c[0], p.y - c[1], p.z - c[2], p.intensity];
                    enc.bias[ch] + (0..4).map(|i| desc[i] * enc.weight[[i, ch]]).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((g.features[[node, ch]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fps_unit_square_matches_brute_force() {
    let p = array![[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]];
    let rows = oracle::rows(&p);
    // Farthest corner from corner 0 by exhaustive distance.
    let far = (1..4)
        .max_by(|&a, &b| {
            let da: f64 = (0..3).map(|c| (rows[a][c] - rows[0][c]).powi(2)).sum();
            let db: f64 = (0..3).map(|c| (rows[b][c] - rows[0][c]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    assert_eq!(fps(p.view(), 2).unwrap().indices, vec![0, far]);
    assert_eq!(oracle::fps(&rows, 2), vec![0, 2]);
}

#[test]
fn knn_sixteen_points_k3() {
    let mut r = rng(16);
    let base = random_matrix(&mut r, 16, 3);
    let got = knn(base.view(), base.view(), 3).unwrap();
    let want = oracle::knn(&oracle::rows(&base), &oracle::rows(&base), 3);
    for (g, w) in got.rows.iter().zip(&want) {
        let gi: Vec<(usize, f64)> = g.iter().map(|n| (n.index, n.dist2)).collect();
        assert_eq!(&gi, w);
    }
}

#[test]
fn ball_query_thirty_two_points() {
    let mut r = rng(32);
    let base = random_matrix(&mut r, 32, 3).mapv(|v| v * 2.0);
    let q = random_matrix(&mut r, 8, 3);
    let got = ball_query(q.view(), base.view(), 1.6, 16).unwrap();
    let want = oracle::ball_query(&oracle::rows(&q), &oracle::rows(&base), 1.6, 16);
    for (g, w) in got.rows.iter().zip(&want) {
        let gi: Vec<(usize, f64)> = g.iter().map(|n| (n.index, n.dist2)).collect();
        assert_eq!(&gi, w);
    }
}

#[test]
fn fsa_three_nodes_two_heads() {
    let mut r = rng(3);
    let g = random_graph(&mut r, 3, 4, 2.0);
    let w = FsaWeights::seeded_full(4, 2, 17).unwrap();
    let out = fsa_forward(&g, &w).unwrap();
    let want = oracle::fsa_forward(&oracle::rows(&g.features), &oracle::rows(&g.positions), &w);
    assert!(max_diff(&out.output, &oracle::matrix(&want.output)) < 1e-9);
    for (a, b) in out.attn.iter().zip(&want.attn) {
        assert!(max_diff(a, &oracle::matrix(b)) < 1e-9);
    }
}

#[test]
fn group_norm_random_row_two_groups() {
    let mut r = rng(8);
    let x = random_matrix(&mut r, 1, 8);
    let gamma = Array1::from_shape_fn(8, |_| r.random_range(0.5..1.5));
    let beta = Array1::from_shape_fn(8, |_| r.random_range(-0.5..0.5));
    let got = group_norm(x.view(), 2, &gamma, &beta, 1e-5).unwrap();
    let want = oracle::group_norm(&oracle::rows(&x), 2, gamma.as_slice().unwrap(), beta.as_slice().unwrap(), 1e-5);
    assert!(max_diff(&got, &oracle::matrix(&want)) < 1e-12);
}

#[test]
fn local_maxpool_eight_nodes() {
    let mut r = rng(38);
    let g = random_graph(&mut r, 8, 4, 2.0);
    let h = random_matrix(&mut r, 4, 4);
    let nb = knn(g.positions.view(), g.positions.view(), 3).unwrap();
    let got = local_maxpool_baseline(&g, &nb, h.view()).unwrap();
    let lists = oracle::knn(&oracle::rows(&g.positions), &oracle::rows(&g.positions), 3);
    let want = oracle::maxpool(&oracle::rows(&g.features), &lists, &h);
    let e = max_diff(&got, &oracle::matrix(&want));
    assert!(e < 1e-12, "max diff {e:e}");
}

#[test]
fn single_node_sum_loss_gradient() {
    let mut r = rng(1);
    let g = random_graph(&mut r, 1, 8, 1.0);
    let w = FsaWeights::seeded_full(8, 2, 5).unwrap();
    let up = Array2::ones((1, 8));
    let (_, tape) = fsa_forward_taped(&g, &w).unwrap();
    let a = fsa_backward(&tape, &up).unwrap();
    let f = oracle::finite_difference_grads(&g, &w, &up, 1e-5).unwrap();
    let e = relative_error(a.features.as_slice().unwrap(), f.features.as_slice().unwrap());
    assert!(e < 1e-6, "input gradient relative error {e:e}");
}

#[test]
fn four_nodes_eight_channels_four_heads_weight_gradients() {
    let mut r = rng(48);
    let g = random_graph(&mut r, 4, 8, 1.0);
    let w = FsaWeights::seeded_full(8, 4, 9).unwrap();
    let up = random_matrix(&mut r, 4, 8);
    let (_, tape) = fsa_forward_taped(&g, &w).unwrap();
    let a = fsa_backward(&tape, &up).unwrap();
    let f = oracle::finite_difference_grads(&g, &w, &up, 1e-5).unwrap();
    for (name, e) in gradient_errors(&a, &f) {
        assert!(e < 1e-5, "{name}: relative error {e:e}");
    }
}

#[test]
fn deform_one_node_two_neighbors_by_hand() {
    let g = FeatureGraph::new(
        array![[1.0, 2.0], [0.5, -1.0], [2.0, 0.0]],
        array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 1.0]],
    )
    .unwrap();
    let w_offset = array![[0.5, -0.25, 1.0], [0.2, 0.4, -0.3]];
    let w_align = array![0.3, -0.7, 1.1];
    let subset = IndexSet {
        indices: vec![0],
        parent_n: 3,
    };
    let nbhd = ball_query(array![[0.0, 0.0, 0.0]].view(), array![[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]].view(), 5.0, 16)
        .unwrap();
    // Neighbor rows index the base passed above; shift to graph indices.
    let mut nbhd = nbhd;
    for row in &mut nbhd.rows {
        for nb in row.iter_mut() {
            nb.index += 1;
        }
    }
    let (refined, xs) = deform_vertices(&g, &subset, &nbhd, w_offset.view(), w_align.view()).unwrap();
    // x_i - x_1 = (0.5, 3.0), x_i - x_2 = (-1, 2); v_i - v_j = (-1,0,0), (0,-2,-1).
    let off1 = [0.5 * 0.5 + 3.0 * 0.2, 0.5 * -0.25 + 3.0 * 0.4, 0.5 * 1.0 + 3.0 * -0.3];
    let off2 = [-0.5 + 2.0 * 0.2, 0.25 + 2.0 * 0.4, -1.0 + 2.0 * -0.3];
    let s: f64 = -off1[0] + off2[1] * -2.0 + -off2[2];
    let x = s.max(0.0) / 2.0;
    assert!((xs[0] - x).abs() < 1e-12);
    for a in 0..3 {
        assert!((refined[[0, a]] - (w_align[a] * x).tanh()).abs() < 1e-12);
    }
    let (r2, x2) = oracle::deform(
        &oracle::rows(&g.features),
        &oracle::rows(&g.positions),
        &[0],
        &[vec![(1, 1.0), (2, 5.0)]],
        &w_offset,
        &w_align,
    );
    assert!((x2[0] - xs[0]).abs() < 1e-12);
    assert!(max_diff(&refined, &oracle::matrix(&r2)) < 1e-12);
}

#[test]
fn aggregate_two_of_six() {
    let mut r = rng(62);
    let g = random_graph(&mut r, 6, 4, 1.5);
    let refined = random_matrix(&mut r, 2, 3);
    let w_out = random_matrix(&mut r, 4, 4);
    let (got, _) = aggregate_features(&g, refined.view(), w_out.view(), 1.0, 16).unwrap();
    let want = oracle::aggregate(
        &oracle::rows(&g.features),
        &oracle::rows(&g.positions),
        &oracle::rows(&refined),
        &w_out,
        1.0,
        16,
    );
    let e = max_diff(&got, &oracle::matrix(&want));
    assert!(e < 1e-12, "max diff {e:e}");
}

#[test]
fn idw_three_to_five() {
    let mut r = rng(35);
    let sub = random_matrix(&mut r, 3, 3);
    let all = random_matrix(&mut r, 5, 3);
    let feats = random_matrix(&mut r, 3, 4);
    let got = idw_weights(sub.view(), all.view(), 1.5, 16).unwrap();
    let want = oracle::idw_weights(&oracle::rows(&sub), &oracle::rows(&all), 1.5, 16, 1e-8);
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(w) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }
    let up = upsample_idw(feats.view(), sub.view(), all.view(), 1.5, 16, Array2::eye(4).view()).unwrap();
    for (t, row) in want.iter().enumerate() {
        for c in 0..4 {
            let v: f64 = row.iter().map(|&(j, w)| w * feats[[j, c]]).sum();
            assert!((up[[t, c]] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_upsample_four_from_two() {
    let mut r = rng(42);
    let sub = random_matrix(&mut r, 2, 4);
    let all = random_matrix(&mut r, 4, 4);
    let c = CrossAttention {
        wq: random_matrix(&mut r, 4, 4),
        wk: random_matrix(&mut r, 4, 4),
        wv: random_matrix(&mut r, 4, 4),
    };
    let (out, map) = upsample_attention(sub.view(), all.view(), &c).unwrap();
    let (o2, m2) = oracle::upsample_attention(&oracle::rows(&sub), &oracle::rows(&all), &c.wq, &c.wk, &c.wv);
    assert!(max_diff(&out, &oracle::matrix(&o2)) < 1e-9);
    assert!(max_diff(&map, &oracle::matrix(&m2)) < 1e-9);
}

#[test]
fn full_subset_with_identity_maps_matches_fsa() {
    let mut r = rng(77);
    let n = 12;
    let g = random_graph(&mut r, n, 8, 3.0);
    let mut w = DsaWeights::seeded(8, 2, UpsampleMode::Idw, 1e-3, 1, 4).unwrap();
    w.w_offset.fill(0.0);
    w.w_out = Array2::eye(8);
    if let Upsampler::Idw { mlp, .. } = &mut w.upsampler {
        *mlp = Array2::eye(8);
    }
    let cfg = DsaConfig {
        keypoints: n,
        deform_radius: 3.0,
        deform_k: 16,
        pool_radius: 1e-3,
        pool_k: 1,
    };
    let out = dsa_forward(&g, &w, &cfg).unwrap();
    let perm = &out.subset.indices.indices;
    assert_eq!(out.subset.refined, g.positions.select(Axis(0), perm));
    assert_eq!(out.subset.aggregated, g.features.select(Axis(0), perm));
    let full = fsa_forward(&g, &w.fsa).unwrap();
    assert!(max_diff(&out.output, &full.output) < 1e-6);
}

#[test]
fn default_subset_size_accepted_from_2048_nodes() {
    let mut r = rng(2048);
    let g = random_graph(&mut r, 2048, 8, 20.0);
    let w = DsaWeights::seeded(8, 2, UpsampleMode::Idw, 1.6, 16, 1).unwrap();
    let cfg = DsaConfig::default();
    assert_eq!(cfg.keypoints, 2048);
    let out = pointctx::dsa::dsa_forward_with(&g, &w, &cfg, ForwardOptions { keep_attention: false }).unwrap();
    assert_eq!(out.subset.indices.len(), 2048);
    assert_eq!(out.output.nrows(), 2048);
}

#[test]
fn composition_of_public_stages_is_bit_identical() {
    let mut r = rng(84);
    let g = random_graph(&mut r, 8, 4, 2.0);
    for mode in [UpsampleMode::Idw, UpsampleMode::Attention] {
        let w = DsaWeights::seeded(4, 2, mode, 1.6, 16, 12).unwrap();
        let cfg = DsaConfig {
            keypoints: 4,
            deform_radius: 3.0,
            deform_k: 16,
            pool_radius: 2.0,
            pool_k: 16,
        };
        let out = dsa_forward(&g, &w, &cfg).unwrap();
        let subset = fps(g.positions.view(), 4).unwrap();
        let sampled = g.positions.select(Axis(0), &subset.indices);
        let nb = ball_query(sampled.view(), g.positions.view(), 3.0, 16).unwrap();
        let (refined, _) = deform_vertices(&g, &subset, &nb, w.w_offset.view(), w.w_align.view()).unwrap();
        let (agg, _) = aggregate_features(&g, refined.view(), w.w_out.view(), 2.0, 16).unwrap();
        let sub = FeatureGraph::new(agg, refined.clone()).unwrap();
        let att = fsa_forward_with(&sub, &w.fsa, ForwardOptions::default()).unwrap();
        let up = match &w.upsampler {
            Upsampler::Idw { radius, max_samples, mlp } => {
                upsample_idw(att.update.view(), refined.view(), g.positions.view(), *radius, *max_samples, mlp.view())
                    .unwrap()
            }
            Upsampler::Attention(c) => upsample_attention(att.update.view(), g.features.view(), c).unwrap().0,
        };
        assert_eq!(out.output, &g.features + &up);
    }
}
