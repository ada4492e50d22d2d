//! Farthest-point sampling and neighborhood queries over `n x 3` positions.
//!
//! Everything here is exhaustive O(n * q); results are sorted by
//! (squared distance, index) so they never depend on evaluation order.

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Ordered subset of node indices into a parent graph of `parent_n` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    pub indices: Vec<usize>,
    pub parent_n: usize,
}

impl IndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

/// Per-query neighbor lists, nearest first, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Neighborhood {
    pub rows: Vec<Vec<Neighbor>>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Neighbor] {
        &self.rows[i]
    }
}

#[inline]
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn point(p: &ArrayView2<f64>, i: usize) -> [f64; 3] {
    [p[[i, 0]], p[[i, 1]], p[[i, 2]]]
}

fn check_xyz(p: &ArrayView2<f64>, what: &'static str) -> Result<()> {
    if p.ncols() != 3 {
        return Err(Error::DimMismatch {
            context: what,
            expected: 3,
            actual: p.ncols(),
        });
    }
    Ok(())
}

/// Farthest-point sampling seeded at node 0.
pub fn fps(positions: ArrayView2<f64>, m: usize) -> Result<IndexSet> {
    fps_from(positions, m, 0)
}

/// Greedy max-min selection starting from `start`. Each pick maximizes the
/// distance to the already selected set; ties go to the lowest index.
pub fn fps_from(positions: ArrayView2<f64>, m: usize, start: usize) -> Result<IndexSet> {
    check_xyz(&positions, "fps positions")?;
    let n = positions.nrows();
    if m == 0 || m > n {
        return Err(Error::arg(format!("fps needs 1 <= m <= n (m={m}, n={n})")));
    }
    if start >= n {
        return Err(Error::arg(format!("fps start {start} out of range for n={n}")));
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| point(&positions, i)).collect();
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(m);
    let mut last = start;
    loop {
        selected[last] = true;
        indices.push(last);
        if indices.len() == m {
            break;
        }
        let anchor = pts[last];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(pts[i], anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !selected[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        last = best;
    }
    Ok(IndexSet {
        indices,
        parent_n: n,
    })
}

fn sorted_candidates(q: [f64; 3], base: &[[f64; 3]]) -> Vec<Neighbor> {
    base.iter()
        .enumerate()
        .map(|(index, b)| Neighbor {
            index,
            dist2: dist2(q, *b),
        })
        .collect()
}

fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index))
}

/// `min(k, n)` nearest base points per query.
pub fn knn(query: ArrayView2<f64>, base: ArrayView2<f64>, k: usize) -> Result<Neighborhood> {
    check_xyz(&query, "knn query")?;
    check_xyz(&base, "knn base")?;
    if base.nrows() == 0 {
        return Err(Error::arg("knn over an empty base set"));
    }
    if k == 0 {
        return Err(Error::arg("knn needs k >= 1"));
    }
    let base_pts: Vec<[f64; 3]> = (0..base.nrows()).map(|i| point(&base, i)).collect();
    let k = k.min(base_pts.len());
    let rows = (0..query.nrows())
        .into_par_iter()
        .map(|qi| {
            let mut cand = sorted_candidates(point(&query, qi), &base_pts);
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_distance_then_index);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by_distance_then_index);
            cand
        })
        .collect();
    Ok(Neighborhood { rows })
}

/// Up to `max_samples` base points with squared distance `<= radius^2`,
/// nearest first. Queries with nothing in range get an empty row.
pub fn ball_query(
    query: ArrayView2<f64>,
    base: ArrayView2<f64>,
    radius: f64,
    max_samples: usize,
) -> Result<Neighborhood> {
    check_xyz(&query, "ball query")?;
    check_xyz(&base, "ball base")?;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::arg(format!("ball radius must be positive (got {radius})")));
    }
    if max_samples == 0 {
        return Err(Error::arg("ball query needs max_samples >= 1"));
    }
    let r2 = radius * radius;
    let base_pts: Vec<[f64; 3]> = (0..base.nrows()).map(|i| point(&base, i)).collect();
    let rows = (0..query.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = point(&query, qi);
            let mut cand: Vec<Neighbor> = base_pts
                .iter()
                .enumerate()
                .filter_map(|(index, b)| {
                    let d = dist2(q, *b);
                    (d <= r2).then_some(Neighbor { index, dist2: d })
                })
                .collect();
            if max_samples < cand.len() {
                cand.select_nth_unstable_by(max_samples - 1, by_distance_then_index);
                cand.truncate(max_samples);
            }
            cand.sort_unstable_by(by_distance_then_index);
            cand
        })
        .collect();
    Ok(Neighborhood { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn fps_unit_square() {
        let p = array![[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]];
        assert_eq!(fps(p.view(), 2).unwrap().indices, vec![0, 2]);
        assert_eq!(fps(p.view(), 1).unwrap().indices, vec![0]);
        let all = fps(p.view(), 4).unwrap();
        assert_eq!(all.indices[0], 0);
        let mut sorted = all.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_bad_m() {
        let p = Array2::<f64>::zeros((3, 3));
        assert!(fps(p.view(), 0).is_err());
        assert!(fps(p.view(), 4).is_err());
    }

    #[test]
    fn fps_duplicates_never_repeat_an_index() {
        let p = Array2::<f64>::zeros((5, 3));
        assert_eq!(fps(p.view(), 5).unwrap().indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn knn_self_first_and_saturates() {
        let base = array![[0., 0., 0.], [2., 0., 0.], [0., 3., 0.]];
        let q = array![[2., 0., 0.]];
        let nb = knn(q.view(), base.view(), 10).unwrap();
        assert_eq!(nb.row(0).len(), 3);
        assert_eq!(nb.row(0)[0], Neighbor { index: 1, dist2: 0.0 });
        assert!(knn(q.view(), Array2::<f64>::zeros((0, 3)).view(), 1).is_err());
    }

    #[test]
    fn ball_radius_boundary() {
        let base = array![[2.99, 0., 0.], [3.01, 0., 0.], [0., 0., 0.]];
        let q = array![[0., 0., 0.]];
        let nb = ball_query(q.view(), base.view(), 3.0, 16).unwrap();
        let idx: Vec<usize> = nb.row(0).iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![2, 0]);
        let one = ball_query(q.view(), base.view(), 3.0, 1).unwrap();
        assert_eq!(one.row(0).len(), 1);
        assert_eq!(one.row(0)[0].index, 2);
    }

    #[test]
    fn ball_empty_row_when_nothing_in_range() {
        let base = array![[10., 0., 0.]];
        let q = array![[0., 0., 0.]];
        assert!(ball_query(q.view(), base.view(), 1.0, 4).unwrap().row(0).is_empty());
        assert!(ball_query(q.view(), base.view(), 0.0, 4).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let base = array![[1., 0., 0.], [-1., 0., 0.], [0., 1., 0.]];
        let q = array![[0., 0., 0.]];
        let nb = knn(q.view(), base.view(), 2).unwrap();
        assert_eq!(nb.row(0)[0].index, 0);
        assert_eq!(nb.row(0)[1].index, 1);
    }
}
