//! Scan loading and grid discretization into a [`FeatureGraph`].

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;

/// Bytes per scan record: four little-endian `f32` (x, y, z, intensity).
pub const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Decode a KITTI velodyne buffer. Intensities are clamped to `[0, 1]`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(RECORD_BYTES) {
            return Err(Error::TruncatedRecord { len: bytes.len() });
        }
        let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
        for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let mut v = [0f64; 4];
            for (k, word) in rec.chunks_exact(4).enumerate() {
                v[k] = f32::from_le_bytes([word[0], word[1], word[2], word[3]]) as f64;
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            points.push(Point::new(v[0], v[1], v[2], v[3].clamp(0.0, 1.0)));
        }
        Ok(Self { points })
    }

    /// Encode as little-endian `f32` quadruples. Values are narrowed to `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * RECORD_BYTES);
        for p in &self.points {
            for c in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out
    }
}

pub fn load_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PointCloud::from_bytes(&bytes)
}

pub fn save_scan(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pc.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Axis-aligned detection range plus cell size. `cell_size` has two entries
/// (pillar grids, XY only) or three (voxel grids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub cell_size: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Pillar,
    Voxel,
    Point,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pillar" => Ok(GridMode::Pillar),
            "voxel" => Ok(GridMode::Voxel),
            "point" => Ok(GridMode::Point),
            other => Err(Error::arg(format!("unknown grid mode `{other}`"))),
        }
    }
}

impl GridSpec {
    pub fn new(range_min: [f64; 3], range_max: [f64; 3], cell_size: Vec<f64>) -> Result<Self> {
        let spec = Self {
            range_min,
            range_max,
            cell_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// KITTI pillar grid: [0, 70.4] x [-40, 40] x [-3, 1] m at 0.16 m.
    pub fn kitti_pillars() -> Self {
        Self {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            cell_size: vec![0.16, 0.16],
        }
    }

    /// KITTI voxel grid at (0.05, 0.05, 0.1) m.
    pub fn kitti_voxels() -> Self {
        Self {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            cell_size: vec![0.05, 0.05, 0.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let (lo, hi) = (self.range_min[a], self.range_max[a]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::arg(format!(
                    "grid range on axis {a} must satisfy min < max (got [{lo}, {hi}])"
                )));
            }
        }
        if !(2..=3).contains(&self.cell_size.len()) {
            return Err(Error::arg("cell_size needs 2 (pillar) or 3 (voxel) entries"));
        }
        if self.cell_size.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::arg("cell_size entries must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.range_min[a] && p[a] < self.range_max[a])
    }

    /// Cell counts per axis for a grid mode. Pillar grids span Z with one cell.
    pub fn cell_counts(&self, mode: GridMode) -> Result<[usize; 3]> {
        let mut counts = [1usize; 3];
        let axes = match mode {
            GridMode::Pillar => 2,
            GridMode::Voxel => {
                if self.cell_size.len() < 3 {
                    return Err(Error::arg("voxel mode requires a 3D cell_size"));
                }
                3
            }
            GridMode::Point => 0,
        };
        for (a, count) in counts.iter_mut().enumerate().take(axes) {
            let extent = (self.range_max[a] - self.range_min[a]) / self.cell_size[a];
            // 70.4 / 0.16 evaluates a hair above 440.
            *count = ((extent - 1e-9).ceil() as usize).max(1);
        }
        Ok(counts)
    }
}

/// Points inside the half-open range `[min, max)` on every axis, order preserved.
pub fn crop_range(pc: &PointCloud, spec: &GridSpec) -> PointCloud {
    PointCloud::new(
        pc.points
            .iter()
            .copied()
            .filter(|p| spec.contains(&p.xyz()))
            .collect(),
    )
}

/// Shared per-point linear encoder: descriptor (dx, dy, dz, intensity) -> d.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    /// 4 x d
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EncoderWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Array2::zeros((4, d)),
            bias: Array1::zeros(d),
        }
    }

    pub fn seeded(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: init::uniform_matrix(&mut rng, 4, d, 0.5),
            bias: init::uniform_vector(&mut rng, d, 0.1),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn encode(&self, desc: &[f64; 4], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = self.bias[c];
            for (k, v) in desc.iter().enumerate() {
                acc += v * self.weight[[k, c]];
            }
            *o = acc;
        }
    }
}

/// Node set of the context graph: one feature row and one position per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    /// n x d
    pub features: Array2<f64>,
    /// n x 3, meters
    pub positions: Array2<f64>,
}

impl FeatureGraph {
    pub fn new(features: Array2<f64>, positions: Array2<f64>) -> Result<Self> {
        if positions.ncols() != 3 {
            return Err(Error::DimMismatch {
                context: "graph positions",
                expected: 3,
                actual: positions.ncols(),
            });
        }
        if features.nrows() != positions.nrows() {
            return Err(Error::DimMismatch {
                context: "graph node count",
                expected: features.nrows(),
                actual: positions.nrows(),
            });
        }
        if let Some(i) = first_non_finite_row(features.view())
            .into_iter()
            .chain(first_non_finite_row(positions.view()))
            .min()
        {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            features,
            positions,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Nodes in `indices` order.
    pub fn select(&self, indices: &[usize]) -> FeatureGraph {
        FeatureGraph {
            features: self.features.select(ndarray::Axis(0), indices),
            positions: self.positions.select(ndarray::Axis(0), indices),
        }
    }
}

fn first_non_finite_row(m: ArrayView2<f64>) -> Option<usize> {
    m.outer_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

/// One occupied cell: its flattened index and the point indices inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub key: u64,
    pub members: Vec<usize>,
}

/// Group points by cell. Cells come back in ascending flattened index
/// (X most significant, then Y, then Z); point mode yields one cell per point
/// in scan order.
pub fn group_cells(pc: &PointCloud, spec: &GridSpec, mode: GridMode) -> Result<Vec<Cell>> {
    spec.validate()?;
    if let Some(index) = pc.points.iter().position(|p| !spec.contains(&p.xyz())) {
        return Err(Error::OutOfRange { index });
    }
    if mode == GridMode::Point {
        return Ok((0..pc.len())
            .map(|i| Cell {
                key: i as u64,
                members: vec![i],
            })
            .collect());
    }
    let counts = spec.cell_counts(mode)?;
    let axes = if mode == GridMode::Pillar { 2 } else { 3 };
    let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.points.iter().enumerate() {
        let xyz = p.xyz();
        let mut idx = [0u64; 3];
        for a in 0..axes {
            let raw = ((xyz[a] - spec.range_min[a]) / spec.cell_size[a]).floor() as u64;
            idx[a] = raw.min(counts[a] as u64 - 1);
        }
        let key = (idx[0] * counts[1] as u64 + idx[1]) * counts[2] as u64 + idx[2];
        cells.entry(key).or_default().push(i);
    }
    Ok(cells
        .into_iter()
        .map(|(key, members)| Cell { key, members })
        .collect())
}

/// Discretize a cropped cloud into a feature graph.
///
/// Node position is the centroid of the member points. Node feature is the
/// elementwise max over members of `enc` applied to (offset to centroid,
/// intensity). Members are summed in a canonical order so the result does
/// not depend on input point order.
pub fn discretize(
    pc: &PointCloud,
    spec: &GridSpec,
    mode: GridMode,
    enc: &EncoderWeights,
) -> Result<FeatureGraph> {
    let d = enc.dim();
    if d == 0 {
        return Err(Error::arg("feature dim must be positive"));
    }
    let cells = group_cells(pc, spec, mode)?;
    let n = cells.len();
    let mut features = Array2::<f64>::zeros((n, d));
    let mut positions = Array2::<f64>::zeros((n, 3));
    let mut scratch = vec![0f64; d];
    for (node, cell) in cells.iter().enumerate() {
        let mut members: Vec<Point> = cell.members.iter().map(|&i| pc.points[i]).collect();
        members.sort_by(|a, b| {
            a.x.total_cmp(&b.x)
                .then(a.y.total_cmp(&b.y))
                .then(a.z.total_cmp(&b.z))
                .then(a.intensity.total_cmp(&b.intensity))
        });
        let mut centroid = [0f64; 3];
        for p in &members {
            centroid[0] += p.x;
            centroid[1] += p.y;
            centroid[2] += p.z;
        }
        let count = members.len() as f64;
        for c in centroid.iter_mut() {
            *c /= count;
        }
        let mut row = features.row_mut(node);
        row.fill(f64::NEG_INFINITY);
        for p in &members {
            let desc = [
                p.x - centroid[0],
                p.y - centroid[1],
                p.z - centroid[2],
                p.intensity,
            ];
            enc.encode(&desc, &mut scratch);
            for (r, s) in row.iter_mut().zip(&scratch) {
                if *s > *r {
                    *r = *s;
                }
            }
        }
        for a in 0..3 {
            positions[[node, a]] = centroid[a];
        }
    }
    FeatureGraph::new(features, positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes_of(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decodes_two_points_exactly() {
        let pc = PointCloud::from_bytes(&bytes_of(&[1., 2., 3., 0.5, 4., 5., 6., 0.])).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.points[0], Point::new(1., 2., 3., 0.5));
        assert_eq!(pc.points[1], Point::new(4., 5., 6., 0.));
    }

    #[test]
    fn empty_buffer_is_empty_cloud() {
        assert!(PointCloud::from_bytes(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_rejected() {
        let err = PointCloud::from_bytes(&[0u8; 17]).unwrap_err();
        assert!(matches!(err, Error::TruncatedRecord { len: 17 }));
    }

    #[test]
    fn non_finite_reports_point_index() {
        let err =
            PointCloud::from_bytes(&bytes_of(&[0., 0., 0., 0., 1., f32::NAN, 0., 0.])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    #[test]
    fn intensity_is_clamped() {
        let pc = PointCloud::from_bytes(&bytes_of(&[0., 0., 0., 7.5, 0., 0., 0., -1.])).unwrap();
        assert_eq!(pc.points[0].intensity, 1.0);
        assert_eq!(pc.points[1].intensity, 0.0);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_scan("/definitely/not/here.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn crop_uses_half_open_bounds() {
        let spec = GridSpec::kitti_pillars();
        let pc = PointCloud::new(vec![
            Point::new(0., 0., 0., 0.),
            Point::new(70.4, 0., 0., 0.),
            Point::new(10., -40., -3., 0.),
            Point::new(10., 40., 0., 0.),
        ]);
        let out = crop_range(&pc, &spec);
        assert_eq!(
            out.points,
            vec![Point::new(0., 0., 0., 0.), Point::new(10., -40., -3., 0.)]
        );
        assert!(crop_range(&PointCloud::default(), &spec).is_empty());
    }

    #[test]
    fn kitti_cell_counts() {
        assert_eq!(
            GridSpec::kitti_pillars().cell_counts(GridMode::Pillar).unwrap(),
            [440, 500, 1]
        );
        assert_eq!(
            GridSpec::kitti_voxels().cell_counts(GridMode::Voxel).unwrap(),
            [1408, 1600, 40]
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GridSpec::new([0.; 3], [1., 1., 0.], vec![0.1, 0.1]).is_err());
        assert!(GridSpec::new([0.; 3], [1.; 3], vec![0.1, 0.0]).is_err());
        assert!(GridSpec::new([0.; 3], [1.; 3], vec![0.1]).is_err());
    }

    #[test]
    fn two_points_one_pillar_midpoint() {
        let spec = GridSpec::new([0.; 3], [1.; 3], vec![1.0, 1.0]).unwrap();
        let pc = PointCloud::new(vec![
            Point::new(0.2, 0.2, 0.2, 0.1),
            Point::new(0.4, 0.6, 0.8, 0.3),
        ]);
        let g = discretize(&pc, &spec, GridMode::Pillar, &EncoderWeights::seeded(4, 1)).unwrap();
        assert_eq!(g.n(), 1);
        let pos = g.positions.row(0);
        assert!((pos[0] - 0.3).abs() < 1e-15);
        assert!((pos[1] - 0.4).abs() < 1e-15);
        assert!((pos[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let spec = GridSpec::kitti_pillars();
        let pc = PointCloud::new(vec![
            Point::new(1., 1., 0., 0.5),
            Point::new(20., 3., -1., 0.2),
            Point::new(20.01, 3.01, -1., 0.9),
        ]);
        let g = discretize(&pc, &spec, GridMode::Pillar, &EncoderWeights::zeros(8)).unwrap();
        assert_eq!(g.n(), 2);
        assert!(g.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uncropped_point_is_rejected_by_index() {
        let spec = GridSpec::kitti_pillars();
        let pc = PointCloud::new(vec![Point::new(1., 1., 0., 0.), Point::new(-1., 0., 0., 0.)]);
        let err = discretize(&pc, &spec, GridMode::Voxel, &EncoderWeights::zeros(2));
        assert!(matches!(err, Err(Error::OutOfRange { index: 1 })));
    }

    #[test]
    fn point_mode_preserves_scan_order() {
        let spec = GridSpec::kitti_voxels();
        let pc = PointCloud::new(vec![Point::new(5., 1., 0., 0.5), Point::new(1., 1., 0., 0.)]);
        let g = discretize(&pc, &spec, GridMode::Point, &EncoderWeights::seeded(3, 2)).unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.positions[[0, 0]], 5.0);
        assert_eq!(g.positions[[1, 0]], 1.0);
    }

    #[test]
    fn cells_ordered_x_major() {
        let spec = GridSpec::new([0.; 3], [2.; 3], vec![1.0, 1.0, 1.0]).unwrap();
        let pc = PointCloud::new(vec![
            Point::new(1.5, 0.5, 0.5, 0.),
            Point::new(0.5, 1.5, 0.5, 0.),
            Point::new(0.5, 0.5, 1.5, 0.),
        ]);
        let cells = group_cells(&pc, &spec, GridMode::Voxel).unwrap();
        let keys: Vec<u64> = cells.iter().map(|c| c.key).collect();
        assert_eq!(keys, vec![1, 2, 4]);
        assert_eq!(cells[0].members, vec![2]);
        assert_eq!(cells[2].members, vec![0]);
    }
}
