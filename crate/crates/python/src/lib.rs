//! Python bindings. Matrices cross the boundary as lists of row lists.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pointctx::costmodel;
use pointctx::dsa::{dsa_forward, DsaConfig, DsaWeights, UpsampleMode};
use pointctx::fsa::{fsa_backward, fsa_forward, fsa_forward_taped, FsaWeights};
use pointctx::pcio::{self, EncoderWeights, GridMode, GridSpec};
use pointctx::Error;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: &Rows, cols: Option<usize>, what: &str) -> PyResult<Array2<f64>> {
    let c = cols.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err(format!("{what}: every row must have {c} entries")));
    }
    Array2::from_shape_vec((rows.len(), c), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Rows {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Points as `(x, y, z, intensity)` rows.
#[pyclass(name = "PointCloud", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: pcio::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Rows) -> PyResult<Self> {
        let a = to_array(&points, Some(4), "points")?;
        let pts = a.outer_iter().map(|r| pcio::Point::new(r[0], r[1], r[2], r[3])).collect();
        Ok(Self {
            inner: pcio::PointCloud::new(pts),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        pcio::load_scan(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn points(&self) -> Rows {
        self.inner.points.iter().map(|p| vec![p.x, p.y, p.z, p.intensity]).collect()
    }
}

/// Node features (n x d) and positions (n x 3).
#[pyclass(name = "FeatureGraph", from_py_object)]
#[derive(Clone)]
struct PyFeatureGraph {
    inner: pcio::FeatureGraph,
}

#[pymethods]
impl PyFeatureGraph {
    #[new]
    fn new(features: Rows, positions: Rows) -> PyResult<Self> {
        let f = to_array(&features, None, "features")?;
        let p = to_array(&positions, Some(3), "positions")?;
        pcio::FeatureGraph::new(f, p).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn features(&self) -> Rows {
        to_rows(&self.inner.features)
    }

    #[getter]
    fn positions(&self) -> Rows {
        to_rows(&self.inner.positions)
    }
}

/// Seeded full-attention weights.
#[pyclass(name = "FsaWeights", from_py_object)]
#[derive(Clone)]
struct PyFsaWeights {
    inner: FsaWeights,
}

#[pymethods]
impl PyFsaWeights {
    #[new]
    #[pyo3(signature = (d, heads, seed=0))]
    fn new(d: usize, heads: usize, seed: u64) -> PyResult<Self> {
        FsaWeights::seeded(d, heads, seed).map(|inner| Self { inner }).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn byte_size(&self) -> usize {
        self.inner.byte_size()
    }
}

/// Seeded deformable-attention weights.
#[pyclass(name = "DsaWeights", from_py_object)]
#[derive(Clone)]
struct PyDsaWeights {
    inner: DsaWeights,
}

#[pymethods]
impl PyDsaWeights {
    #[new]
    #[pyo3(signature = (d, heads, upsample="idw", interp_radius=1.6, interp_samples=16, seed=0))]
    fn new(d: usize, heads: usize, upsample: &str, interp_radius: f64, interp_samples: usize, seed: u64) -> PyResult<Self> {
        let mode: UpsampleMode = upsample.parse().map_err(py_err)?;
        DsaWeights::seeded(d, heads, mode, interp_radius, interp_samples, seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Crop to the range and build a node graph with a seeded encoder.
#[pyfunction]
#[pyo3(signature = (cloud, range_min, range_max, cell_size, mode="pillar", dim=64, seed=0))]
fn discretize(
    cloud: &PyPointCloud,
    range_min: [f64; 3],
    range_max: [f64; 3],
    cell_size: Vec<f64>,
    mode: &str,
    dim: usize,
    seed: u64,
) -> PyResult<PyFeatureGraph> {
    let spec = GridSpec::new(range_min, range_max, cell_size).map_err(py_err)?;
    let mode: GridMode = mode.parse().map_err(py_err)?;
    let cropped = pcio::crop_range(&cloud.inner, &spec);
    pcio::discretize(&cropped, &spec, mode, &EncoderWeights::seeded(dim, seed))
        .map(|inner| PyFeatureGraph { inner })
        .map_err(py_err)
}

/// Returns `(output, attention maps per head)`.
#[pyfunction]
fn fsa(graph: &PyFeatureGraph, weights: &PyFsaWeights) -> PyResult<(Rows, Vec<Rows>)> {
    let out = fsa_forward(&graph.inner, &weights.inner).map_err(py_err)?;
    Ok((to_rows(&out.output), out.attn.iter().map(to_rows).collect()))
}

/// Gradients of `sum(upstream * output)` keyed by tensor name.
#[pyfunction]
fn fsa_gradients<'py>(
    py: Python<'py>,
    graph: &PyFeatureGraph,
    weights: &PyFsaWeights,
    upstream: Rows,
) -> PyResult<Bound<'py, PyDict>> {
    let up = to_array(&upstream, Some(graph.inner.d()), "upstream")?;
    let (_, tape) = fsa_forward_taped(&graph.inner, &weights.inner).map_err(py_err)?;
    let g = fsa_backward(&tape, &up).map_err(py_err)?;
    let dict = PyDict::new(py);
    for (name, values) in pointctx::reference::grad_tensors(&g) {
        dict.set_item(name, values)?;
    }
    Ok(dict)
}

/// Returns a dict with `output`, `indices`, `refined`, `attention` and
/// `score_macs`.
#[pyfunction]
#[pyo3(signature = (graph, weights, keypoints=2048, deform_radius=3.0, deform_k=16, pool_radius=2.0, pool_k=16))]
#[allow(clippy::too_many_arguments)]
fn dsa<'py>(
    py: Python<'py>,
    graph: &PyFeatureGraph,
    weights: &PyDsaWeights,
    keypoints: usize,
    deform_radius: f64,
    deform_k: usize,
    pool_radius: f64,
    pool_k: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = DsaConfig {
        keypoints,
        deform_radius,
        deform_k,
        pool_radius,
        pool_k,
    };
    let out = dsa_forward(&graph.inner, &weights.inner, &cfg).map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("output", to_rows(&out.output))?;
    dict.set_item("indices", out.subset.indices.indices.clone())?;
    dict.set_item("refined", to_rows(&out.subset.refined))?;
    dict.set_item("attention", out.attention.attn.iter().map(to_rows).collect::<Vec<_>>())?;
    dict.set_item("score_macs", out.score_macs())?;
    Ok(dict)
}

#[pyfunction]
fn fps(positions: Rows, m: usize) -> PyResult<Vec<usize>> {
    let p = to_array(&positions, Some(3), "positions")?;
    pointctx::geom::fps(p.view(), m).map(|s| s.indices).map_err(py_err)
}

fn neighbor_rows(nb: pointctx::Neighborhood) -> Vec<Vec<(usize, f64)>> {
    nb.rows.into_iter().map(|r| r.into_iter().map(|x| (x.index, x.dist2)).collect()).collect()
}

/// Per query: `(index, squared distance)` pairs, nearest first.
#[pyfunction]
fn knn(query: Rows, base: Rows, k: usize) -> PyResult<Vec<Vec<(usize, f64)>>> {
    let q = to_array(&query, Some(3), "query")?;
    let b = to_array(&base, Some(3), "base")?;
    pointctx::geom::knn(q.view(), b.view(), k).map(neighbor_rows).map_err(py_err)
}

#[pyfunction]
fn ball_query(query: Rows, base: Rows, radius: f64, max_samples: usize) -> PyResult<Vec<Vec<(usize, f64)>>> {
    let q = to_array(&query, Some(3), "query")?;
    let b = to_array(&base, Some(3), "base")?;
    pointctx::geom::ball_query(q.view(), b.view(), radius, max_samples)
        .map(neighbor_rows)
        .map_err(py_err)
}

/// Totals for an architecture config file; FLOPs at `nodes` when given.
#[pyfunction]
#[pyo3(signature = (config, nodes=None))]
fn cost<'py>(py: Python<'py>, config: &str, nodes: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = costmodel::load_config(config).map_err(py_err)?;
    let r = match nodes {
        Some(n) => costmodel::count_flops(&cfg, n),
        None => costmodel::count_params(&cfg),
    }
    .map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("name", r.config.clone())?;
    dict.set_item("params", r.total_params)?;
    dict.set_item("flops", r.total_flops)?;
    dict.set_item("attention_score_flops", r.attention_score_flops())?;
    Ok(dict)
}

#[pymodule]
fn pointctx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyFeatureGraph>()?;
    m.add_class::<PyFsaWeights>()?;
    m.add_class::<PyDsaWeights>()?;
    m.add_function(wrap_pyfunction!(discretize, m)?)?;
    m.add_function(wrap_pyfunction!(fsa, m)?)?;
    m.add_function(wrap_pyfunction!(fsa_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(dsa, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    Ok(())
}
