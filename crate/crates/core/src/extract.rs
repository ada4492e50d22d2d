//! Scan-to-context extraction: crop, discretize, run a stack of attention
//! blocks and write the artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsa::{dsa_forward, DsaConfig, DsaOutput, DsaWeights, UpsampleMode};
use crate::error::{Error, Result};
use crate::fsa::{fsa_forward, AttentionOutput, FsaWeights};
use crate::pcio::{crop_range, discretize, EncoderWeights, FeatureGraph, GridMode, GridSpec, PointCloud};
use crate::serialize::write_attention_csvs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fsa,
    Dsa,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsa" => Ok(Method::Fsa),
            "dsa" => Ok(Method::Dsa),
            other => Err(Error::arg(format!("unknown method `{other}` (fsa or dsa)"))),
        }
    }
}

/// Which attention maps get written as CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionExport {
    None,
    /// Layer 0, head 0.
    #[default]
    First,
    All,
}

impl std::str::FromStr for AttentionExport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionExport::None),
            "first" => Ok(AttentionExport::First),
            "all" => Ok(AttentionExport::All),
            other => Err(Error::arg(format!("unknown attention export `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSection {
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsaSection {
    pub keypoints: usize,
    pub deform_radius: f64,
    pub deform_k: usize,
    pub pool_radius: f64,
    pub pool_k: usize,
    pub upsample: UpsampleMode,
    pub interp_radius: f64,
    pub interp_samples: usize,
}

impl DsaSection {
    pub fn sampling(&self) -> DsaConfig {
        DsaConfig {
            keypoints: self.keypoints,
            deform_radius: self.deform_radius,
            deform_k: self.deform_k,
            pool_radius: self.pool_radius,
            pool_k: self.pool_k,
        }
    }
}

impl Default for DsaSection {
    fn default() -> Self {
        let s = DsaConfig::default();
        Self {
            keypoints: s.keypoints,
            deform_radius: s.deform_radius,
            deform_k: s.deform_k,
            pool_radius: s.pool_radius,
            pool_k: s.pool_k,
            upsample: UpsampleMode::Idw,
            interp_radius: 1.6,
            interp_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    #[serde(default)]
    pub attention: AttentionExport,
}

/// Extraction settings. TOML layout:
///
/// ```toml
/// mode = "pillar"     # pillar | voxel | point
/// seed = 7
/// [grid]      range_min, range_max, cell_size
/// [encoder]   dim
/// [attention] layers, heads
/// [dsa]       keypoints, deform_radius, deform_k, pool_radius, pool_k,
///             upsample (idw | attention), interp_radius, interp_samples
/// [export]    attention (none | first | all)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub mode: GridMode,
    pub seed: u64,
    pub grid: GridSpec,
    pub encoder: EncoderSection,
    pub attention: AttentionSection,
    #[serde(default)]
    pub dsa: DsaSection,
    #[serde(default = "default_export")]
    pub export: ExportSection,
}

fn default_export() -> ExportSection {
    ExportSection {
        attention: AttentionExport::First,
    }
}

impl ExtractConfig {
    pub fn parse(doc: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(doc).map_err(|e| Error::Config {
            path: "<document>".into(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.into_inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let doc = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&doc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        self.grid
            .validate()
            .map_err(|e| bad("grid", e.to_string()))?;
        if self.mode == GridMode::Voxel && self.grid.cell_size.len() != 3 {
            return Err(bad("grid.cell_size", "voxel mode needs three entries".into()));
        }
        if self.encoder.dim == 0 {
            return Err(bad("encoder.dim", "must be positive".into()));
        }
        if self.attention.layers == 0 {
            return Err(bad("attention.layers", "must be positive".into()));
        }
        if self.attention.heads == 0 || !self.encoder.dim.is_multiple_of(self.attention.heads) {
            return Err(bad(
                "attention.heads",
                format!(
                    "{} heads do not divide feature dim {}",
                    self.attention.heads, self.encoder.dim
                ),
            ));
        }
        let s = &self.dsa;
        if s.keypoints == 0 || s.deform_k == 0 || s.pool_k == 0 || self.dsa.interp_samples == 0 {
            return Err(bad("dsa", "counts must be positive".into()));
        }
        for (name, r) in [
            ("dsa.deform_radius", s.deform_radius),
            ("dsa.pool_radius", s.pool_radius),
            ("dsa.interp_radius", self.dsa.interp_radius),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return Err(bad(name, "must be a positive number".into()));
            }
        }
        Ok(())
    }

    pub fn encoder_weights(&self) -> EncoderWeights {
        EncoderWeights::seeded(self.encoder.dim, self.seed)
    }

    fn layer_seed(&self, layer: usize) -> u64 {
        self.seed.wrapping_add(1 + layer as u64)
    }

    pub fn fsa_layers(&self) -> Result<Vec<FsaWeights>> {
        (0..self.attention.layers)
            .map(|l| FsaWeights::seeded(self.encoder.dim, self.attention.heads, self.layer_seed(l)))
            .collect()
    }

    pub fn dsa_layers(&self) -> Result<Vec<DsaWeights>> {
        (0..self.attention.layers)
            .map(|l| {
                DsaWeights::seeded(
                    self.encoder.dim,
                    self.attention.heads,
                    self.dsa.upsample,
                    self.dsa.interp_radius,
                    self.dsa.interp_samples,
                    self.layer_seed(l),
                )
            })
            .collect()
    }
}

/// Per-layer output of an extraction run.
#[derive(Debug, Clone)]
pub enum LayerOutput {
    Fsa(Box<AttentionOutput>),
    Dsa(Box<DsaOutput>),
}

impl LayerOutput {
    pub fn attention_maps(&self) -> &[ndarray::Array2<f64>] {
        match self {
            LayerOutput::Fsa(o) => &o.attn,
            LayerOutput::Dsa(o) => &o.attention.attn,
        }
    }

    pub fn output(&self) -> &ndarray::Array2<f64> {
        match self {
            LayerOutput::Fsa(o) => &o.output,
            LayerOutput::Dsa(o) => &o.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub method: Method,
    pub points_in: usize,
    pub points_cropped: usize,
    pub before: FeatureGraph,
    pub after: FeatureGraph,
    pub layers: Vec<LayerOutput>,
    pub fsa_weights: Vec<FsaWeights>,
    pub dsa_weights: Vec<DsaWeights>,
    pub timings: Vec<StageTiming>,
}

/// An extraction failure tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn timed<T>(
    timings: &mut Vec<StageTiming>,
    stage: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> std::result::Result<T, StageError> {
    let t0 = Instant::now();
    let out = f().map_err(|source| StageError { stage, source })?;
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(out)
}

pub fn run_extract(
    pc: &PointCloud,
    cfg: &ExtractConfig,
    method: Method,
) -> std::result::Result<Extraction, StageError> {
    let mut timings = Vec::new();
    let cropped = timed(&mut timings, "crop", || {
        let c = crop_range(pc, &cfg.grid);
        if c.is_empty() {
            return Err(Error::arg(format!(
                "no points inside the grid range ({} points in scan)",
                pc.len()
            )));
        }
        Ok(c)
    })?;
    let before = timed(&mut timings, "discretize", || {
        discretize(&cropped, &cfg.grid, cfg.mode, &cfg.encoder_weights())
    })?;
    let mut current = before.clone();
    let mut layers = Vec::new();
    let mut fsa_weights = Vec::new();
    let mut dsa_weights = Vec::new();
    match method {
        Method::Fsa => {
            fsa_weights = timed(&mut timings, "weights", || cfg.fsa_layers())?;
            for w in &fsa_weights {
                let out = timed(&mut timings, "fsa", || fsa_forward(&current, w))?;
                current.features = out.output.clone();
                layers.push(LayerOutput::Fsa(Box::new(out)));
            }
        }
        Method::Dsa => {
            dsa_weights = timed(&mut timings, "weights", || cfg.dsa_layers())?;
            if cfg.dsa.keypoints > current.n() {
                return Err(StageError {
                    stage: "dsa",
                    source: Error::arg(format!(
                        "{} keypoints requested but the graph has {} nodes",
                        cfg.dsa.keypoints,
                        current.n()
                    )),
                });
            }
            let sampling = cfg.dsa.sampling();
            for w in &dsa_weights {
                let out = timed(&mut timings, "dsa", || dsa_forward(&current, w, &sampling))?;
                current.features = out.output.clone();
                layers.push(LayerOutput::Dsa(Box::new(out)));
            }
        }
    }
    Ok(Extraction {
        method,
        points_in: pc.len(),
        points_cropped: cropped.len(),
        before,
        after: current,
        layers,
        fsa_weights,
        dsa_weights,
        timings,
    })
}

#[derive(Debug, Clone, Serialize)]
struct DsaLayerDiagnostics {
    layer: usize,
    n: usize,
    m: usize,
    indices: Vec<usize>,
    displacements: Vec<[f64; 3]>,
    x_star: Vec<f64>,
    empty_deform: usize,
    pool_fallbacks: usize,
    score_macs: u64,
}

/// Write graphs, weights, attention CSVs and (for DSA) diagnostics into
/// `dir`. Returns the written paths relative to `dir`, sorted.
pub fn write_extraction(
    dir: impl AsRef<Path>,
    ex: &Extraction,
    export: AttentionExport,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    ex.before.to_bundle().write(dir.join("graph_before"))?;
    ex.after.to_bundle().write(dir.join("graph_after"))?;
    for stem in ["graph_before", "graph_after"] {
        written.push(PathBuf::from(format!("{stem}.bin")));
        written.push(PathBuf::from(format!("{stem}.json")));
    }
    let wdir = dir.join("weights");
    fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let bundles: Vec<_> = match ex.method {
        Method::Fsa => ex.fsa_weights.iter().map(|w| w.to_bundle()).collect(),
        Method::Dsa => ex.dsa_weights.iter().map(|w| w.to_bundle()).collect(),
    };
    for (l, b) in bundles.iter().enumerate() {
        b.write(wdir.join(format!("layer{l}")))?;
        written.push(PathBuf::from(format!("weights/layer{l}.bin")));
        written.push(PathBuf::from(format!("weights/layer{l}.json")));
    }
    if export != AttentionExport::None {
        let adir = dir.join("attention");
        fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
        for (l, layer) in ex.layers.iter().enumerate() {
            let maps = layer.attention_maps();
            let maps = match export {
                AttentionExport::First if l > 0 => &maps[..0],
                AttentionExport::First => &maps[..maps.len().min(1)],
                _ => maps,
            };
            for p in write_attention_csvs(&adir, &format!("layer{l}"), maps)? {
                let name = p.file_name().expect("file name").to_owned();
                written.push(Path::new("attention").join(name));
            }
        }
    }
    if ex.method == Method::Dsa {
        let diags: Vec<DsaLayerDiagnostics> = ex
            .layers
            .iter()
            .enumerate()
            .filter_map(|(l, layer)| match layer {
                LayerOutput::Dsa(o) => Some((l, o)),
                LayerOutput::Fsa(_) => None,
            })
            .map(|(l, o)| {
                let disp = o.subset.displacements(&ex.before);
                DsaLayerDiagnostics {
                    layer: l,
                    n: o.output.nrows(),
                    m: o.subset.indices.len(),
                    indices: o.subset.indices.indices.clone(),
                    displacements: disp.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
                    x_star: o.subset.x_star.to_vec(),
                    empty_deform: o.subset.empty_deform,
                    pool_fallbacks: o.subset.pool_fallbacks,
                    score_macs: o.score_macs(),
                }
            })
            .collect();
        let p = dir.join("dsa_diagnostics.json");
        let text = serde_json::to_string_pretty(&serde_json::json!({ "layers": diags }))
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        written.push(PathBuf::from("dsa_diagnostics.json"));
    }
    written.sort();
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcio::Point;

    const DOC: &str = r#"
mode = "pillar"
seed = 3

[grid]
range_min = [0.0, -4.0, -3.0]
range_max = [8.0, 4.0, 1.0]
cell_size = [0.5, 0.5]

[encoder]
dim = 8

[attention]
layers = 2
heads = 2

[dsa]
keypoints = 4
deform_radius = 3.0
deform_k = 16
pool_radius = 2.0
pool_k = 16
upsample = "idw"
interp_radius = 1.6
interp_samples = 16
"#;

    fn cloud() -> PointCloud {
        PointCloud::new(
            (0..40)
                .map(|i| {
                    let t = i as f64 * 0.37;
                    Point::new(0.2 * i as f64 % 8.0, 3.5 * t.sin(), -1.0 + 0.5 * t.cos(), (i % 7) as f64 / 7.0)
                })
                .collect(),
        )
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let cfg = ExtractConfig::parse(DOC).unwrap();
        assert_eq!(cfg.dsa.keypoints, 4);
        assert_eq!(cfg.export.attention, AttentionExport::First);
        let err = ExtractConfig::parse(&DOC.replace("dim = 8", "dim = 8\nwidth = 3")).unwrap_err();
        assert!(err.to_string().contains("encoder"), "{err}");
    }

    #[test]
    fn runs_both_methods() {
        let cfg = ExtractConfig::parse(DOC).unwrap();
        for method in [Method::Fsa, Method::Dsa] {
            let ex = run_extract(&cloud(), &cfg, method).unwrap();
            assert_eq!(ex.layers.len(), 2);
            assert_eq!(ex.after.n(), ex.before.n());
        }
    }

    #[test]
    fn empty_scan_names_stage() {
        let cfg = ExtractConfig::parse(DOC).unwrap();
        let err = run_extract(&PointCloud::default(), &cfg, Method::Dsa).unwrap_err();
        assert_eq!(err.stage, "crop");
    }
}
