//! Architecture description consumed by the cost model.
//!
//! Documents are TOML. Every table rejects unknown keys and every error
//! carries the dotted path of the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    PointPillars,
    Second,
    PointRcnn,
    PvRcnn,
}

impl Backbone {
    pub fn key(self) -> &'static str {
        match self {
            Backbone::PointPillars => "pointpillars",
            Backbone::Second => "second",
            Backbone::PointRcnn => "pointrcnn",
            Backbone::PvRcnn => "pvrcnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Fsa,
    Dsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    pub backbone: Backbone,
    pub input: InputStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pfn: Option<PfnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse3d: Option<SparseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev2d: Option<BevSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointnet: Option<PointNetSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<AttentionSpec>,
}

/// Assumed input statistics for FLOP evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputStats {
    /// Non-empty nodes fed to attention stages.
    pub nodes: usize,
}

/// Per-point linear layers followed by a max over each pillar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfnSpec {
    pub in_features: usize,
    pub filters: Vec<usize>,
    pub points_per_node: usize,
}

/// Sparse 3D convolution stack: an input conv, `block_layers.len()` blocks
/// (every block after the first opens with a stride-2 conv) and an output
/// conv with a (3, 1, 1) kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSpec {
    pub in_channels: usize,
    pub block_layers: Vec<usize>,
    pub block_channels: Vec<usize>,
    pub out_channels: usize,
    /// Full-resolution grid (x, y, z) cells.
    pub grid: [usize; 3],
    /// Active-site fraction per block.
    pub occupancy: Vec<f64>,
}

/// Strided 3x3 conv blocks plus transposed-conv upsampling branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevSpec {
    pub in_channels: usize,
    /// (height, width) of the input map.
    pub map_size: [usize; 2],
    pub layer_nums: Vec<usize>,
    pub layer_strides: Vec<usize>,
    pub num_filters: Vec<usize>,
    pub upsample_strides: Vec<usize>,
    pub num_upsample_filters: Vec<usize>,
}

/// Multi-scale set abstraction levels and feature propagation layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointNetSpec {
    pub points: usize,
    /// Per-point features besides xyz.
    pub in_channels: usize,
    pub npoints: Vec<usize>,
    pub radii: Vec<Vec<f64>>,
    pub nsamples: Vec<Vec<usize>>,
    /// `mlps[level][scale]` lists layer widths.
    pub mlps: Vec<Vec<Vec<usize>>>,
    /// Shallowest first.
    pub fp_mlps: Vec<Vec<usize>>,
}

impl PointNetSpec {
    /// Output channels of each abstraction level.
    pub fn level_channels(&self) -> Vec<usize> {
        self.mlps
            .iter()
            .map(|scales| scales.iter().map(|m| *m.last().unwrap_or(&0)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub stage: String,
    pub kind: AttentionKind,
    pub layers: usize,
    pub heads: usize,
    /// Context (projection) dimension.
    pub dim: usize,
    /// Feature channels at the insertion point.
    pub in_dim: usize,
    /// Overrides `input.nodes` for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deform_radius: Vec<f64>,
    #[serde(default = "default_k")]
    pub deform_k: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool_radius: Vec<f64>,
    #[serde(default = "default_k")]
    pub pool_k: usize,
    /// One entry per interpolation scale.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interp_mlp_dim: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interp_radius: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interp_samples: Vec<usize>,
}

fn default_k() -> usize {
    16
}

impl AttentionSpec {
    pub fn nodes(&self, input: &InputStats) -> usize {
        self.nodes.unwrap_or(input.nodes)
    }
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn positive(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(cfg_err(path, "must be positive"));
    }
    Ok(())
}

fn all_positive(path: &str, vs: &[usize]) -> Result<()> {
    if vs.is_empty() {
        return Err(cfg_err(path, "must not be empty"));
    }
    for (i, v) in vs.iter().enumerate() {
        positive(&format!("{path}[{i}]"), *v)?;
    }
    Ok(())
}

fn all_positive_f(path: &str, vs: &[f64]) -> Result<()> {
    for (i, v) in vs.iter().enumerate() {
        if !(v.is_finite() && *v > 0.0) {
            return Err(cfg_err(format!("{path}[{i}]"), "must be a positive number"));
        }
    }
    Ok(())
}

fn same_len(path: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(cfg_err(
            path,
            format!("expected {expected} entries, found {len}"),
        ));
    }
    Ok(())
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(cfg_err("name", "must not be empty"));
        }
        positive("input.nodes", self.input.nodes)?;
        if let Some(p) = &self.pfn {
            positive("pfn.in_features", p.in_features)?;
            all_positive("pfn.filters", &p.filters)?;
            positive("pfn.points_per_node", p.points_per_node)?;
        }
        if let Some(s) = &self.sparse3d {
            positive("sparse3d.in_channels", s.in_channels)?;
            all_positive("sparse3d.block_layers", &s.block_layers)?;
            all_positive("sparse3d.block_channels", &s.block_channels)?;
            same_len(
                "sparse3d.block_channels",
                s.block_channels.len(),
                s.block_layers.len(),
            )?;
            positive("sparse3d.out_channels", s.out_channels)?;
            all_positive("sparse3d.grid", &s.grid)?;
            same_len("sparse3d.occupancy", s.occupancy.len(), s.block_layers.len())?;
            for (i, o) in s.occupancy.iter().enumerate() {
                if !(o.is_finite() && *o > 0.0 && *o <= 1.0) {
                    return Err(cfg_err(
                        format!("sparse3d.occupancy[{i}]"),
                        "must lie in (0, 1]",
                    ));
                }
            }
        }
        if let Some(b) = &self.bev2d {
            positive("bev2d.in_channels", b.in_channels)?;
            all_positive("bev2d.map_size", &b.map_size)?;
            all_positive("bev2d.layer_nums", &b.layer_nums)?;
            let levels = b.layer_nums.len();
            for (name, v) in [
                ("bev2d.layer_strides", &b.layer_strides),
                ("bev2d.num_filters", &b.num_filters),
                ("bev2d.upsample_strides", &b.upsample_strides),
                ("bev2d.num_upsample_filters", &b.num_upsample_filters),
            ] {
                all_positive(name, v)?;
                same_len(name, v.len(), levels)?;
            }
        }
        if let Some(p) = &self.pointnet {
            positive("pointnet.points", p.points)?;
            all_positive("pointnet.npoints", &p.npoints)?;
            let levels = p.npoints.len();
            same_len("pointnet.radii", p.radii.len(), levels)?;
            same_len("pointnet.nsamples", p.nsamples.len(), levels)?;
            same_len("pointnet.mlps", p.mlps.len(), levels)?;
            same_len("pointnet.fp_mlps", p.fp_mlps.len(), levels)?;
            for l in 0..levels {
                let scales = p.mlps[l].len();
                if scales == 0 {
                    return Err(cfg_err(format!("pointnet.mlps[{l}]"), "needs at least one scale"));
                }
                all_positive_f(&format!("pointnet.radii[{l}]"), &p.radii[l])?;
                same_len(&format!("pointnet.radii[{l}]"), p.radii[l].len(), scales)?;
                all_positive(&format!("pointnet.nsamples[{l}]"), &p.nsamples[l])?;
                same_len(&format!("pointnet.nsamples[{l}]"), p.nsamples[l].len(), scales)?;
                for (s, m) in p.mlps[l].iter().enumerate() {
                    all_positive(&format!("pointnet.mlps[{l}][{s}]"), m)?;
                }
                all_positive(&format!("pointnet.fp_mlps[{l}]"), &p.fp_mlps[l])?;
            }
        }
        for (i, a) in self.attention.iter().enumerate() {
            let path = |f: &str| format!("attention[{i}].{f}");
            positive(&path("layers"), a.layers)?;
            positive(&path("heads"), a.heads)?;
            positive(&path("dim"), a.dim)?;
            positive(&path("in_dim"), a.in_dim)?;
            if a.dim % a.heads != 0 {
                return Err(cfg_err(
                    path("heads"),
                    format!("dim {} is not divisible by {} heads", a.dim, a.heads),
                ));
            }
            if let Some(n) = a.nodes {
                positive(&path("nodes"), n)?;
            }
            let n = a.nodes(&self.input);
            match a.kind {
                AttentionKind::Fsa => {
                    if a.keypoints.is_some() {
                        return Err(cfg_err(path("keypoints"), "only valid for dsa stages"));
                    }
                }
                AttentionKind::Dsa => {
                    let m = a
                        .keypoints
                        .ok_or_else(|| cfg_err(path("keypoints"), "required for dsa stages"))?;
                    positive(&path("keypoints"), m)?;
                    if m > n {
                        return Err(cfg_err(
                            path("keypoints"),
                            format!("{m} keypoints exceed {n} nodes"),
                        ));
                    }
                    for (f, v) in [
                        ("deform_radius", &a.deform_radius),
                        ("pool_radius", &a.pool_radius),
                        ("interp_radius", &a.interp_radius),
                    ] {
                        if v.is_empty() {
                            return Err(cfg_err(path(f), "required for dsa stages"));
                        }
                        all_positive_f(&path(f), v)?;
                    }
                    positive(&path("deform_k"), a.deform_k)?;
                    positive(&path("pool_k"), a.pool_k)?;
                    let scales = a.interp_radius.len();
                    all_positive(&path("interp_mlp_dim"), &a.interp_mlp_dim)?;
                    same_len(&path("interp_mlp_dim"), a.interp_mlp_dim.len(), scales)?;
                    all_positive(&path("interp_samples"), &a.interp_samples)?;
                    same_len(&path("interp_samples"), a.interp_samples.len(), scales)?;
                }
            }
        }
        Ok(())
    }

    /// Same architecture with every attention stage switched to `kind`.
    pub fn with_kind(&self, kind: AttentionKind, keypoints: Option<usize>) -> ArchConfig {
        let mut out = self.clone();
        for a in &mut out.attention {
            a.kind = kind;
            a.keypoints = keypoints;
        }
        out
    }

    /// Same architecture with every attention stage evaluated at `n` nodes.
    pub fn with_nodes(&self, n: usize) -> ArchConfig {
        let mut out = self.clone();
        out.input.nodes = n;
        for a in &mut out.attention {
            a.nodes = None;
        }
        out
    }
}

/// Parse and validate a TOML architecture document.
pub fn parse_config(doc: &str) -> Result<ArchConfig> {
    let de = toml::Deserializer::parse(doc).map_err(|e| cfg_err("<document>", e.to_string()))?;
    let cfg: ArchConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(path, e.into_inner().message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ArchConfig> {
    let path = path.as_ref();
    let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&doc).map_err(|e| match e {
        Error::Config { path: field, message } => Error::Config {
            path: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn serialize_config(cfg: &ArchConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))
}
