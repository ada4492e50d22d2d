//! Analytic parameter and FLOP accounting for detector architectures.
//!
//! Layer conventions are fixed in `counting_rules.toml`; every report
//! itemises each term so per-stage sums reproduce the totals exactly.

mod config;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use config::{
    load_config, parse_config, serialize_config, ArchConfig, AttentionKind, AttentionSpec,
    Backbone, BevSpec, InputStats, PfnSpec, PointNetSpec, SparseSpec,
};

use crate::error::{Error, Result};

const BUILTIN_RULES: &str = include_str!("counting_rules.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadCost {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingRules {
    pub flops_per_mac: u64,
    pub norm_params_per_channel: u64,
    pub count_sparse_params: bool,
    pub heads: BTreeMap<String, HeadCost>,
}

impl CountingRules {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_RULES).expect("shipped counting rules parse")
    }

    pub fn builtin_text() -> &'static str {
        BUILTIN_RULES
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        toml::from_str(doc).map_err(|e| Error::Config {
            path: "<counting rules>".into(),
            message: e.to_string(),
        })
    }

    fn head(&self, b: Backbone) -> HeadCost {
        self.heads.get(b.key()).copied().unwrap_or(HeadCost {
            params: 0,
            flops: 0,
        })
    }
}

impl Default for CountingRules {
    fn default() -> Self {
        Self::builtin()
    }
}

/// One itemised term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostItem {
    pub stage: String,
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// False when the rules keep the parameters out of the totals.
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub flops_per_mac: u64,
    pub items: Vec<CostItem>,
    pub total_params: u64,
    pub total_flops: u64,
    /// Parameters itemised but excluded by the rules.
    pub excluded_params: u64,
}

impl CostReport {
    /// `(stage, params, flops)` in first-appearance order.
    pub fn stage_totals(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for it in &self.items {
            let p = if it.counted { it.params } else { 0 };
            match out.iter_mut().find(|(s, _, _)| *s == it.stage) {
                Some(row) => {
                    row.1 += p;
                    row.2 += it.flops;
                }
                None => out.push((it.stage.clone(), p, it.flops)),
            }
        }
        out
    }

    /// Sum of `flops` over items whose name is `term` or ends in `.term`.
    pub fn flops_named(&self, term: &str) -> u64 {
        let suffix = format!(".{term}");
        self.items
            .iter()
            .filter(|i| i.name == term || i.name.ends_with(&suffix))
            .map(|i| i.flops)
            .sum()
    }

    pub fn attention_score_flops(&self) -> u64 {
        self.flops_named("scores")
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} (1 MAC = {} FLOPs)",
            self.config, self.flops_per_mac
        )?;
        writeln!(f, "{:<28} {:>14} {:>18}", "stage", "params", "FLOPs")?;
        for (stage, p, fl) in self.stage_totals() {
            writeln!(f, "{stage:<28} {p:>14} {fl:>18}")?;
        }
        writeln!(
            f,
            "{:<28} {:>14} {:>18}",
            "total", self.total_params, self.total_flops
        )?;
        if self.excluded_params > 0 {
            writeln!(
                f,
                "{:<28} {:>14}",
                "excluded (sparse 3D)", self.excluded_params
            )?;
        }
        write!(
            f,
            "{:<28} {:>13.3}M {:>17.2}G",
            "",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )
    }
}

/// Attention-score FLOPs for `n` nodes of context dimension `d`: `2 n^2 d`.
pub fn attention_score_flops(n: usize, d: usize) -> u64 {
    2 * (n as u64) * (n as u64) * (d as u64)
}

/// FLOPs of one dense linear map applied to `n` rows.
pub fn linear_flops(n: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (n as u64) * (d_in as u64) * (d_out as u64)
}

/// Parameters of one attention layer with context dim `d` inserted on
/// `in_dim` channels: Q, K, V, output maps, position encoding, group norm.
pub fn fsa_layer_params(in_dim: usize, d: usize) -> u64 {
    let (i, d) = (in_dim as u64, d as u64);
    4 * i * d + 3 * i + 2 * i
}

/// Extra parameters one deformable layer adds on top of [`fsa_layer_params`].
pub fn dsa_extra_params(in_dim: usize, interp_dims: &[usize]) -> u64 {
    let i = in_dim as u64;
    let up: u64 = interp_dims.iter().map(|&o| i * o as u64).sum();
    3 * i + 3 + i * i + up
}

struct Builder<'a> {
    rules: &'a CountingRules,
    items: Vec<CostItem>,
}

impl Builder<'_> {
    fn push(&mut self, stage: &str, name: impl Into<String>, params: u64, macs: u64) {
        self.push_raw(stage, name, params, macs * self.rules.flops_per_mac, true);
    }

    fn push_raw(&mut self, stage: &str, name: impl Into<String>, params: u64, flops: u64, counted: bool) {
        self.items.push(CostItem {
            stage: stage.to_string(),
            name: name.into(),
            params,
            flops,
            counted,
        });
    }

    fn norm(&self, c: usize) -> u64 {
        self.rules.norm_params_per_channel * c as u64
    }
}

fn pfn_items(b: &mut Builder, p: &PfnSpec, nodes: usize) {
    let mut cin = p.in_features;
    let rows = (nodes * p.points_per_node) as u64;
    for (i, &f) in p.filters.iter().enumerate() {
        let w = (cin * f) as u64;
        b.push("pfn", format!("linear{i}"), w + b.norm(f), rows * w);
        cin = f;
    }
}

fn level_cells(grid: &[usize; 3], level: usize) -> u64 {
    grid.iter()
        .map(|&g| g.div_ceil(1 << level) as u64)
        .product()
}

fn sparse_items(b: &mut Builder, s: &SparseSpec) {
    let counted = b.rules.count_sparse_params;
    let fpm = b.rules.flops_per_mac;
    let sites = |level: usize| -> u64 {
        (s.occupancy[level] * level_cells(&s.grid, level) as f64).round() as u64
    };
    let conv = |b: &mut Builder, name: String, cin: usize, cout: usize, kvol: u64, level: usize| {
        let w = (cin * cout) as u64 * kvol;
        let params = w + b.norm(cout);
        b.push_raw("sparse3d", name, params, w * sites(level) * fpm, counted);
    };
    let c0 = s.block_channels[0];
    conv(b, "conv_input".into(), s.in_channels, c0, 27, 0);
    let mut cin = c0;
    for (blk, (&layers, &c)) in s.block_layers.iter().zip(&s.block_channels).enumerate() {
        for l in 0..layers {
            let from = if l == 0 { cin } else { c };
            let name = if blk > 0 && l == 0 {
                format!("block{blk}.down")
            } else {
                format!("block{blk}.subm{l}")
            };
            conv(b, name, from, c, 27, blk);
        }
        cin = c;
    }
    let last = s.block_layers.len() - 1;
    conv(b, "conv_out".into(), cin, s.out_channels, 3, last);
}

fn bev_items(b: &mut Builder, s: &BevSpec) {
    let (mut h, mut w) = (s.map_size[0], s.map_size[1]);
    let mut cin = s.in_channels;
    let mut levels = Vec::with_capacity(s.layer_nums.len());
    for (i, ((&n, &stride), &o)) in s
        .layer_nums
        .iter()
        .zip(&s.layer_strides)
        .zip(&s.num_filters)
        .enumerate()
    {
        h = (h + 2 - 3) / stride + 1;
        w = (w + 2 - 3) / stride + 1;
        let hw = (h * w) as u64;
        let first = (cin * o * 9) as u64;
        b.push("bev2d", format!("block{i}.conv0"), first + b.norm(o), first * hw);
        let rest = (o * o * 9) as u64;
        for l in 1..=n {
            b.push("bev2d", format!("block{i}.conv{l}"), rest + b.norm(o), rest * hw);
        }
        levels.push((o, hw));
        cin = o;
    }
    for (i, (((o, hw), &u), &uo)) in levels
        .iter()
        .zip(&s.upsample_strides)
        .zip(&s.num_upsample_filters)
        .enumerate()
    {
        let wts = (o * uo * u * u) as u64;
        b.push("bev2d", format!("deblock{i}"), wts + b.norm(uo), wts * hw);
    }
}

fn mlp_items(b: &mut Builder, stage: &str, prefix: &str, cin: usize, widths: &[usize], rows: u64) {
    let mut c = cin;
    for (l, &o) in widths.iter().enumerate() {
        let w = (c * o) as u64;
        b.push(stage, format!("{prefix}.{l}"), w + b.norm(o), rows * w);
        c = o;
    }
}

fn pointnet_items(b: &mut Builder, p: &PointNetSpec) {
    let out = p.level_channels();
    let mut cin = p.in_channels;
    for (l, scales) in p.mlps.iter().enumerate() {
        for (s, widths) in scales.iter().enumerate() {
            let rows = (p.npoints[l] * p.nsamples[l][s]) as u64;
            mlp_items(b, "pointnet", &format!("sa{l}.scale{s}"), cin + 3, widths, rows);
        }
        cin = out[l];
    }
    let levels = p.npoints.len();
    let mut skip = vec![p.in_channels];
    skip.extend_from_slice(&out[..levels - 1]);
    for k in (0..levels).rev() {
        let pre = if k + 1 < levels {
            *p.fp_mlps[k + 1].last().expect("validated")
        } else {
            out[levels - 1]
        };
        let rows = if k == 0 { p.points } else { p.npoints[k - 1] } as u64;
        mlp_items(b, "pointnet", &format!("fp{k}"), pre + skip[k], &p.fp_mlps[k], rows);
    }
}

fn attention_items(b: &mut Builder, idx: usize, a: &AttentionSpec, input: &InputStats) {
    let stage = format!("attention{idx}.{}", a.stage);
    let n = a.nodes(input);
    let t = match a.kind {
        AttentionKind::Fsa => n,
        AttentionKind::Dsa => a.keypoints.expect("validated"),
    } as u64;
    let (i, d) = (a.in_dim as u64, a.dim as u64);
    for l in 0..a.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        b.push(&stage, p("position"), 3 * i, t * 3 * i);
        b.push(&stage, p("qkv"), 3 * i * d, 3 * t * i * d);
        b.push_raw(&stage, p("scores"), 0, attention_score_flops(t as usize, a.dim), true);
        b.push(&stage, p("context"), 0, t * t * d);
        b.push(&stage, p("output"), d * i, t * d * i);
        b.push(&stage, p("group_norm"), b.norm(a.in_dim), 0);
        if a.kind == AttentionKind::Dsa {
            let nm = n as u64 * t;
            let k = a.deform_k as u64;
            b.push(&stage, p("sampling"), 0, 3 * nm);
            b.push(
                &stage,
                p("deformation"),
                3 * i + 3,
                3 * nm + t * k * (3 * i + 3),
            );
            b.push(&stage, p("pooling"), i * i, 3 * nm + n as u64 * i * i);
            for (s, (&o, &ns)) in a.interp_mlp_dim.iter().zip(&a.interp_samples).enumerate() {
                let o = o as u64;
                b.push(
                    &stage,
                    p(&format!("upsample{s}")),
                    i * o,
                    3 * nm + n as u64 * (ns as u64 * i + i * o),
                );
            }
        }
    }
}

/// Itemised parameters and FLOPs under the given rules, with each stage
/// evaluated at the config's own input statistics.
pub fn cost_report(cfg: &ArchConfig, rules: &CountingRules) -> Result<CostReport> {
    cfg.validate()?;
    let mut b = Builder {
        rules,
        items: Vec::new(),
    };
    if let Some(p) = &cfg.pfn {
        pfn_items(&mut b, p, cfg.input.nodes);
    }
    if let Some(s) = &cfg.sparse3d {
        sparse_items(&mut b, s);
    }
    if let Some(s) = &cfg.bev2d {
        bev_items(&mut b, s);
    }
    if let Some(p) = &cfg.pointnet {
        pointnet_items(&mut b, p);
    }
    for (i, a) in cfg.attention.iter().enumerate() {
        attention_items(&mut b, i, a, &cfg.input);
    }
    let head = rules.head(cfg.backbone);
    b.push_raw("head", "head", head.params, head.flops, true);

    let total_params = b.items.iter().filter(|i| i.counted).map(|i| i.params).sum();
    let excluded_params = b.items.iter().filter(|i| !i.counted).map(|i| i.params).sum();
    let total_flops = b.items.iter().map(|i| i.flops).sum();
    Ok(CostReport {
        config: cfg.name.clone(),
        flops_per_mac: rules.flops_per_mac,
        items: b.items,
        total_params,
        total_flops,
        excluded_params,
    })
}

/// Parameter report under the shipped rules.
pub fn count_params(cfg: &ArchConfig) -> Result<CostReport> {
    cost_report(cfg, &CountingRules::builtin())
}

/// FLOP report with every attention stage evaluated at `n` nodes.
pub fn count_flops(cfg: &ArchConfig, n: usize) -> Result<CostReport> {
    if n == 0 {
        return Err(Error::arg("node count must be positive"));
    }
    cost_report(&cfg.with_nodes(n), &CountingRules::builtin())
}

/// Relative change from a baseline; negative values are reductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub variant: String,
    pub baseline_params: u64,
    pub variant_params: u64,
    pub baseline_flops: u64,
    pub variant_flops: u64,
    pub params_change_pct: f64,
    pub flops_change_pct: f64,
}

pub fn percent_change(base: u64, variant: u64) -> f64 {
    if base == 0 {
        return 0.0;
    }
    (variant as f64 - base as f64) / base as f64 * 100.0
}

pub fn compare_reports(a: &CostReport, b: &CostReport) -> Comparison {
    Comparison {
        baseline: a.config.clone(),
        variant: b.config.clone(),
        baseline_params: a.total_params,
        variant_params: b.total_params,
        baseline_flops: a.total_flops,
        variant_flops: b.total_flops,
        params_change_pct: percent_change(a.total_params, b.total_params),
        flops_change_pct: percent_change(a.total_flops, b.total_flops),
    }
}

/// Compare two configs, each at its own input statistics, or at `n` nodes
/// when given.
pub fn compare(a: &ArchConfig, b: &ArchConfig, n: Option<usize>) -> Result<Comparison> {
    let (ra, rb) = match n {
        Some(n) => (count_flops(a, n)?, count_flops(b, n)?),
        None => (count_params(a)?, count_params(b)?),
    };
    Ok(compare_reports(&ra, &rb))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} -> {:<16} params {:>8.3}M -> {:>8.3}M ({:+.1}%)  FLOPs {:>8.2}G -> {:>8.2}G ({:+.1}%)",
            self.baseline,
            self.variant,
            self.baseline_params as f64 / 1e6,
            self.variant_params as f64 / 1e6,
            self.params_change_pct,
            self.baseline_flops as f64 / 1e9,
            self.variant_flops as f64 / 1e9,
            self.flops_change_pct
        )
    }
}
