//! Tensor bundles on disk and CSV export.
//!
//! A bundle is two files sharing a stem: `<stem>.bin`, a flat little-endian
//! f64 stream, and `<stem>.json`, a sidecar listing each tensor's name,
//! shape and element offset plus free-form metadata:
//!
//! ```json
//! {"format": "pointctx-tensors", "version": 1, "dtype": "f64-le",
//!  "meta": {...}, "tensors": [{"name": "wq", "shape": [64, 64], "offset": 0}]}
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dsa::{CrossAttention, DsaWeights, Upsampler};
use crate::error::{Error, Result};
use crate::fsa::FsaWeights;
use crate::pcio::FeatureGraph;

pub const BUNDLE_FORMAT: &str = "pointctx-tensors";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named row-major tensors plus metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl TensorBundle {
    pub fn push_matrix(&mut self, name: &str, m: &Array2<f64>) {
        self.tensors.push((
            name.to_string(),
            vec![m.nrows(), m.ncols()],
            m.iter().copied().collect(),
        ));
    }

    pub fn push_vector(&mut self, name: &str, v: &Array1<f64>) {
        self.tensors
            .push((name.to_string(), vec![v.len()], v.to_vec()));
    }

    fn find(&self, name: &str) -> Result<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (_, shape, data) = self.find(name)?;
        if shape.len() != 2 {
            return Err(Error::Format(format!("tensor `{name}` is not a matrix")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.clone())
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let (_, shape, data) = self.find(name)?;
        if shape.len() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a vector")));
        }
        Ok(Array1::from(data.clone()))
    }

    fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|(_, _, d)| d.len()).sum();
        let mut out = Vec::with_capacity(total * 8);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        let sc = Sidecar {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            dtype: "f64-le".into(),
            meta: serde_json::Value::Object(self.meta.clone()),
            tensors,
        };
        serde_json::to_string_pretty(&sc).expect("sidecar serialises")
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let bin = with_ext(stem, "bin");
        let json = with_ext(stem, "json");
        fs::write(&bin, self.to_bytes()).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, self.sidecar_json() + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn read(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let bin = with_ext(stem, "bin");
        let json = with_ext(stem, "json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sc: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
        if sc.format != BUNDLE_FORMAT || sc.dtype != "f64-le" {
            return Err(Error::Format(format!("{} is not a tensor bundle", json.display())));
        }
        if sc.version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle version {} (expected {BUNDLE_VERSION})",
                sc.version
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("{} length is not a multiple of 8", bin.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = Vec::with_capacity(sc.tensors.len());
        for t in sc.tensors {
            let count: usize = t.shape.iter().product();
            let end = t.offset.checked_add(count).filter(|&e| e <= values.len()).ok_or_else(|| {
                Error::Format(format!("tensor `{}` runs past the end of the data", t.name))
            })?;
            tensors.push((t.name, t.shape, values[t.offset..end].to_vec()));
        }
        let meta = match sc.meta {
            serde_json::Value::Object(m) => m,
            _ => serde_json::Map::new(),
        };
        Ok(Self { meta, tensors })
    }
}

impl FsaWeights {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "fsa".into());
        b.meta.insert("heads".into(), self.heads.into());
        b.meta.insert("groups".into(), self.groups.into());
        b.meta.insert("eps".into(), self.eps.into());
        for (name, shape, data) in self.named_tensors() {
            b.tensors.push((name.to_string(), shape, data));
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        Self::from_bundle_prefixed(b, "")
    }

    fn from_bundle_prefixed(b: &TensorBundle, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let w = FsaWeights {
            heads: b.meta_usize(&key("heads"))?,
            groups: b.meta_usize(&key("groups"))?,
            eps: b.meta_f64(&key("eps"))?,
            wq: b.matrix(&key("wq"))?,
            wk: b.matrix(&key("wk"))?,
            wv: b.matrix(&key("wv"))?,
            wo: b.matrix(&key("wo"))?,
            wpos: b.matrix(&key("wpos"))?,
            gamma: b.vector(&key("gamma"))?,
            beta: b.vector(&key("beta"))?,
        };
        w.validate()?;
        Ok(w)
    }
}

impl DsaWeights {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "dsa".into());
        b.meta.insert("fsa.heads".into(), self.fsa.heads.into());
        b.meta.insert("fsa.groups".into(), self.fsa.groups.into());
        b.meta.insert("fsa.eps".into(), self.fsa.eps.into());
        for (name, shape, data) in self.fsa.named_tensors() {
            b.tensors.push((format!("fsa.{name}"), shape, data));
        }
        b.push_matrix("w_offset", &self.w_offset);
        b.push_vector("w_align", &self.w_align);
        b.push_matrix("w_out", &self.w_out);
        match &self.upsampler {
            Upsampler::Idw {
                radius,
                max_samples,
                mlp,
            } => {
                b.meta.insert("upsampler".into(), "idw".into());
                b.meta.insert("idw.radius".into(), (*radius).into());
                b.meta.insert("idw.max_samples".into(), (*max_samples).into());
                b.push_matrix("idw.mlp", mlp);
            }
            Upsampler::Attention(c) => {
                b.meta.insert("upsampler".into(), "attention".into());
                b.push_matrix("up.wq", &c.wq);
                b.push_matrix("up.wk", &c.wk);
                b.push_matrix("up.wv", &c.wv);
            }
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let fsa = FsaWeights::from_bundle_prefixed(b, "fsa.")?;
        let upsampler = match b.meta.get("upsampler").and_then(|v| v.as_str()) {
            Some("idw") => Upsampler::Idw {
                radius: b.meta_f64("idw.radius")?,
                max_samples: b.meta_usize("idw.max_samples")?,
                mlp: b.matrix("idw.mlp")?,
            },
            Some("attention") => Upsampler::Attention(CrossAttention {
                wq: b.matrix("up.wq")?,
                wk: b.matrix("up.wk")?,
                wv: b.matrix("up.wv")?,
            }),
            _ => return Err(Error::Format("missing or unknown upsampler".into())),
        };
        let w = DsaWeights {
            fsa,
            w_offset: b.matrix("w_offset")?,
            w_align: b.vector("w_align")?,
            w_out: b.matrix("w_out")?,
            upsampler,
        };
        w.validate()?;
        Ok(w)
    }
}

impl FeatureGraph {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::default();
        b.meta.insert("kind".into(), "feature_graph".into());
        b.meta.insert("n".into(), self.n().into());
        b.meta.insert("d".into(), self.d().into());
        b.push_matrix("features", &self.features);
        b.push_matrix("positions", &self.positions);
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        FeatureGraph::new(b.matrix("features")?, b.matrix("positions")?)
    }
}

/// Rows of comma-separated values in shortest round-trip notation.
pub fn matrix_csv(m: &Array2<f64>) -> String {
    let mut s = String::with_capacity(m.len() * 12);
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix_csv(m)).map_err(|e| Error::io(path, e))
}

/// One `<prefix>_head<h>.csv` per map; returns the written paths.
pub fn write_attention_csvs(
    dir: impl AsRef<Path>,
    prefix: &str,
    maps: &[Array2<f64>],
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    maps.iter()
        .enumerate()
        .map(|(h, m)| {
            let p = dir.join(format!("{prefix}_head{h}.csv"));
            write_matrix_csv(&p, m)?;
            Ok(p)
        })
        .collect()
}
