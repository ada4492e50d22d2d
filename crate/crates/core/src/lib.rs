//! Point-cloud context aggregation built from self-attention blocks over
//! discretised scans. The `costmodel` module counts parameters and FLOPs of
//! detector architectures that use these blocks.

pub mod bench;
pub mod check;
pub mod costmodel;
pub mod dsa;
pub mod error;
pub mod extract;
pub mod fsa;
pub mod geom;
pub mod init;
pub mod pcio;
pub mod reference;
pub mod serialize;

pub use dsa::{dsa_forward, DsaConfig, DsaOutput, DsaWeights, UpsampleMode, Upsampler};
pub use error::{Error, Result};
pub use fsa::{fsa_backward, fsa_forward, AttentionOutput, ForwardOptions, FsaWeights};
pub use geom::{ball_query, fps, knn, IndexSet, Neighborhood};
pub use pcio::{discretize, FeatureGraph, GridMode, GridSpec, PointCloud};
