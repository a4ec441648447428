//! Multi-source feature data: cached per-backbone class-token vectors, the
//! MSFV file format, synthetic domains and the ordered task stream.

pub mod format;
mod stream;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{MsdemError, Result};
use crate::numerics::Tensor;

pub use format::{load_feature_file, write_feature_file, FeatureHeader, FeatureReader, FeatureWriter};
pub use stream::{
    build_stream, BackboneEntry, DomainEntry, FileEntry, Manifest, SynthEntry, TaskEntry, TaskStream,
};
pub use synth::{synth_domain, SynthParams, SyntheticDomain, SyntheticSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub dim: usize,
}

/// One sample: each backbone's feature vector plus its global label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub per_backbone: Vec<Vec<f64>>,
    pub label: u32,
    pub domain_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based position in the stream.
    pub task_id: u32,
    pub domain_id: u32,
    pub class_ids: Vec<u32>,
    pub train_count: usize,
    pub test_count: usize,
}

impl TaskSpec {
    /// Position of a global class id within this task's head.
    pub fn position(&self, label: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == label)
    }
}

/// Concatenate backbone features in declaration order.
pub fn fuse_features(record: &FeatureRecord, backbones: &[BackboneSpec]) -> Result<Vec<f64>> {
    if record.per_backbone.len() != backbones.len() {
        return Err(MsdemError::Shape {
            op: "fuse_features",
            lhs: backbones.iter().map(|b| b.dim).collect(),
            rhs: record.per_backbone.iter().map(Vec::len).collect(),
        });
    }
    let mut out = Vec::with_capacity(backbones.iter().map(|b| b.dim).sum());
    for (v, b) in record.per_backbone.iter().zip(backbones) {
        if v.len() != b.dim {
            return Err(MsdemError::Shape {
                op: "fuse_features",
                lhs: backbones.iter().map(|b| b.dim).collect(),
                rhs: record.per_backbone.iter().map(Vec::len).collect(),
            });
        }
        out.extend_from_slice(v);
    }
    Ok(out)
}

/// Fused features of a batch as a `[B × Σdim]` matrix.
pub fn fused_batch(records: &[&FeatureRecord], backbones: &[BackboneSpec]) -> Result<Tensor> {
    if records.is_empty() {
        return Err(MsdemError::invalid("empty batch"));
    }
    let width: usize = backbones.iter().map(|b| b.dim).sum();
    let mut data = Vec::with_capacity(records.len() * width);
    for r in records {
        data.extend(fuse_features(r, backbones)?);
    }
    Tensor::matrix(records.len(), width, data)
}
