//! Per-task expert: an affine adaptive map with a GELU, then a linear
//! classifier over the task's own classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deam::uniform_init;
use crate::error::{MsdemError, Result};
use crate::numerics::{softmax, Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub task_id: u32,
    pub adapt_w: ParamId,
    pub adapt_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
    pub class_ids: Vec<u32>,
    pub input_dim: usize,
    pub d_e: usize,
    pub frozen: bool,
}

pub(crate) fn expert_param_name(task_id: u32, what: &str) -> String {
    format!("expert.{task_id}.{what}")
}

pub fn create_expert<R: Rng>(
    store: &mut ParamStore,
    task_id: u32,
    input_dim: usize,
    d_e: usize,
    class_ids: &[u32],
    rng: &mut R,
) -> Result<Expert> {
    if class_ids.is_empty() {
        return Err(MsdemError::invalid("expert needs a non-empty class set"));
    }
    if input_dim == 0 || d_e == 0 {
        return Err(MsdemError::invalid("expert dimensions must be positive"));
    }
    if store.lookup(&expert_param_name(task_id, "adapt_w")).is_some() {
        return Err(MsdemError::invalid(format!("expert for task {task_id} already exists")));
    }
    let k = class_ids.len();
    let aw = uniform_init(rng, input_dim, d_e, 1.0 / (input_dim as f64).sqrt());
    let cw = uniform_init(rng, d_e, k, 1.0 / (d_e as f64).sqrt());
    Ok(Expert {
        task_id,
        adapt_w: store.add(expert_param_name(task_id, "adapt_w"), aw)?,
        adapt_b: store.add(expert_param_name(task_id, "adapt_b"), Tensor::zeros(&[d_e]))?,
        cls_w: store.add(expert_param_name(task_id, "cls_w"), cw)?,
        cls_b: store.add(expert_param_name(task_id, "cls_b"), Tensor::zeros(&[k]))?,
        class_ids: class_ids.to_vec(),
        input_dim,
        d_e,
        frozen: false,
    })
}

impl Expert {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.adapt_w, self.adapt_b, self.cls_w, self.cls_b]
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Affine map of the flattened attention output, before the activation.
    pub fn pre_activation(&self, g: &mut Graph, z_att: NodeId) -> Result<NodeId> {
        let v = g.value(z_att);
        let numel = v.numel();
        if numel % self.input_dim != 0 {
            return Err(MsdemError::Shape {
                op: "adapt_forward",
                lhs: vec![self.input_dim],
                rhs: v.shape().to_vec(),
            });
        }
        let b = numel / self.input_dim;
        // each record's tokens are contiguous rows, so a reshape flattens them
        if v.shape().len() == 2 && v.rows() % b != 0 {
            return Err(MsdemError::Shape {
                op: "adapt_forward",
                lhs: vec![self.input_dim],
                rhs: v.shape().to_vec(),
            });
        }
        let flat = g.reshape(z_att, vec![b, self.input_dim])?;
        let w = g.param(self.adapt_w)?;
        let bias = g.param(self.adapt_b)?;
        let pre = g.matmul(flat, w)?;
        g.add_bias(pre, bias)
    }

    /// `z̄ = gelu(A·flatten(z_att) + b)`, one row per record.
    pub fn adapt_forward(&self, g: &mut Graph, z_att: NodeId, records: usize) -> Result<NodeId> {
        let numel = g.value(z_att).numel();
        if numel != records * self.input_dim {
            return Err(MsdemError::Shape {
                op: "adapt_forward",
                lhs: vec![records, self.input_dim],
                rhs: g.value(z_att).shape().to_vec(),
            });
        }
        let pre = self.pre_activation(g, z_att)?;
        g.gelu(pre)
    }

    /// Logits `Wᵀ·z + bias` over this expert's classes.
    pub fn logits(&self, g: &mut Graph, representation: NodeId) -> Result<NodeId> {
        let width = g.value(representation).cols();
        if width != self.d_e {
            return Err(MsdemError::Shape {
                op: "classify",
                lhs: vec![self.d_e],
                rhs: vec![width],
            });
        }
        let w = g.param(self.cls_w)?;
        let b = g.param(self.cls_b)?;
        let out = g.matmul(representation, w)?;
        g.add_bias(out, b)
    }

    /// Logits for one representation and the predicted class id.
    pub fn classify(&self, store: &ParamStore, representation: &[f64]) -> Result<(Vec<f64>, u32)> {
        let mut g = Graph::new(store);
        let r = g.constant(Tensor::matrix(1, representation.len(), representation.to_vec())?)?;
        let l = self.logits(&mut g, r)?;
        let logits = g.value(l).data().to_vec();
        let pred = predict_class(&logits, &self.class_ids)?;
        Ok((logits, pred))
    }
}

/// `class_ids[argmax(softmax(logits))]`, lowest index on ties.
pub fn predict_class(logits: &[f64], class_ids: &[u32]) -> Result<u32> {
    if logits.len() != class_ids.len() {
        return Err(MsdemError::Shape {
            op: "predict",
            lhs: vec![class_ids.len()],
            rhs: vec![logits.len()],
        });
    }
    let p = softmax(&Tensor::vector(logits.to_vec())?, 0)?;
    Ok(class_ids[Tensor::argmax(p.data())])
}
