//! Dynamic expandable attention: one multi-head self-attention block per
//! task, attending over one token per backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsdemError, Result};
use crate::numerics::{attention, matmul, Graph, NodeId, ParamId, ParamStore, Tensor};

/// `U(-scale, scale)` matrix.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub task_id: u32,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Per-backbone `[dim_j × token_dim]` maps; empty when all backbones
    /// already share `token_dim`.
    pub projections: Vec<ParamId>,
    pub backbone_dims: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub token_dim: usize,
    pub frozen: bool,
}

/// Token width used for a set of backbones: the shared dim when all agree,
/// otherwise `requested` or the smallest dim.
pub fn token_width(backbone_dims: &[usize], requested: Option<usize>) -> usize {
    let first = backbone_dims[0];
    if backbone_dims.iter().all(|&d| d == first) {
        first
    } else {
        requested.unwrap_or_else(|| *backbone_dims.iter().min().expect("non-empty"))
    }
}

pub(crate) fn block_param_name(task_id: u32, what: &str) -> String {
    format!("deam.{task_id}.{what}")
}

pub fn create_attention_block<R: Rng>(
    store: &mut ParamStore,
    task_id: u32,
    backbone_dims: &[usize],
    token_dim: usize,
    heads: usize,
    rng: &mut R,
) -> Result<AttentionBlock> {
    if backbone_dims.is_empty() {
        return Err(MsdemError::invalid("attention block needs at least one backbone"));
    }
    if store.lookup(&block_param_name(task_id, "wq")).is_some() {
        return Err(MsdemError::invalid(format!("attention block for task {task_id} already exists")));
    }
    if heads == 0 || token_dim % heads != 0 {
        return Err(MsdemError::invalid(format!(
            "token width {token_dim} is not divisible by {heads} heads"
        )));
    }
    let homogeneous = backbone_dims.iter().all(|&d| d == token_dim);
    let mut projections = Vec::new();
    if !homogeneous {
        for (j, &d) in backbone_dims.iter().enumerate() {
            let w = uniform_init(rng, d, token_dim, 1.0 / (d as f64).sqrt());
            projections.push(store.add(block_param_name(task_id, &format!("proj{j}")), w)?);
        }
    }
    let scale = 1.0 / (token_dim as f64).sqrt();
    let mut mk = |what: &str, rng: &mut R| store.add(block_param_name(task_id, what), uniform_init(rng, token_dim, token_dim, scale));
    let wq = mk("wq", rng)?;
    let wk = mk("wk", rng)?;
    let wv = mk("wv", rng)?;
    Ok(AttentionBlock {
        task_id,
        wq,
        wk,
        wv,
        projections,
        backbone_dims: backbone_dims.to_vec(),
        heads,
        head_dim: token_dim / heads,
        token_dim,
        frozen: false,
    })
}

/// Split a fused vector into one token per backbone. All backbone dims must
/// be equal; heterogeneous backbones go through a block's projections.
pub fn tokenize(z_f: &[f64], backbone_dims: &[usize]) -> Result<Tensor> {
    let total: usize = backbone_dims.iter().sum();
    if backbone_dims.is_empty() || total != z_f.len() {
        return Err(MsdemError::Shape {
            op: "tokenize",
            lhs: backbone_dims.to_vec(),
            rhs: vec![z_f.len()],
        });
    }
    let d = backbone_dims[0];
    if backbone_dims.iter().any(|&x| x != d) {
        return Err(MsdemError::invalid(format!(
            "backbone dims {backbone_dims:?} differ; a projection is required"
        )));
    }
    Tensor::matrix(backbone_dims.len(), d, z_f.to_vec())
}

impl AttentionBlock {
    pub fn n_tokens(&self) -> usize {
        self.backbone_dims.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.projections.clone();
        ids.extend([self.wq, self.wk, self.wv]);
        ids
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// `[B × Σdim]` fused features to `[B·n × token_dim]` tokens.
    pub fn tokenize_node(&self, g: &mut Graph, fused: NodeId) -> Result<NodeId> {
        let (b, width) = g.value(fused).as_2d("tokenize")?;
        let total: usize = self.backbone_dims.iter().sum();
        if width != total {
            return Err(MsdemError::Shape {
                op: "tokenize",
                lhs: vec![b, total],
                rhs: vec![b, width],
            });
        }
        if self.projections.is_empty() {
            return g.reshape(fused, vec![b * self.n_tokens(), self.token_dim]);
        }
        let mut parts = Vec::with_capacity(self.n_tokens());
        let mut start = 0;
        for (j, &d) in self.backbone_dims.iter().enumerate() {
            let slice = g.slice_cols(fused, start, d)?;
            let p = g.param(self.projections[j])?;
            parts.push(g.matmul(slice, p)?);
            start += d;
        }
        g.interleave_rows(&parts)
    }

    /// Self-attention over tokens `[B·n × token_dim]`, per record.
    pub fn attend_node(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
        let width = g.value(tokens).cols();
        if width != self.token_dim {
            return Err(MsdemError::Shape {
                op: "apply_attention",
                lhs: vec![self.token_dim],
                rhs: vec![width],
            });
        }
        let (wq, wk, wv) = (g.param(self.wq)?, g.param(self.wk)?, g.param(self.wv)?);
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        g.attention(q, k, v, self.n_tokens(), self.heads, self.scale())
    }

    /// Attention output for one record's token matrix, plus per-head weights.
    pub fn apply_attention(&self, store: &ParamStore, tokens: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if tokens.cols() != self.token_dim {
            return Err(MsdemError::Shape {
                op: "apply_attention",
                lhs: vec![self.token_dim],
                rhs: tokens.shape().to_vec(),
            });
        }
        let q = matmul(tokens, store.value(self.wq))?;
        let k = matmul(tokens, store.value(self.wk))?;
        let v = matmul(tokens, store.value(self.wv))?;
        attention(&q, &k, &v, self.heads, self.scale())
    }
}

/// Freeze a completed task's block. The active task's block cannot be frozen.
pub fn freeze_block(store: &mut ParamStore, block: &mut AttentionBlock, active_task: u32) -> Result<()> {
    if block.task_id >= active_task {
        return Err(MsdemError::invalid(format!(
            "block of task {} is still training (active task {active_task})",
            block.task_id
        )));
    }
    for id in block.param_ids() {
        store.freeze(id);
    }
    block.frozen = true;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn block(dims: &[usize], heads: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut s = ParamStore::new();
        let w = token_width(dims, None);
        let b = create_attention_block(&mut s, 1, dims, w, heads, &mut rng_for(seed, &[])).unwrap();
        (s, b)
    }

    #[test]
    fn head_divisibility() {
        let (_, b) = block(&[768, 768], 32, 1);
        assert_eq!(b.head_dim, 24);
        let mut s = ParamStore::new();
        assert!(create_attention_block(&mut s, 1, &[768, 768], 768, 7, &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn duplicate_task_rejected() {
        let (mut s, _) = block(&[4, 4], 2, 1);
        assert!(create_attention_block(&mut s, 1, &[4, 4], 4, 2, &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (s1, b1) = block(&[8, 8], 2, 5);
        let (s2, b2) = block(&[8, 8], 2, 5);
        for (a, b) in b1.param_ids().into_iter().zip(b2.param_ids()) {
            assert_eq!(s1.value(a), s2.value(b));
        }
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        let t = tokenize(&[1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.shape(), &[1, 3]);
        assert!(tokenize(&[1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(tokenize(&[1.0, 2.0, 3.0], &[2, 1]).is_err());
    }

    #[test]
    fn heterogeneous_dims_project_to_common_width() {
        let (s, b) = block(&[768, 1024], 4, 3);
        assert_eq!(b.token_dim, 768);
        assert_eq!(b.projections.len(), 2);
        let mut g = Graph::new(&s);
        let fused = g.constant(Tensor::full(&[1, 1792], 0.01)).unwrap();
        let tok = b.tokenize_node(&mut g, fused).unwrap();
        assert_eq!(g.value(tok).shape(), &[2, 768]);
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let (s, b) = block(&[4], 2, 9);
        let tokens = Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (out, w) = b.apply_attention(&s, &tokens).unwrap();
        let v = matmul(&tokens, s.value(b.wv)).unwrap();
        assert_eq!(out, v);
        assert!(w.iter().all(|h| h.data() == [1.0]));
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let (s, b) = block(&[4, 4], 2, 9);
        let tokens = Tensor::matrix(2, 4, vec![0.5, -1.0, 2.0, 0.25, 0.5, -1.0, 2.0, 0.25]).unwrap();
        let (out, w) = b.apply_attention(&s, &tokens).unwrap();
        assert_eq!(out.row(0), out.row(1));
        for h in &w {
            assert_eq!(h.row(0), h.row(1));
        }
    }

    #[test]
    fn freeze_refuses_active_block() {
        let (mut s, mut b) = block(&[4, 4], 2, 1);
        assert!(freeze_block(&mut s, &mut b, 1).is_err());
        freeze_block(&mut s, &mut b, 2).unwrap();
        assert!(b.frozen);
        assert!(b.param_ids().iter().all(|&id| s.get(id).frozen));
    }
}
