//! Dynamic graph weight router: a lower-triangular relation matrix that grows
//! one row per task, Gumbel-Softmax routing weights over the experts, and a
//! per-task attention block over the weighted expert tokens.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deam::uniform_init;
use crate::error::{MsdemError, Result};
use crate::numerics::{attention, matmul, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::rng_for;

pub const DEFAULT_EPS_MIN: f64 = 1e-6;

/// Row `i` (1-based) holds the relations of task `i` to tasks `1..=i`;
/// entries above the diagonal do not exist and read as `-inf`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub rows: Vec<ParamId>,
}

pub(crate) fn relation_row_name(task_id: u32) -> String {
    format!("relation.row.{task_id}")
}

impl RelationMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Grow to `new_size` by appending a row of ones. Only growth by exactly
    /// one is allowed.
    pub fn expand(&mut self, store: &mut ParamStore, new_size: usize) -> Result<ParamId> {
        if new_size != self.size() + 1 {
            return Err(MsdemError::invalid(format!(
                "relation matrix of size {} can only grow to {}, not {new_size}",
                self.size(),
                self.size() + 1
            )));
        }
        let id = store.add(relation_row_name(new_size as u32), Tensor::full(&[new_size], 1.0))?;
        self.rows.push(id);
        Ok(id)
    }

    pub fn row_id(&self, task_id: u32) -> Result<ParamId> {
        let i = task_id as usize;
        if i == 0 || i > self.size() {
            return Err(MsdemError::invalid(format!(
                "no relation row for task {task_id} (size {})",
                self.size()
            )));
        }
        Ok(self.rows[i - 1])
    }

    pub fn row<'s>(&self, store: &'s ParamStore, task_id: u32) -> Result<&'s [f64]> {
        Ok(store.value(self.row_id(task_id)?).data())
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        j > i
    }

    /// `t × t` view with masked entries as `-inf`.
    pub fn dense(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let t = self.size();
        self.rows
            .iter()
            .map(|&id| {
                let mut row = store.value(id).data().to_vec();
                row.resize(t, f64::NEG_INFINITY);
                row
            })
            .collect()
    }

    /// Freeze every row of tasks before `active_task`.
    pub fn freeze_before(&self, store: &mut ParamStore, active_task: u32) {
        for (i, &id) in self.rows.iter().enumerate() {
            if (i as u32 + 1) < active_task {
                store.freeze(id);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    /// No Gaussian or Gumbel noise.
    Deterministic,
    Seeded(u64),
}

/// Gaussian (`σ`) and Gumbel noise, each `[batch × t]`.
pub fn sample_router_noise<R: Rng>(rng: &mut R, batch: usize, t: usize, sigma: f64) -> Result<(Tensor, Tensor)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(MsdemError::invalid(format!("noise scale must be non-negative, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut noise = Vec::with_capacity(batch * t);
    let mut gumbel = Vec::with_capacity(batch * t);
    for _ in 0..batch * t {
        noise.push(if sigma > 0.0 { normal.sample(rng) } else { 0.0 });
        let u: f64 = Open01.sample(rng);
        gumbel.push(-(-u.ln()).ln());
    }
    Ok((
        Tensor::from_parts(vec![batch, t], noise),
        Tensor::from_parts(vec![batch, t], gumbel),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterSample {
    pub weights: Vec<f64>,
    pub tau: f64,
    pub sigma: f64,
    pub mode: NoiseMode,
    pub noise: Vec<f64>,
    pub gumbel: Vec<f64>,
}

/// Routing weights for one relation row.
pub fn gumbel_softmax_weights(m_row: &[f64], tau: f64, sigma: f64, eps_min: f64, mode: NoiseMode) -> Result<RouterSample> {
    if m_row.is_empty() {
        return Err(MsdemError::invalid("empty relation row"));
    }
    let t = m_row.len();
    let (noise, gumbel) = match mode {
        NoiseMode::Deterministic => (Tensor::zeros(&[1, t]), Tensor::zeros(&[1, t])),
        NoiseMode::Seeded(seed) => sample_router_noise(&mut rng_for(seed, &[]), 1, t, sigma)?,
    };
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(Tensor::vector(m_row.to_vec())?)?;
    let w = g.gumbel_softmax(m, &noise, &gumbel, tau, eps_min)?;
    Ok(RouterSample {
        weights: g.value(w).data().to_vec(),
        tau,
        sigma,
        mode,
        noise: noise.into_data(),
        gumbel: gumbel.into_data(),
    })
}

/// Stack `w_j · reps[j]` as a `[t × d]` token matrix and return its row sum.
pub fn combine_expert_tokens(reps: &[Vec<f64>], weights: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    if reps.is_empty() || reps.len() != weights.len() {
        return Err(MsdemError::Shape {
            op: "combine_expert_tokens",
            lhs: vec![reps.len()],
            rhs: vec![weights.len()],
        });
    }
    let d = reps[0].len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(MsdemError::Shape {
            op: "combine_expert_tokens",
            lhs: vec![d],
            rhs: reps.iter().map(Vec::len).collect(),
        });
    }
    let mut data = Vec::with_capacity(reps.len() * d);
    let mut pooled = vec![0.0; d];
    for (r, &w) in reps.iter().zip(weights) {
        for (p, x) in pooled.iter_mut().zip(r) {
            let v = w * x;
            data.push(v);
            *p += v;
        }
    }
    Ok((Tensor::matrix(reps.len(), d, data)?, pooled))
}

/// How the router output feeds the task head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Attention across the weighted expert tokens, then a mean over tokens.
    #[default]
    Tokens,
    /// The pooled representation as a single token.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphAttentionBlock {
    pub task_id: u32,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub width: usize,
    pub frozen: bool,
}

pub(crate) fn graph_param_name(task_id: u32, what: &str) -> String {
    format!("graph.{task_id}.{what}")
}

pub fn create_graph_block<R: Rng>(
    store: &mut ParamStore,
    task_id: u32,
    width: usize,
    heads: usize,
    rng: &mut R,
) -> Result<GraphAttentionBlock> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(MsdemError::invalid(format!("width {width} is not divisible by {heads} heads")));
    }
    if store.lookup(&graph_param_name(task_id, "wq")).is_some() {
        return Err(MsdemError::invalid(format!("graph block for task {task_id} already exists")));
    }
    let scale = 1.0 / (width as f64).sqrt();
    let mut mk = |what: &str, rng: &mut R| store.add(graph_param_name(task_id, what), uniform_init(rng, width, width, scale));
    let wq = mk("wq", rng)?;
    let wk = mk("wk", rng)?;
    let wv = mk("wv", rng)?;
    Ok(GraphAttentionBlock {
        task_id,
        wq,
        wk,
        wv,
        heads,
        width,
        frozen: false,
    })
}

impl GraphAttentionBlock {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv]
    }

    /// Scores are scaled by the full token width.
    fn scale(&self) -> f64 {
        1.0 / (self.width as f64).sqrt()
    }

    /// Attention over groups of `n_tokens` rows of `tokens`, mean-pooled to
    /// one row per group.
    pub fn attend_node(&self, g: &mut Graph, tokens: NodeId, n_tokens: usize) -> Result<NodeId> {
        let width = g.value(tokens).cols();
        if width != self.width {
            return Err(MsdemError::Shape {
                op: "graph_attend",
                lhs: vec![self.width],
                rhs: vec![width],
            });
        }
        let (wq, wk, wv) = (g.param(self.wq)?, g.param(self.wk)?, g.param(self.wv)?);
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        let out = g.attention(q, k, v, n_tokens, self.heads, self.scale())?;
        if n_tokens == 1 {
            Ok(out)
        } else {
            g.group_reduce(out, n_tokens, true)
        }
    }
}

/// Graph attention for one record's `[t × d]` tokens: pooled output and
/// per-head weights.
pub fn graph_attend(store: &ParamStore, block: &GraphAttentionBlock, tokens: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if tokens.cols() != block.width {
        return Err(MsdemError::Shape {
            op: "graph_attend",
            lhs: vec![block.width],
            rhs: tokens.shape().to_vec(),
        });
    }
    let q = matmul(tokens, store.value(block.wq))?;
    let k = matmul(tokens, store.value(block.wk))?;
    let v = matmul(tokens, store.value(block.wv))?;
    let (out, weights) = attention(&q, &k, &v, block.heads, block.scale())?;
    let t = out.rows();
    let mut pooled = vec![0.0; block.width];
    for r in 0..t {
        for (p, x) in pooled.iter_mut().zip(out.row(r)) {
            *p += x;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= t as f64);
    Ok((pooled, weights))
}

/// Square matrix as CSV, header `task,1,..,t`, masked entries left empty.
pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let t = rows.len();
    let mut out = String::from("task");
    for j in 1..=t {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for j in 0..t {
            out.push(',');
            if let Some(v) = row.get(j).filter(|v| v.is_finite()) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}
