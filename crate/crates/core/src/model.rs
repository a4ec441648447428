//! The assembled model: per-task attention blocks, experts and graph blocks
//! plus the growing relation matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::deam::{create_attention_block, token_width, AttentionBlock};
use crate::dgwr::{create_graph_block, sample_router_noise, GraphAttentionBlock, GraphMode, RelationMatrix, DEFAULT_EPS_MIN};
use crate::error::{MsdemError, Result};
use crate::expert::{create_expert, predict_class, Expert};
use crate::features::{fused_batch, BackboneSpec, FeatureRecord, TaskSpec};
use crate::numerics::{Adam, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::{derive_seed, rng_for};

const TAG_DEAM: u64 = 11;
const TAG_EXPERT: u64 = 12;
const TAG_GRAPH: u64 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Expert representation width.
    pub d_e: usize,
    /// Heads of each task's backbone attention block.
    pub heads: usize,
    /// Heads of each task's graph attention block.
    pub graph_heads: usize,
    /// Common token width when backbone dims differ; defaults to the
    /// smallest dim.
    pub token_width: Option<usize>,
    pub tau: f64,
    pub sigma: f64,
    pub eps_min: f64,
    pub graph_mode: GraphMode,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_e: 512,
            heads: 32,
            graph_heads: 1,
            token_width: None,
            tau: 1.0,
            sigma: 0.1,
            eps_min: DEFAULT_EPS_MIN,
            graph_mode: GraphMode::Tokens,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// All problems with this config for the given backbones.
    pub fn problems(&self, backbones: &[BackboneSpec]) -> Vec<String> {
        let mut out = Vec::new();
        if backbones.is_empty() {
            out.push("at least one backbone is required".to_string());
        }
        if backbones.iter().any(|b| b.dim == 0) {
            out.push("backbone dims must be positive".to_string());
        }
        if self.d_e == 0 {
            out.push("d_e must be positive".to_string());
        }
        if self.heads == 0 {
            out.push("heads must be positive".to_string());
        } else if !backbones.is_empty() && !backbones.iter().any(|b| b.dim == 0) {
            let dims: Vec<usize> = backbones.iter().map(|b| b.dim).collect();
            let w = token_width(&dims, self.token_width);
            if w == 0 || w % self.heads != 0 {
                out.push(format!("token width {w} is not divisible by {} heads", self.heads));
            }
        }
        if self.graph_heads == 0 || self.d_e % self.graph_heads.max(1) != 0 {
            out.push(format!("d_e {} is not divisible by {} graph heads", self.d_e, self.graph_heads));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            out.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            out.push(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.eps_min > 0.0) || !self.eps_min.is_finite() {
            out.push(format!("eps_min must be positive, got {}", self.eps_min));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic routing with noise drawn from `seed`.
    Train { seed: u64 },
    /// Noise-free routing.
    Eval,
}

/// Graph nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub fused: NodeId,
    /// Attention output of each expert's own block, `[B·n × width]`.
    pub z_att: Vec<NodeId>,
    /// Expert representations, each `[B × d_e]`.
    pub reps: Vec<NodeId>,
    /// Router weights `[B × t]`.
    pub weights: NodeId,
    /// Weighted expert tokens `[B·t × d_e]`.
    pub tokens: NodeId,
    /// Weighted sum of expert representations `[B × d_e]`.
    pub pooled: NodeId,
    /// Classifier input `[B × d_e]`.
    pub graph_out: NodeId,
    pub logits: NodeId,
}

/// Values of a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub fused: Tensor,
    pub z_att: Vec<Tensor>,
    pub reps: Vec<Tensor>,
    pub weights: Tensor,
    pub tokens: Tensor,
    pub pooled: Tensor,
    pub graph_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct MsdemModel {
    pub config: ModelConfig,
    pub backbones: Vec<BackboneSpec>,
    pub store: ParamStore,
    pub deam_blocks: BTreeMap<u32, AttentionBlock>,
    pub experts: BTreeMap<u32, Expert>,
    pub graph_blocks: BTreeMap<u32, GraphAttentionBlock>,
    pub relation: RelationMatrix,
    pub tasks: BTreeMap<u32, TaskSpec>,
    pub current_task: u32,
    /// Optimiser groups of the current task, once training has started.
    pub optimizers: Vec<Adam>,
    /// Optimisation steps taken per completed task.
    pub task_steps: BTreeMap<u32, u64>,
}

/// Parameter counts for one task's components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskParamCount {
    pub task_id: u32,
    pub attention: usize,
    pub expert: usize,
    pub graph: usize,
    pub relation: usize,
    pub frozen: bool,
}

impl TaskParamCount {
    pub fn total(&self) -> usize {
        self.attention + self.expert + self.graph + self.relation
    }
}

impl MsdemModel {
    pub fn new(config: ModelConfig, backbones: Vec<BackboneSpec>) -> Result<Self> {
        let problems = config.problems(&backbones);
        if !problems.is_empty() {
            return Err(MsdemError::Config(problems.join("; ")));
        }
        Ok(Self {
            config,
            backbones,
            store: ParamStore::new(),
            deam_blocks: BTreeMap::new(),
            experts: BTreeMap::new(),
            graph_blocks: BTreeMap::new(),
            relation: RelationMatrix::new(),
            tasks: BTreeMap::new(),
            current_task: 0,
            optimizers: Vec::new(),
            task_steps: BTreeMap::new(),
        })
    }

    pub fn backbone_dims(&self) -> Vec<usize> {
        self.backbones.iter().map(|b| b.dim).collect()
    }

    pub fn token_dim(&self) -> usize {
        token_width(&self.backbone_dims(), self.config.token_width)
    }

    /// Add and initialise the components of `task`, freezing everything
    /// that belongs to earlier tasks.
    pub fn begin_task(&mut self, task: &TaskSpec) -> Result<()> {
        let t = task.task_id;
        if t != self.current_task + 1 {
            return Err(MsdemError::invalid(format!(
                "task {t} cannot start after task {}; expected task {}",
                self.current_task,
                self.current_task + 1
            )));
        }
        if task.class_ids.len() < 2 {
            return Err(MsdemError::invalid(format!("task {t} has fewer than 2 classes")));
        }
        for block in self.deam_blocks.values_mut() {
            crate::deam::freeze_block(&mut self.store, block, t)?;
        }
        for e in self.experts.values_mut() {
            for id in e.param_ids() {
                self.store.freeze(id);
            }
            e.frozen = true;
        }
        for gb in self.graph_blocks.values_mut() {
            for id in gb.param_ids() {
                self.store.freeze(id);
            }
            gb.frozen = true;
        }
        self.relation.freeze_before(&mut self.store, t);

        let dims = self.backbone_dims();
        let width = self.token_dim();
        let seed = self.config.seed;
        let block = create_attention_block(&mut self.store, t, &dims, width, self.config.heads, &mut rng_for(seed, &[TAG_DEAM, t as u64]))?;
        let expert = create_expert(
            &mut self.store,
            t,
            dims.len() * width,
            self.config.d_e,
            &task.class_ids,
            &mut rng_for(seed, &[TAG_EXPERT, t as u64]),
        )?;
        let graph = create_graph_block(&mut self.store, t, self.config.d_e, self.config.graph_heads, &mut rng_for(seed, &[TAG_GRAPH, t as u64]))?;
        self.relation.expand(&mut self.store, t as usize)?;
        self.deam_blocks.insert(t, block);
        self.experts.insert(t, expert);
        self.graph_blocks.insert(t, graph);
        self.tasks.insert(t, task.clone());
        self.current_task = t;
        self.optimizers.clear();
        Ok(())
    }

    fn check_task(&self, task_id: u32) -> Result<()> {
        if task_id == 0 || task_id > self.current_task {
            return Err(MsdemError::invalid(format!(
                "unknown task {task_id}; model has {} tasks",
                self.current_task
            )));
        }
        Ok(())
    }

    pub fn expert(&self, task_id: u32) -> Result<&Expert> {
        self.check_task(task_id)?;
        Ok(&self.experts[&task_id])
    }

    /// Parameters of task `t` split into the three optimiser groups:
    /// expert, relation row, attention (backbone and graph).
    pub fn param_groups(&self, task_id: u32) -> Result<[Vec<ParamId>; 3]> {
        self.check_task(task_id)?;
        let expert = self.experts[&task_id].param_ids();
        let router = vec![self.relation.row_id(task_id)?];
        let mut attention = self.deam_blocks[&task_id].param_ids();
        attention.extend(self.graph_blocks[&task_id].param_ids());
        Ok([expert, router, attention])
    }

    /// Check that exactly the active task's components are trainable.
    pub fn audit_trainable(&self) -> Result<()> {
        if self.current_task == 0 {
            return Ok(());
        }
        let expected: BTreeSet<ParamId> = self.param_groups(self.current_task)?.into_iter().flatten().collect();
        let actual: BTreeSet<ParamId> = self.store.trainable().into_iter().collect();
        if expected != actual {
            let name = |id: &ParamId| self.store.get(*id).name.clone();
            let extra: Vec<String> = actual.difference(&expected).map(name).collect();
            let missing: Vec<String> = expected.difference(&actual).map(name).collect();
            return Err(MsdemError::invalid(format!(
                "trainable set mismatch for task {}: unexpected {extra:?}, missing {missing:?}",
                self.current_task
            )));
        }
        Ok(())
    }

    /// Build the forward pass for a batch into `g`.
    pub fn forward_graph(&self, g: &mut Graph, records: &[&FeatureRecord], task_id: u32, mode: Mode) -> Result<ForwardNodes> {
        self.check_task(task_id)?;
        let b = records.len();
        let fused = g.constant(fused_batch(records, &self.backbones)?)?;
        let mut z_att = Vec::with_capacity(task_id as usize);
        let mut reps = Vec::with_capacity(task_id as usize);
        for j in 1..=task_id {
            let block = &self.deam_blocks[&j];
            let tokens = block.tokenize_node(g, fused)?;
            let att = block.attend_node(g, tokens)?;
            reps.push(self.experts[&j].adapt_forward(g, att, b)?);
            z_att.push(att);
        }
        let t = task_id as usize;
        let (noise, gumbel) = match mode {
            Mode::Eval => (Tensor::zeros(&[b, t]), Tensor::zeros(&[b, t])),
            Mode::Train { seed } => sample_router_noise(&mut rng_for(seed, &[]), b, t, self.config.sigma)?,
        };
        let m = g.param(self.relation.row_id(task_id)?)?;
        let weights = g.gumbel_softmax(m, &noise, &gumbel, self.config.tau, self.config.eps_min)?;
        let tokens = g.weighted_tokens(&reps, weights)?;
        let pooled = g.group_reduce(tokens, t, false)?;
        let graph = &self.graph_blocks[&task_id];
        let graph_out = match self.config.graph_mode {
            GraphMode::Tokens => graph.attend_node(g, tokens, t)?,
            GraphMode::Pooled => graph.attend_node(g, pooled, 1)?,
        };
        let logits = self.experts[&task_id].logits(g, graph_out)?;
        Ok(ForwardNodes {
            fused,
            z_att,
            reps,
            weights,
            tokens,
            pooled,
            graph_out,
            logits,
        })
    }

    pub fn forward_batch(&self, records: &[&FeatureRecord], task_id: u32, mode: Mode) -> Result<ForwardOutput> {
        let mut g = Graph::new(&self.store);
        let n = self.forward_graph(&mut g, records, task_id, mode)?;
        let v = |id: NodeId| g.value(id).clone();
        Ok(ForwardOutput {
            logits: v(n.logits),
            fused: v(n.fused),
            z_att: n.z_att.iter().map(|&id| v(id)).collect(),
            reps: n.reps.iter().map(|&id| v(id)).collect(),
            weights: v(n.weights),
            tokens: v(n.tokens),
            pooled: v(n.pooled),
            graph_out: v(n.graph_out),
        })
    }

    pub fn forward(&self, record: &FeatureRecord, task_id: u32, mode: Mode) -> Result<ForwardOutput> {
        self.forward_batch(&[record], task_id, mode)
    }

    /// Eval-mode logits `[B × K_t]`.
    pub fn logits(&self, records: &[&FeatureRecord], task_id: u32) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let n = self.forward_graph(&mut g, records, task_id, Mode::Eval)?;
        Ok(g.value(n.logits).clone())
    }

    pub fn predict_batch(&self, records: &[&FeatureRecord], task_id: u32) -> Result<Vec<u32>> {
        let logits = self.logits(records, task_id)?;
        let classes = &self.experts[&task_id].class_ids;
        (0..logits.rows()).map(|r| predict_class(logits.row(r), classes)).collect()
    }

    pub fn predict(&self, record: &FeatureRecord, task_id: u32) -> Result<u32> {
        Ok(self.predict_batch(&[record], task_id)?[0])
    }

    /// Noise-free router weights of task `task_id` over experts `1..=task_id`.
    pub fn router_weights(&self, task_id: u32) -> Result<Vec<f64>> {
        self.check_task(task_id)?;
        let t = task_id as usize;
        let mut g = Graph::new(&self.store);
        let m = g.constant(self.store.value(self.relation.row_id(task_id)?).clone())?;
        let zeros = Tensor::zeros(&[1, t]);
        let w = g.gumbel_softmax(m, &zeros, &zeros, self.config.tau, self.config.eps_min)?;
        Ok(g.value(w).data().to_vec())
    }

    pub fn param_counts(&self) -> Vec<TaskParamCount> {
        let count = |ids: Vec<ParamId>| ids.into_iter().map(|id| self.store.numel(id)).sum::<usize>();
        (1..=self.current_task)
            .map(|t| TaskParamCount {
                task_id: t,
                attention: count(self.deam_blocks[&t].param_ids()),
                expert: count(self.experts[&t].param_ids()),
                graph: count(self.graph_blocks[&t].param_ids()),
                relation: count(vec![self.relation.rows[t as usize - 1]]),
                frozen: t < self.current_task,
            })
            .collect()
    }

    /// Seed for the routing noise of one optimisation step.
    pub fn step_seed(seed: u64, task_id: u32, step: u64) -> u64 {
        derive_seed(seed, &[14, task_id as u64, step])
    }
}
