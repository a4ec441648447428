//! Binary checkpoints: model structure, every parameter as raw `f32`,
//! optimiser state, training progress and a trailing CRC32.
//!
//! Layout (little-endian): `MSCK`, `u32` version, sections in fixed order,
//! `u32` CRC32 of all preceding bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::deam::AttentionBlock;
use crate::dgwr::{GraphAttentionBlock, GraphMode, RelationMatrix};
use crate::error::{MsdemError, Result};
use crate::expert::Expert;
use crate::features::{BackboneSpec, TaskSpec};
use crate::model::{ModelConfig, MsdemModel};
use crate::numerics::{Adam, AdamState, ParamId, ParamStore, Tensor};
use crate::trainer::{StepDecay, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MsdemModel,
    pub train_config: TrainConfig,
    /// Accuracy rows recorded after each completed task.
    pub accuracy: Vec<Vec<f64>>,
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn id(&mut self, id: ParamId) {
        self.u32(id.index() as u32);
    }
    fn ids(&mut self, ids: &[ParamId]) {
        self.u32(ids.len() as u32);
        ids.iter().for_each(|&i| self.id(i));
    }
    fn u32s(&mut self, v: &[u32]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.u32(x));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.bool(v.is_some());
        if let Some(x) = v {
            self.f64(x);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    n_params: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MsdemError::parse(self.pos as u64, format!("truncated checkpoint: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(MsdemError::parse(self.pos as u64, msg))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| self.err(format!("value {v} does not fit in usize")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => self.err(format!("invalid flag byte {b}")),
        }
    }
    fn len(&mut self, per_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(per_item) > self.buf.len() - self.pos {
            return self.err(format!("length {n} exceeds the remaining data"));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let start = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| MsdemError::parse(start as u64, "string is not UTF-8"))
    }
    fn id(&mut self) -> Result<ParamId> {
        let i = self.u32()? as usize;
        if i >= self.n_params {
            return self.err(format!("parameter index {i} out of range"));
        }
        Ok(ParamId(i))
    }
    fn ids(&mut self) -> Result<Vec<ParamId>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.id()).collect()
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }
}

fn put_tensor_f64(e: &mut Enc, t: &Tensor) {
    e.u32(t.shape().len() as u32);
    t.shape().iter().for_each(|&d| e.usize(d));
    t.data().iter().for_each(|&v| e.f64(v));
}

fn get_tensor_f64(d: &mut Dec) -> Result<Tensor> {
    let nd = d.len(8)?;
    let shape = (0..nd).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).unwrap_or(usize::MAX);
    if numel.saturating_mul(8) > d.buf.len() - d.pos {
        return d.err("tensor larger than the remaining data");
    }
    let at = d.pos;
    let data = (0..numel).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| MsdemError::parse(at as u64, e.to_string()))
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let mut e = Enc { buf: Vec::new() };
    e.buf.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);

    let c = &m.config;
    e.usize(c.d_e);
    e.usize(c.heads);
    e.usize(c.graph_heads);
    e.bool(c.token_width.is_some());
    e.usize(c.token_width.unwrap_or(0));
    e.f64(c.tau);
    e.f64(c.sigma);
    e.f64(c.eps_min);
    e.u8(match c.graph_mode {
        GraphMode::Tokens => 0,
        GraphMode::Pooled => 1,
    });
    e.u64(c.seed);

    let tc = &ck.train_config;
    e.u32(tc.epochs_per_task);
    e.usize(tc.batch_size);
    e.f64(tc.lr_expert);
    e.f64(tc.lr_router);
    e.f64(tc.lr_attention);
    e.u64(tc.seed);
    e.opt_f64(tc.tau_final);
    e.bool(tc.lr_decay.is_some());
    if let Some(dc) = &tc.lr_decay {
        e.u64(dc.every_steps);
        e.f64(dc.factor);
    }

    e.u32(m.backbones.len() as u32);
    for b in &m.backbones {
        e.str(&b.name);
        e.usize(b.dim);
    }

    e.u32(m.store.len() as u32);
    for (_, p) in m.store.iter() {
        e.str(&p.name);
        e.u32(p.value.shape().len() as u32);
        p.value.shape().iter().for_each(|&d| e.u32(d as u32));
        e.bool(p.frozen);
        p.value.data().iter().for_each(|&v| e.buf.extend_from_slice(&(v as f32).to_le_bytes()));
    }

    e.u32(m.current_task);
    for t in 1..=m.current_task {
        let task = &m.tasks[&t];
        e.u32(task.domain_id);
        e.u32s(&task.class_ids);
        e.usize(task.train_count);
        e.usize(task.test_count);

        let b = &m.deam_blocks[&t];
        e.ids(&[b.wq, b.wk, b.wv]);
        e.ids(&b.projections);
        e.u32(b.backbone_dims.len() as u32);
        b.backbone_dims.iter().for_each(|&x| e.usize(x));
        e.usize(b.heads);
        e.usize(b.head_dim);
        e.usize(b.token_dim);
        e.bool(b.frozen);

        let x = &m.experts[&t];
        e.ids(&x.param_ids());
        e.u32s(&x.class_ids);
        e.usize(x.input_dim);
        e.usize(x.d_e);
        e.bool(x.frozen);

        let g = &m.graph_blocks[&t];
        e.ids(&g.param_ids());
        e.usize(g.heads);
        e.usize(g.width);
        e.bool(g.frozen);

        e.u64(m.task_steps.get(&t).copied().unwrap_or(0));
        e.bool(m.task_steps.contains_key(&t));
    }

    // relation rows with their mask flags: row i covers columns 1..=i
    e.ids(&m.relation.rows);
    for i in 0..m.relation.size() {
        for j in 0..m.relation.size() {
            e.bool(m.relation.is_masked(i, j));
        }
    }

    e.u32(m.optimizers.len() as u32);
    for o in &m.optimizers {
        e.f64(o.learning_rate);
        let members: Vec<ParamId> = o.members().collect();
        e.u32(members.len() as u32);
        for id in members {
            let s = o.state(id).expect("member has state");
            e.id(id);
            put_tensor_f64(&mut e, &s.first_moment);
            put_tensor_f64(&mut e, &s.second_moment);
            e.u64(s.step_count);
            e.f64(s.learning_rate);
            e.f64(s.beta1);
            e.f64(s.beta2);
            e.f64(s.epsilon);
        }
    }

    e.u32(ck.accuracy.len() as u32);
    ck.accuracy.iter().for_each(|row| e.f64s(row));

    let crc = crc32fast::hash(&e.buf);
    e.u32(crc);
    e.buf
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(MsdemError::parse(bytes.len() as u64, "checkpoint too short"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(MsdemError::parse(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version > CHECKPOINT_VERSION {
        return Err(MsdemError::parse(
            4,
            format!("checkpoint version {version} is newer than supported version {CHECKPOINT_VERSION}"),
        ));
    }
    if version == 0 {
        return Err(MsdemError::parse(4, "invalid checkpoint version 0"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(MsdemError::parse(body_len as u64, "checksum mismatch"));
    }
    let mut d = Dec {
        buf: &bytes[..body_len],
        pos: 8,
        n_params: 0,
    };

    let d_e = d.usize()?;
    let heads = d.usize()?;
    let graph_heads = d.usize()?;
    let has_width = d.bool()?;
    let width = d.usize()?;
    let tau = d.f64()?;
    let sigma = d.f64()?;
    let eps_min = d.f64()?;
    let graph_mode = match d.u8()? {
        0 => GraphMode::Tokens,
        1 => GraphMode::Pooled,
        b => return d.err(format!("unknown graph mode {b}")),
    };
    let seed = d.u64()?;
    let config = ModelConfig {
        d_e,
        heads,
        graph_heads,
        token_width: has_width.then_some(width),
        tau,
        sigma,
        eps_min,
        graph_mode,
        seed,
    };

    let epochs_per_task = d.u32()?;
    let batch_size = d.usize()?;
    let lr_expert = d.f64()?;
    let lr_router = d.f64()?;
    let lr_attention = d.f64()?;
    let train_seed = d.u64()?;
    let tau_final = d.opt_f64()?;
    let lr_decay = if d.bool()? {
        Some(StepDecay {
            every_steps: d.u64()?,
            factor: d.f64()?,
        })
    } else {
        None
    };
    let train_config = TrainConfig {
        epochs_per_task,
        batch_size,
        lr_expert,
        lr_router,
        lr_attention,
        seed: train_seed,
        tau_final,
        lr_decay,
    };

    let n_backbones = d.len(12)?;
    let mut backbones = Vec::with_capacity(n_backbones);
    for _ in 0..n_backbones {
        backbones.push(BackboneSpec {
            name: d.str()?,
            dim: d.usize()?,
        });
    }
    let config_at = d.pos;
    let mut model = MsdemModel::new(config, backbones).map_err(|e| MsdemError::parse(config_at as u64, e.to_string()))?;

    let n_params = d.len(10)?;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let at = d.pos;
        let name = d.str()?;
        let nd = d.len(4)?;
        let shape = (0..nd).map(|_| d.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let frozen = d.bool()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).unwrap_or(usize::MAX);
        if numel.saturating_mul(4) > d.buf.len() - d.pos {
            return d.err(format!("parameter {name} larger than the remaining data"));
        }
        let data = (0..numel)
            .map(|_| d.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| MsdemError::parse(at as u64, format!("parameter {name}: {e}")))?;
        let id = store.add(name, value).map_err(|e| MsdemError::parse(at as u64, e.to_string()))?;
        if frozen {
            store.freeze(id);
        }
    }
    d.n_params = n_params;
    model.store = store;

    let current = d.u32()?;
    for t in 1..=current {
        let task = TaskSpec {
            task_id: t,
            domain_id: d.u32()?,
            class_ids: d.u32s()?,
            train_count: d.usize()?,
            test_count: d.usize()?,
        };

        let qkv = d.ids()?;
        if qkv.len() != 3 {
            return d.err("attention block needs 3 projections");
        }
        let projections = d.ids()?;
        let nb = d.len(8)?;
        let backbone_dims = (0..nb).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let block = AttentionBlock {
            task_id: t,
            wq: qkv[0],
            wk: qkv[1],
            wv: qkv[2],
            projections,
            backbone_dims,
            heads: d.usize()?,
            head_dim: d.usize()?,
            token_dim: d.usize()?,
            frozen: d.bool()?,
        };

        let ex = d.ids()?;
        if ex.len() != 4 {
            return d.err("expert needs 4 parameters");
        }
        let expert = Expert {
            task_id: t,
            adapt_w: ex[0],
            adapt_b: ex[1],
            cls_w: ex[2],
            cls_b: ex[3],
            class_ids: d.u32s()?,
            input_dim: d.usize()?,
            d_e: d.usize()?,
            frozen: d.bool()?,
        };

        let gq = d.ids()?;
        if gq.len() != 3 {
            return d.err("graph block needs 3 projections");
        }
        let graph = GraphAttentionBlock {
            task_id: t,
            wq: gq[0],
            wk: gq[1],
            wv: gq[2],
            heads: d.usize()?,
            width: d.usize()?,
            frozen: d.bool()?,
        };
        let steps = d.u64()?;
        if d.bool()? {
            model.task_steps.insert(t, steps);
        }
        model.tasks.insert(t, task);
        model.deam_blocks.insert(t, block);
        model.experts.insert(t, expert);
        model.graph_blocks.insert(t, graph);
    }
    model.current_task = current;

    let rows = d.ids()?;
    if rows.len() != current as usize {
        return d.err(format!("relation has {} rows for {current} tasks", rows.len()));
    }
    let relation = RelationMatrix { rows };
    for i in 0..relation.size() {
        for j in 0..relation.size() {
            if d.bool()? != relation.is_masked(i, j) {
                return d.err(format!("relation mask flag ({}, {}) is inconsistent", i + 1, j + 1));
            }
        }
    }
    model.relation = relation;

    let n_groups = d.len(12)?;
    for _ in 0..n_groups {
        let lr = d.f64()?;
        let n = d.len(4)?;
        let mut adam = Adam::new(lr, &[], &model.store);
        for _ in 0..n {
            let id = d.id()?;
            let state = AdamState {
                first_moment: get_tensor_f64(&mut d)?,
                second_moment: get_tensor_f64(&mut d)?,
                step_count: d.u64()?,
                learning_rate: d.f64()?,
                beta1: d.f64()?,
                beta2: d.f64()?,
                epsilon: d.f64()?,
            };
            if state.first_moment.shape() != model.store.value(id).shape() {
                return d.err(format!("optimiser state shape mismatch for {}", model.store.get(id).name));
            }
            adam.insert_state(id, state);
        }
        model.optimizers.push(adam);
    }

    let n_rows = d.len(4)?;
    let accuracy = (0..n_rows).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?;

    if d.pos != d.buf.len() {
        return d.err("trailing data before checksum");
    }
    let end = d.pos as u64;
    validate(&model).map_err(|e| MsdemError::parse(end, e.to_string()))?;
    Ok(Checkpoint {
        model,
        train_config,
        accuracy,
    })
}

fn validate(m: &MsdemModel) -> Result<()> {
    let keys: Vec<u32> = (1..=m.current_task).collect();
    let same = |k: Vec<u32>| k == keys;
    if !same(m.tasks.keys().copied().collect())
        || !same(m.deam_blocks.keys().copied().collect())
        || !same(m.experts.keys().copied().collect())
        || !same(m.graph_blocks.keys().copied().collect())
    {
        return Err(MsdemError::invalid("component sets do not match the task count"));
    }
    let by_name: BTreeMap<&str, ParamId> = m.store.iter().map(|(id, p)| (p.name.as_str(), id)).collect();
    for (id, p) in m.store.iter() {
        if by_name[p.name.as_str()] != id {
            return Err(MsdemError::invalid(format!("duplicate parameter {}", p.name)));
        }
    }
    m.audit_trainable()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }

    /// Write atomically through a temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| MsdemError::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| MsdemError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MsdemError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
