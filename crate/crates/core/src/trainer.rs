//! Task-by-task optimisation of the model over a stream.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{MsdemError, Result};
use crate::evaluation::{evaluate_task, MetricsReport};
use crate::features::{FeatureRecord, TaskSpec, TaskStream};
use crate::model::{Mode, MsdemModel};
use crate::numerics::{Adam, Graph};
use crate::rng::rng_for;

const TAG_SHUFFLE: u64 = 21;

/// Multiply every group's learning rate by `factor` each `every_steps`
/// steps within a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every_steps: u64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: u32,
    pub batch_size: usize,
    pub lr_expert: f64,
    pub lr_router: f64,
    pub lr_attention: f64,
    /// Seed for shuffling and routing noise.
    pub seed: u64,
    /// When set, the training temperature moves linearly from the model's
    /// `tau` to this value over each task.
    pub tau_final: Option<f64>,
    pub lr_decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 1,
            batch_size: 64,
            lr_expert: 1e-3,
            lr_router: 1e-2,
            lr_attention: 1e-3,
            seed: 0,
            tau_final: None,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    /// Problems with this config. Zero learning rates are accepted here so
    /// that a frozen run can be expressed; the command line requires them
    /// to be positive.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs_per_task == 0 {
            out.push("epochs_per_task must be positive".to_string());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        for (name, lr) in [
            ("lr_expert", self.lr_expert),
            ("lr_router", self.lr_router),
            ("lr_attention", self.lr_attention),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                out.push(format!("{name} must be a non-negative number, got {lr}"));
            }
        }
        if let Some(t) = self.tau_final {
            if !(t > 0.0) || !t.is_finite() {
                out.push(format!("tau_final must be positive, got {t}"));
            }
        }
        if let Some(d) = &self.lr_decay {
            if d.every_steps == 0 || !(d.factor > 0.0) || !d.factor.is_finite() {
                out.push("lr_decay needs every_steps > 0 and factor > 0".to_string());
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(MsdemError::Config(p.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub task_id: u32,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub epochs: Vec<u32>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// `step,epoch,loss,grad_norm` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,grad_norm\n");
        for (i, ((l, g), e)) in self.losses.iter().zip(&self.grad_norms).zip(&self.epochs).enumerate() {
            writeln!(out, "{},{e},{l},{g}", i + 1).expect("write to string");
        }
        out
    }
}

fn label_positions(task: &TaskSpec, data: &[FeatureRecord]) -> Result<Vec<usize>> {
    data.iter()
        .map(|r| {
            task.position(r.label).ok_or_else(|| {
                MsdemError::invalid(format!(
                    "label {} is not one of task {}'s classes",
                    r.label, task.task_id
                ))
            })
        })
        .collect()
}

/// Optimise the active task's components on `data`.
pub fn train_task(model: &mut MsdemModel, task: &TaskSpec, data: &[FeatureRecord], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    let t = task.task_id;
    if model.current_task != t || model.tasks.get(&t) != Some(task) {
        return Err(MsdemError::invalid(format!(
            "task {t} has not been started on this model (current task {})",
            model.current_task
        )));
    }
    if data.is_empty() {
        return Err(MsdemError::invalid(format!("no training data for task {t}")));
    }
    let positions = label_positions(task, data)?;

    let groups = model.param_groups(t)?;
    let n_ids: usize = groups.iter().map(Vec::len).sum();
    let distinct: std::collections::BTreeSet<_> = groups.iter().flatten().collect();
    if distinct.len() != n_ids {
        return Err(MsdemError::invalid("optimiser groups overlap"));
    }
    let rates = [config.lr_expert, config.lr_router, config.lr_attention];
    let mut optim: Vec<Adam> = groups.iter().zip(rates).map(|(ids, lr)| Adam::new(lr, ids, &model.store)).collect();

    let start = Instant::now();
    let base_tau = model.config.tau;
    let batches_per_epoch = data.len().div_ceil(config.batch_size) as u64;
    let total_steps = batches_per_epoch * config.epochs_per_task as u64;
    let mut log = TrainLog {
        task_id: t,
        losses: Vec::new(),
        grad_norms: Vec::new(),
        epochs: Vec::new(),
        wall_time_secs: 0.0,
    };
    let mut step: u64 = 0;
    let result = (|| -> Result<()> {
        for epoch in 0..config.epochs_per_task {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng_for(config.seed, &[TAG_SHUFFLE, t as u64, epoch as u64]));
            for chunk in order.chunks(config.batch_size) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                if let Some(tf) = config.tau_final {
                    let frac = if total_steps > 1 { step as f64 / (total_steps - 1) as f64 } else { 0.0 };
                    model.config.tau = base_tau + (tf - base_tau) * frac;
                }
                if let Some(d) = &config.lr_decay {
                    if step > 0 && step % d.every_steps == 0 {
                        for (o, lr) in optim.iter_mut().zip(rates) {
                            o.set_learning_rate(lr * d.factor.powi((step / d.every_steps) as i32));
                        }
                    }
                }
                let batch: Vec<&FeatureRecord> = idx.iter().map(|&i| &data[i]).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| positions[i]).collect();
                let seed = MsdemModel::step_seed(config.seed, t, step);
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let nodes = model.forward_graph(&mut g, &batch, t, Mode::Train { seed })?;
                    let loss = g.cross_entropy(nodes.logits, &labels)?;
                    let value = g.value(loss).data()[0];
                    if !value.is_finite() {
                        return Err(MsdemError::invalid(format!(
                            "non-finite loss {value} at task {t}, epoch {epoch}, step {}",
                            step + 1
                        )));
                    }
                    log.losses.push(value);
                    g.backward(loss)?
                };
                log.grad_norms.push(grads.norm());
                log.epochs.push(epoch + 1);
                model.audit_trainable()?;
                model.store.set_grads(grads)?;
                for o in optim.iter_mut() {
                    o.step(&mut model.store)?;
                }
                step += 1;
            }
        }
        Ok(())
    })();
    model.config.tau = base_tau;
    model.store.clear_grads();
    result?;
    model.optimizers = optim;
    model.task_steps.insert(t, step);
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Accuracy rows gathered so far: row `i` holds task `1..=i+1` accuracies
/// measured after training task `i+1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamProgress {
    pub accuracy: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub logs: Vec<TrainLog>,
    pub report: MetricsReport,
}

/// Train every task of the stream in order on a fresh model.
pub fn train_stream(model: &mut MsdemModel, stream: &TaskStream, config: &TrainConfig) -> Result<StreamOutcome> {
    if model.current_task != 0 {
        return Err(MsdemError::invalid("train_stream needs a fresh model"));
    }
    let mut progress = StreamProgress::default();
    train_stream_from(model, stream, config, &mut progress, |_, _, _| Ok(()))
}

/// Continue a stream from the model's current task. `on_task` runs after
/// each task has been trained and evaluated.
pub fn train_stream_from<F>(
    model: &mut MsdemModel,
    stream: &TaskStream,
    config: &TrainConfig,
    progress: &mut StreamProgress,
    mut on_task: F,
) -> Result<StreamOutcome>
where
    F: FnMut(&MsdemModel, &StreamProgress, &TrainLog) -> Result<()>,
{
    config.validate()?;
    let tasks = stream.tasks();
    if tasks.is_empty() {
        return Err(MsdemError::invalid("the task stream is empty"));
    }
    if model.backbones.as_slice() != stream.backbones() {
        return Err(MsdemError::invalid("model and stream backbones differ"));
    }
    let done = model.current_task as usize;
    if progress.accuracy.len() != done || done > tasks.len() {
        return Err(MsdemError::invalid(format!(
            "model has {done} tasks but progress holds {} of {}",
            progress.accuracy.len(),
            tasks.len()
        )));
    }
    for (t, spec) in &model.tasks {
        if stream.task(*t)? != spec {
            return Err(MsdemError::invalid(format!("task {t} of the model does not match the stream")));
        }
    }
    let mut logs = Vec::new();
    for task in &tasks[done..] {
        let t = task.task_id;
        stream.set_active(t)?;
        model.begin_task(task)?;
        let data = stream.train_records(t)?;
        let log = train_task(model, task, &data, config)?;
        log::info!(
            "task {t}: {} steps, final loss {:.4}, {:.2}s",
            log.steps(),
            log.losses.last().copied().unwrap_or(f64::NAN),
            log.wall_time_secs
        );
        let mut row = Vec::with_capacity(t as usize);
        for j in 1..=t {
            let test = stream.test_records(j)?;
            row.push(evaluate_task(model, stream.task(j)?, &test)?);
        }
        progress.accuracy.push(row);
        on_task(model, progress, &log)?;
        logs.push(log);
    }
    let report = MetricsReport::new(progress.accuracy.clone(), model)?;
    Ok(StreamOutcome { logs, report })
}
