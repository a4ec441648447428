use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msdem::checkpoint::Checkpoint;
use msdem::evaluation::{evaluate_task, MetricsReport};
use msdem::features::{
    build_stream, synth_domain, BackboneEntry, DomainEntry, FileEntry, Manifest, SynthParams, TaskStream,
};
use msdem::model::MsdemModel;
use msdem::rng::derive_seed;
use msdem::trainer::{train_stream_from, StreamProgress};

use crate::config::{load_toml, RunConfig, SynthConfig};
use crate::{EvalArgs, GenSynthArgs, InspectArgs, TrainArgs};

/// Invalid configuration, reported with every problem found.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn check(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ConfigError(format!("{} problem(s): {}", problems.len(), problems.join("; "))).into())
    }
}

const LATEST: &str = "checkpoint.msck";

pub fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.print_config {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    check(cfg.problems())?;
    let out = args.out.expect("required by clap");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let names: Vec<String> = cfg.backbones.iter().map(|b| b.name.clone()).collect();
    let dims: Vec<usize> = cfg.backbones.iter().map(|b| b.dim).collect();
    let seeds: Vec<u64> = (0..cfg.domains.len()).map(|i| derive_seed(cfg.seed, &[i as u64])).collect();
    let mut manifest = Manifest {
        seed: cfg.seed,
        backbones: cfg
            .backbones
            .iter()
            .map(|b| BackboneEntry {
                name: b.name.clone(),
                dim: b.dim,
            })
            .collect(),
        domains: Vec::new(),
        tasks: Vec::new(),
    };
    let mut offset = 0u32;
    for (i, d) in cfg.domains.iter().enumerate() {
        let base_seed = d
            .base_domain
            .as_ref()
            .map(|b| seeds[cfg.domains.iter().position(|o| &o.name == b).expect("validated")]);
        let params = SynthParams {
            seed: seeds[i],
            n_classes: d.n_classes as usize,
            samples_per_class: d.samples_per_class,
            dims: dims.clone(),
            separation: d.separation,
            noise: d.noise,
            base_seed,
            perturbation: d.perturbation,
        };
        let domain = synth_domain(&params)?;
        let paths = domain.write_files(&out, &d.name, &names)?;
        let file_name = |p: &Path| PathBuf::from(p.file_name().expect("file path"));
        manifest.domains.push(DomainEntry {
            name: d.name.clone(),
            class_offset: offset,
            n_classes: d.n_classes,
            classes_per_task: Some(d.classes_per_task),
            files: names
                .iter()
                .zip(&paths)
                .map(|(n, (tr, te))| FileEntry {
                    backbone: n.clone(),
                    train: file_name(tr),
                    test: file_name(te),
                })
                .collect(),
            synthetic: None,
        });
        offset += d.n_classes;
    }
    let manifest_path = out.join("manifest.toml");
    std::fs::write(&manifest_path, manifest.to_toml()).with_context(|| format!("writing {}", manifest_path.display()))?;

    let stream = build_stream(&manifest, &out)?;
    for (i, d) in cfg.domains.iter().enumerate() {
        let tasks: Vec<_> = stream.tasks().iter().filter(|t| t.domain_id == i as u32).collect();
        let train: usize = tasks.iter().map(|t| t.train_count).sum();
        let test: usize = tasks.iter().map(|t| t.test_count).sum();
        println!(
            "{}: {} classes, {} tasks, {train} train / {test} test records",
            d.name,
            d.n_classes,
            tasks.len()
        );
    }
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn load_stream(path: &Path) -> Result<TaskStream> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(build_stream(&manifest, base)?)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs_per_task = e;
    }
    if let Some(t) = args.tau {
        cfg.model.tau = t;
    }
    if let Some(s) = args.sigma {
        cfg.model.sigma = s;
    }
    if args.print_config {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    let manifest = args.manifest.expect("required by clap");
    let out = args.out.expect("required by clap");
    let stream = load_stream(&manifest)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let latest = out.join(LATEST);
    let (mut model, train_config, mut progress) = if args.resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        log::info!("resuming after task {}", ck.model.current_task);
        (ck.model, ck.train_config, StreamProgress { accuracy: ck.accuracy })
    } else {
        if args.resume {
            log::warn!("no checkpoint in {}; starting from scratch", out.display());
        }
        check(cfg.problems(stream.backbones()))?;
        let model = MsdemModel::new(cfg.model.clone(), stream.backbones().to_vec())?;
        (model, cfg.train.clone(), StreamProgress::default())
    };
    if model.backbones.as_slice() != stream.backbones() {
        bail!("checkpoint backbones do not match the manifest");
    }

    let stop = args.stop_after_task;
    let outcome = train_stream_from(&mut model, &stream, &train_config, &mut progress, |m, p, log| {
        let ck = Checkpoint {
            model: m.clone(),
            train_config: train_config.clone(),
            accuracy: p.accuracy.clone(),
        };
        let t = m.current_task;
        ck.save(&out.join(format!("checkpoint_task{t}.msck")))?;
        ck.save(&out.join(LATEST))?;
        let log_path = out.join(format!("trainlog_task{t}.csv"));
        std::fs::write(&log_path, log.to_csv()).map_err(|e| msdem::MsdemError::Io {
            path: log_path.display().to_string(),
            source: e,
        })?;
        println!(
            "task {t}: {} steps, final loss {:.4}, accuracy {:?}",
            log.steps(),
            log.losses.last().copied().unwrap_or(f64::NAN),
            p.accuracy.last().expect("row just pushed")
        );
        if stop == Some(t) {
            return Err(msdem::MsdemError::Invalid(format!("stopped after task {t} on request")));
        }
        Ok(())
    });
    let outcome = match outcome {
        Err(msdem::MsdemError::Invalid(m)) if m.starts_with("stopped after task") => {
            println!("{m}");
            return Ok(());
        }
        other => other?,
    };
    outcome.report.write_files(&out)?;
    println!("average {:.4}  last {:.4}", outcome.report.average, outcome.report.last);
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let stream = load_stream(&args.manifest)?;
    let model = &ck.model;
    if model.backbones.as_slice() != stream.backbones() {
        bail!(ConfigError("checkpoint backbones do not match the manifest".into()));
    }
    let n = stream.tasks().len() as u32;
    if model.current_task != n {
        bail!(ConfigError(format!(
            "checkpoint has {} tasks but the manifest defines {n}",
            model.current_task
        )));
    }
    for task in stream.tasks() {
        if model.tasks.get(&task.task_id).map(|t| &t.class_ids) != Some(&task.class_ids) {
            bail!(ConfigError(format!("task {} classes differ between checkpoint and manifest", task.task_id)));
        }
    }
    stream.set_active(n)?;
    let mut finals = Vec::with_capacity(n as usize);
    for task in stream.tasks() {
        let test = stream.test_records(task.task_id)?;
        finals.push(evaluate_task(model, task, &test)?);
    }
    let report = MetricsReport::from_final(&finals, model)?;
    report.write_files(&args.out)?;
    println!("average {:.4}  last {:.4}", report.average, report.last);
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let m = &ck.model;
    let total: usize = m.store.ids().map(|id| m.store.numel(id)).sum();
    let trainable: usize = m.store.trainable().into_iter().map(|id| m.store.numel(id)).sum();
    println!("tasks: {}", m.current_task);
    println!(
        "backbones: {}",
        m.backbones.iter().map(|b| format!("{} ({})", b.name, b.dim)).collect::<Vec<_>>().join(", ")
    );
    println!("parameters: total {total}, trainable {trainable}, frozen {}", total - trainable);
    println!("{:>4} {:>10} {:>10} {:>10} {:>8} {:>10}  state", "task", "attention", "expert", "graph", "router", "total");
    for c in m.param_counts() {
        println!(
            "{:>4} {:>10} {:>10} {:>10} {:>8} {:>10}  {}",
            c.task_id,
            c.attention,
            c.expert,
            c.graph,
            c.relation,
            c.total(),
            if c.frozen { "frozen" } else { "trainable" }
        );
    }
    println!("router weights (noise-free):");
    for t in 1..=m.current_task {
        let w = m.router_weights(t)?;
        println!("  {t}: {}", w.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
