use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MsdemError, Result};
use crate::features::format::load_feature_file;
use crate::features::synth::{partition_classes, synth_domain, SynthParams, SyntheticDomain};
use crate::features::{BackboneSpec, FeatureRecord, Split, TaskSpec};

/// Stream manifest, read from TOML.
///
/// ```toml
/// seed = 7
///
/// [[backbones]]
/// name = "vit_b16"
/// dim = 64
///
/// [[domains]]
/// name = "tiny"
/// class_offset = 0
/// n_classes = 60
/// classes_per_task = 20
/// synthetic = { seed = 1, samples_per_class = 125, separation = 5.0, noise = 0.5 }
/// ```
///
/// A domain lists either `files` (one entry per backbone with train and test
/// paths, relative to the manifest) or `synthetic` generator parameters.
/// Tasks come from `classes_per_task` in domain order unless an explicit
/// `[[tasks]]` list is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    pub backbones: Vec<BackboneEntry>,
    pub domains: Vec<DomainEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneEntry {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub class_offset: u32,
    pub n_classes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_task: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub backbone: String,
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEntry {
    pub seed: u64,
    pub samples_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    /// Name of an earlier synthetic domain whose class means this one perturbs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_domain: Option<String>,
    #[serde(default)]
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub domain: String,
    pub classes: Vec<u32>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MsdemError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsdemError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

enum DomainSource {
    Files(Vec<(PathBuf, PathBuf)>),
    Memory(Box<SyntheticDomain>),
}

struct Domain {
    name: String,
    class_offset: u32,
    n_classes: u32,
    source: DomainSource,
}

/// Ordered multi-domain task sequence.
///
/// Training records are only handed out for the active task; test records
/// for any task up to and including it.
pub struct TaskStream {
    tasks: Vec<TaskSpec>,
    backbones: Vec<BackboneSpec>,
    label_cardinality: u32,
    domains: Vec<Domain>,
    active: Cell<u32>,
}

impl std::fmt::Debug for TaskStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskStream")
            .field("tasks", &self.tasks.len())
            .field("backbones", &self.backbones)
            .field("label_cardinality", &self.label_cardinality)
            .finish()
    }
}

impl Domain {
    fn load(&self, domain_id: u32, split: Split, backbones: &[BackboneSpec]) -> Result<Vec<FeatureRecord>> {
        match &self.source {
            DomainSource::Memory(d) => Ok(d
                .samples(split)
                .iter()
                .map(|s| FeatureRecord {
                    per_backbone: s
                        .per_backbone
                        .iter()
                        .map(|v| v.iter().map(|&x| x as f64).collect())
                        .collect(),
                    label: self.class_offset + s.label,
                    domain_id,
                    split,
                })
                .collect()),
            DomainSource::Files(paths) => {
                let mut records: Vec<FeatureRecord> = Vec::new();
                for (j, (train, test)) in paths.iter().enumerate() {
                    let path = match split {
                        Split::Train => train,
                        Split::Test => test,
                    };
                    let reader = load_feature_file(path)?;
                    let h = reader.header();
                    if h.dim as usize != backbones[j].dim {
                        return Err(MsdemError::invalid(format!(
                            "{}: dimension {} but backbone `{}` declares {}",
                            path.display(),
                            h.dim,
                            backbones[j].name,
                            backbones[j].dim
                        )));
                    }
                    if h.cardinality != self.n_classes {
                        return Err(MsdemError::invalid(format!(
                            "{}: label cardinality {} but domain `{}` declares {} classes",
                            path.display(),
                            h.cardinality,
                            self.name,
                            self.n_classes
                        )));
                    }
                    for (i, rec) in reader.enumerate() {
                        let (label, v) = rec?;
                        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
                        let global = self.class_offset + label;
                        if j == 0 {
                            records.push(FeatureRecord {
                                per_backbone: vec![v],
                                label: global,
                                domain_id,
                                split,
                            });
                        } else {
                            let r = records.get_mut(i).ok_or_else(|| {
                                MsdemError::invalid(format!("{}: more records than backbone 0", path.display()))
                            })?;
                            if r.label != global {
                                return Err(MsdemError::invalid(format!(
                                    "{}: record {i} has label {label}, backbone 0 has {}",
                                    path.display(),
                                    r.label - self.class_offset
                                )));
                            }
                            r.per_backbone.push(v);
                        }
                    }
                    if j > 0 && records.iter().any(|r| r.per_backbone.len() != j + 1) {
                        return Err(MsdemError::invalid(format!(
                            "{}: fewer records than backbone 0",
                            path.display()
                        )));
                    }
                }
                Ok(records)
            }
        }
    }
}

/// Validate a manifest and assemble the task stream. Relative file paths are
/// resolved against `base_dir`.
pub fn build_stream(manifest: &Manifest, base_dir: &Path) -> Result<TaskStream> {
    if manifest.backbones.is_empty() {
        return Err(MsdemError::Config("manifest declares no backbones".into()));
    }
    let mut names = HashSet::new();
    for b in &manifest.backbones {
        if b.dim == 0 {
            return Err(MsdemError::Config(format!("backbone `{}` has zero dimension", b.name)));
        }
        if !names.insert(b.name.as_str()) {
            return Err(MsdemError::Config(format!("duplicate backbone `{}`", b.name)));
        }
    }
    let backbones: Vec<BackboneSpec> = manifest
        .backbones
        .iter()
        .map(|b| BackboneSpec {
            name: b.name.clone(),
            dim: b.dim,
        })
        .collect();
    let dims: Vec<usize> = backbones.iter().map(|b| b.dim).collect();

    if manifest.domains.is_empty() {
        return Err(MsdemError::Config("manifest declares no domains".into()));
    }
    let mut domains: Vec<Domain> = Vec::new();
    let mut synth_seeds: BTreeMap<&str, u64> = BTreeMap::new();
    for d in &manifest.domains {
        if domains.iter().any(|o| o.name == d.name) {
            return Err(MsdemError::Config(format!("duplicate domain `{}`", d.name)));
        }
        if d.n_classes < 2 {
            return Err(MsdemError::Config(format!("domain `{}` needs at least 2 classes", d.name)));
        }
        let source = match (&d.synthetic, d.files.is_empty()) {
            (Some(s), true) => {
                let base_seed = match &s.base_domain {
                    None => None,
                    Some(b) => Some(*synth_seeds.get(b.as_str()).ok_or_else(|| {
                        MsdemError::Config(format!(
                            "domain `{}` perturbs unknown or non-synthetic domain `{b}`",
                            d.name
                        ))
                    })?),
                };
                let params = SynthParams {
                    seed: s.seed,
                    n_classes: d.n_classes as usize,
                    samples_per_class: s.samples_per_class,
                    dims: dims.clone(),
                    separation: s.separation,
                    noise: s.noise,
                    base_seed,
                    perturbation: s.perturbation,
                };
                synth_seeds.insert(d.name.as_str(), s.seed);
                DomainSource::Memory(Box::new(synth_domain(&params)?))
            }
            (None, false) => {
                let mut paths = Vec::new();
                for b in &backbones {
                    let entry = d.files.iter().find(|f| f.backbone == b.name).ok_or_else(|| {
                        MsdemError::Config(format!("domain `{}` has no files for backbone `{}`", d.name, b.name))
                    })?;
                    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
                    let (train, test) = (resolve(&entry.train), resolve(&entry.test));
                    for p in [&train, &test] {
                        if !p.is_file() {
                            return Err(MsdemError::Config(format!("missing feature file {}", p.display())));
                        }
                    }
                    paths.push((train, test));
                }
                if d.files.len() != backbones.len() {
                    return Err(MsdemError::Config(format!(
                        "domain `{}` lists files for unknown backbones",
                        d.name
                    )));
                }
                DomainSource::Files(paths)
            }
            _ => {
                return Err(MsdemError::Config(format!(
                    "domain `{}` must declare exactly one of `files` or `synthetic`",
                    d.name
                )))
            }
        };
        domains.push(Domain {
            name: d.name.clone(),
            class_offset: d.class_offset,
            n_classes: d.n_classes,
            source,
        });
    }

    let mut task_classes: Vec<(u32, Vec<u32>)> = Vec::new();
    if manifest.tasks.is_empty() {
        for (i, d) in manifest.domains.iter().enumerate() {
            let per = d.classes_per_task.unwrap_or(d.n_classes);
            for classes in partition_classes(d.class_offset, d.n_classes, per)? {
                task_classes.push((i as u32, classes));
            }
        }
    } else {
        for t in &manifest.tasks {
            let i = manifest
                .domains
                .iter()
                .position(|d| d.name == t.domain)
                .ok_or_else(|| MsdemError::Config(format!("task references unknown domain `{}`", t.domain)))?;
            task_classes.push((i as u32, t.classes.clone()));
        }
    }

    let mut seen = HashSet::new();
    for (di, classes) in &task_classes {
        let d = &manifest.domains[*di as usize];
        if classes.len() < 2 {
            return Err(MsdemError::Config("every task needs at least 2 classes".into()));
        }
        for &c in classes {
            if c < d.class_offset || c >= d.class_offset + d.n_classes {
                return Err(MsdemError::Config(format!(
                    "class {c} outside domain `{}` range [{}, {})",
                    d.name,
                    d.class_offset,
                    d.class_offset + d.n_classes
                )));
            }
            if !seen.insert(c) {
                return Err(MsdemError::Config(format!("class {c} appears in more than one task")));
            }
        }
    }

    let label_cardinality = manifest
        .domains
        .iter()
        .map(|d| d.class_offset + d.n_classes)
        .max()
        .unwrap_or(0);

    let mut stream = TaskStream {
        tasks: Vec::new(),
        backbones,
        label_cardinality,
        domains,
        active: Cell::new(0),
    };
    // counts come from one pass over each domain's labels
    let mut counts: BTreeMap<(u32, Split), BTreeMap<u32, usize>> = BTreeMap::new();
    for (di, _) in &task_classes {
        for split in [Split::Train, Split::Test] {
            if counts.contains_key(&(*di, split)) {
                continue;
            }
            let mut per_label = BTreeMap::new();
            for r in stream.domains[*di as usize].load(*di, split, &stream.backbones)? {
                *per_label.entry(r.label).or_insert(0) += 1;
            }
            counts.insert((*di, split), per_label);
        }
    }
    for (i, (di, classes)) in task_classes.into_iter().enumerate() {
        let count = |split| {
            classes
                .iter()
                .map(|c| counts[&(di, split)].get(c).copied().unwrap_or(0))
                .sum()
        };
        stream.tasks.push(TaskSpec {
            task_id: i as u32 + 1,
            domain_id: di,
            train_count: count(Split::Train),
            test_count: count(Split::Test),
            class_ids: classes,
        });
    }
    Ok(stream)
}

impl TaskStream {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, task_id: u32) -> Result<&TaskSpec> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i as usize))
            .ok_or_else(|| MsdemError::invalid(format!("no task {task_id} in stream")))
    }

    pub fn backbones(&self) -> &[BackboneSpec] {
        &self.backbones
    }

    pub fn label_cardinality(&self) -> u32 {
        self.label_cardinality
    }

    pub fn domain_name(&self, domain_id: u32) -> &str {
        &self.domains[domain_id as usize].name
    }

    pub fn active_task(&self) -> u32 {
        self.active.get()
    }

    /// Make `task_id` the task whose training records may be read.
    pub fn set_active(&self, task_id: u32) -> Result<()> {
        self.task(task_id)?;
        self.active.set(task_id);
        Ok(())
    }

    fn records(&self, task_id: u32, split: Split) -> Result<Vec<FeatureRecord>> {
        let task = self.task(task_id)?;
        let domain = &self.domains[task.domain_id as usize];
        let wanted: HashSet<u32> = task.class_ids.iter().copied().collect();
        let mut out = domain.load(task.domain_id, split, &self.backbones)?;
        out.retain(|r| wanted.contains(&r.label));
        Ok(out)
    }

    pub fn train_records(&self, task_id: u32) -> Result<Vec<FeatureRecord>> {
        if task_id != self.active.get() {
            return Err(MsdemError::invalid(format!(
                "training data of task {task_id} requested while task {} is active",
                self.active.get()
            )));
        }
        self.records(task_id, Split::Train)
    }

    pub fn test_records(&self, task_id: u32) -> Result<Vec<FeatureRecord>> {
        if task_id > self.active.get() {
            return Err(MsdemError::invalid(format!(
                "test data of future task {task_id} requested while task {} is active",
                self.active.get()
            )));
        }
        self.records(task_id, Split::Test)
    }
}
