use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MsdemError, Result};
use crate::features::format::write_feature_file;
use crate::rng::rng_for;

const TAG_MEANS: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_PERTURB: u64 = 3;

/// Gaussian class clusters, one mean per (backbone, class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub dims: Vec<usize>,
    pub separation: f64,
    pub noise: f64,
    /// When set, class means are `base` domain means plus
    /// `N(0, perturbation²)`, with `base` drawn from `base_seed`.
    #[serde(default)]
    pub base_seed: Option<u64>,
    #[serde(default)]
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Domain-local class index.
    pub label: u32,
    pub per_backbone: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomain {
    pub params: SynthParams,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(MsdemError::invalid(format!(
                "synthetic domain needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.samples_per_class < 2 {
            return Err(MsdemError::invalid("need at least 2 samples per class for a train/test split"));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(MsdemError::invalid("backbone dims must be non-empty and positive"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(MsdemError::invalid("separation must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(MsdemError::invalid("noise must be non-negative"));
        }
        if !(self.perturbation >= 0.0) || !self.perturbation.is_finite() {
            return Err(MsdemError::invalid("perturbation must be non-negative"));
        }
        Ok(())
    }

    /// Training samples per class under the 80/20 split.
    pub fn train_per_class(&self) -> usize {
        ((self.samples_per_class as f64) * 0.8).round() as usize
    }

    fn means_from(&self, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = rng_for(seed, &[TAG_MEANS]);
        let dist = Normal::new(0.0, self.separation).expect("validated separation");
        self.dims
            .iter()
            .map(|&d| {
                (0..self.n_classes)
                    .map(|_| (0..d).map(|_| dist.sample(&mut rng)).collect())
                    .collect()
            })
            .collect()
    }

    /// Class means indexed `[backbone][class][dim]`.
    pub fn class_means(&self) -> Vec<Vec<Vec<f64>>> {
        match self.base_seed {
            None => self.means_from(self.seed),
            Some(base) => {
                let mut means = self.means_from(base);
                let mut rng = rng_for(self.seed, &[TAG_PERTURB]);
                let dist = Normal::new(0.0, self.perturbation).expect("validated perturbation");
                for v in means.iter_mut().flatten().flatten() {
                    *v += dist.sample(&mut rng);
                }
                means
            }
        }
    }
}

/// Generate a synthetic domain deterministically from `params.seed`.
pub fn synth_domain(params: &SynthParams) -> Result<SyntheticDomain> {
    params.validate()?;
    let means = params.class_means();
    let mut rng = rng_for(params.seed, &[TAG_SAMPLES]);
    let dist = Normal::new(0.0, params.noise).expect("validated noise");
    let n_train = params.train_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..params.n_classes {
        for s in 0..params.samples_per_class {
            let per_backbone = means
                .iter()
                .map(|m| m[c].iter().map(|mu| (mu + dist.sample(&mut rng)) as f32).collect())
                .collect();
            let sample = SyntheticSample {
                label: c as u32,
                per_backbone,
            };
            if s < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(SyntheticDomain {
        params: params.clone(),
        train,
        test,
    })
}

impl SyntheticDomain {
    pub fn samples(&self, split: crate::features::Split) -> &[SyntheticSample] {
        match split {
            crate::features::Split::Train => &self.train,
            crate::features::Split::Test => &self.test,
        }
    }

    /// Write one MSFV file per (backbone, split) into `dir`, named
    /// `{domain}_{backbone}_{split}.msfv`. Returns `(train, test)` paths per
    /// backbone, in backbone order. `dir` is created if missing.
    pub fn write_files(
        &self,
        dir: &Path,
        domain: &str,
        backbone_names: &[String],
    ) -> Result<Vec<(PathBuf, PathBuf)>> {
        if backbone_names.len() != self.params.dims.len() {
            return Err(MsdemError::invalid(format!(
                "{} backbone names for {} backbones",
                backbone_names.len(),
                self.params.dims.len()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| MsdemError::io(dir, e))?;
        let mut out = Vec::new();
        for (j, name) in backbone_names.iter().enumerate() {
            let mut paths = Vec::new();
            for (split, samples) in [("train", &self.train), ("test", &self.test)] {
                let path = dir.join(format!("{domain}_{name}_{split}.msfv"));
                let recs: Vec<(u32, Vec<f32>)> = samples
                    .iter()
                    .map(|s| (s.label, s.per_backbone[j].clone()))
                    .collect();
                write_feature_file(&path, self.params.dims[j] as u32, self.params.n_classes as u32, &recs)?;
                paths.push(path);
            }
            out.push((paths[0].clone(), paths[1].clone()));
        }
        Ok(out)
    }
}

/// Split `n_classes` consecutive global ids starting at `offset` into tasks of
/// `per_task` classes (the last task takes any remainder).
pub(crate) fn partition_classes(offset: u32, n_classes: u32, per_task: u32) -> Result<Vec<Vec<u32>>> {
    if per_task < 2 {
        return Err(MsdemError::invalid("classes_per_task must be at least 2"));
    }
    if n_classes < per_task {
        return Err(MsdemError::invalid(format!(
            "{n_classes} classes cannot fill a task of {per_task}"
        )));
    }
    let mut tasks = Vec::new();
    let mut start = 0;
    while start < n_classes {
        let end = (start + per_task).min(n_classes);
        if end - start < 2 {
            // fold a lone trailing class into the previous task
            let last: &mut Vec<u32> = tasks.last_mut().expect("at least one task");
            last.extend((start..end).map(|c| offset + c));
        } else {
            tasks.push((start..end).map(|c| offset + c).collect());
        }
        start = end;
    }
    Ok(tasks)
}
