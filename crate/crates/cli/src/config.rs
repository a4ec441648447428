use std::path::Path;

use anyhow::{bail, Context, Result};
use msdem::model::ModelConfig;
use msdem::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Synthetic stream description for `gen-synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub backbones: Vec<SynthBackbone>,
    pub domains: Vec<SynthDomain>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBackbone {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomain {
    pub name: String,
    pub n_classes: u32,
    pub classes_per_task: u32,
    pub samples_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_domain: Option<String>,
    #[serde(default)]
    pub perturbation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let domain = |i: usize| SynthDomain {
            name: format!("domain{}", i + 1),
            n_classes: 60,
            classes_per_task: 20,
            samples_per_class: 125,
            separation: 5.0,
            noise: 0.5,
            base_domain: None,
            perturbation: 0.0,
        };
        Self {
            seed: 7,
            backbones: vec![
                SynthBackbone {
                    name: "vit_a".into(),
                    dim: 64,
                },
                SynthBackbone {
                    name: "vit_b".into(),
                    dim: 64,
                },
            ],
            domains: (0..4).map(domain).collect(),
        }
    }
}

impl SynthConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.backbones.is_empty() {
            out.push("at least one backbone is required".to_string());
        }
        if self.domains.is_empty() {
            out.push("at least one domain is required".to_string());
        }
        for b in &self.backbones {
            if b.dim == 0 {
                out.push(format!("backbone `{}` has dim 0", b.name));
            }
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.n_classes < 2 {
                out.push(format!("domain `{}` needs at least 2 classes, got {}", d.name, d.n_classes));
            }
            if d.classes_per_task < 2 || d.classes_per_task > d.n_classes {
                out.push(format!(
                    "domain `{}`: classes_per_task {} must lie in 2..={}",
                    d.name, d.classes_per_task, d.n_classes
                ));
            }
            if d.samples_per_class < 2 {
                out.push(format!("domain `{}` needs at least 2 samples per class", d.name));
            }
            if !(d.separation > 0.0) {
                out.push(format!("domain `{}`: separation must be positive", d.name));
            }
            if !(d.noise >= 0.0) {
                out.push(format!("domain `{}`: noise must be non-negative", d.name));
            }
            if let Some(base) = &d.base_domain {
                if !self.domains[..i].iter().any(|o| &o.name == base) {
                    out.push(format!("domain `{}` perturbs `{base}`, which is not an earlier domain", d.name));
                }
            }
        }
        out
    }
}

/// Model and optimisation settings for `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Every validation failure, for the given backbones.
    pub fn problems(&self, backbones: &[msdem::features::BackboneSpec]) -> Vec<String> {
        let mut out: Vec<String> = self.model.problems(backbones).into_iter().map(|p| format!("model: {p}")).collect();
        out.extend(self.train.problems().into_iter().map(|p| format!("train: {p}")));
        for (name, lr) in [
            ("lr_expert", self.train.lr_expert),
            ("lr_router", self.train.lr_router),
            ("lr_attention", self.train.lr_attention),
        ] {
            if lr == 0.0 {
                out.push(format!("train: {name} must be positive"));
            }
        }
        out
    }
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match toml::from_str(&text) {
        Ok(v) => Ok(v),
        Err(e) => bail!("{}: {}", path.display(), e.to_string().replace('\n', " ")),
    }
}
