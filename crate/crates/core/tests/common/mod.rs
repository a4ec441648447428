#![allow(dead_code)]

use std::path::Path;

use msdem::features::{
    build_stream, synth_domain, BackboneEntry, BackboneSpec, DomainEntry, FeatureRecord, Manifest, Split, SynthEntry,
    SynthParams, TaskSpec, TaskStream,
};
use msdem::model::{ModelConfig, MsdemModel};

pub fn backbones(dims: &[usize]) -> Vec<BackboneSpec> {
    dims.iter()
        .enumerate()
        .map(|(i, &d)| BackboneSpec {
            name: format!("bb{i}"),
            dim: d,
        })
        .collect()
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_e: 8,
        heads: 2,
        graph_heads: 2,
        ..ModelConfig::default()
    }
}

pub fn task(task_id: u32, classes: &[u32]) -> TaskSpec {
    TaskSpec {
        task_id,
        domain_id: 0,
        class_ids: classes.to_vec(),
        train_count: 0,
        test_count: 0,
    }
}

/// Train and test records of a synthetic domain with labels shifted by
/// `offset`.
pub fn synth_records(
    seed: u64,
    n_classes: usize,
    samples: usize,
    dims: &[usize],
    offset: u32,
) -> (Vec<FeatureRecord>, Vec<FeatureRecord>) {
    let d = synth_domain(&SynthParams {
        seed,
        n_classes,
        samples_per_class: samples,
        dims: dims.to_vec(),
        separation: 5.0,
        noise: 0.5,
        base_seed: None,
        perturbation: 0.0,
    })
    .unwrap();
    let conv = |s: &msdem::features::SyntheticSample, split| FeatureRecord {
        per_backbone: s.per_backbone.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect(),
        label: s.label + offset,
        domain_id: 0,
        split,
    };
    (
        d.train.iter().map(|s| conv(s, Split::Train)).collect(),
        d.test.iter().map(|s| conv(s, Split::Test)).collect(),
    )
}

/// A model with `n_tasks` two-class tasks started, classes `2(t-1), 2(t-1)+1`.
pub fn toy_model(n_tasks: u32) -> MsdemModel {
    let mut m = MsdemModel::new(toy_config(), backbones(&[16, 16])).unwrap();
    for t in 1..=n_tasks {
        m.begin_task(&task(t, &[2 * (t - 1), 2 * (t - 1) + 1])).unwrap();
    }
    m
}

/// Multinomial logistic regression trained by full-batch gradient descent.
/// Serves as the linear oracle, and, when trained task after task without a
/// reset, as the naive shared-head baseline.
pub struct SoftmaxRegression {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl SoftmaxRegression {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            w: vec![vec![0.0; dim]; classes],
            b: vec![0.0; classes],
        }
    }

    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }

    pub fn fit(&mut self, xs: &[Vec<f64>], ys: &[usize], iterations: usize, lr: f64) {
        let n = xs.len() as f64;
        for _ in 0..iterations {
            let mut gw = vec![vec![0.0; self.w[0].len()]; self.w.len()];
            let mut gb = vec![0.0; self.b.len()];
            for (x, &y) in xs.iter().zip(ys) {
                let s = self.scores(x);
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..e.len() {
                    let d = e[k] / z - if k == y { 1.0 } else { 0.0 };
                    gb[k] += d / n;
                    for (g, xi) in gw[k].iter_mut().zip(x) {
                        *g += d * xi / n;
                    }
                }
            }
            for k in 0..self.w.len() {
                self.b[k] -= lr * gb[k];
                for (w, g) in self.w[k].iter_mut().zip(&gw[k]) {
                    *w -= lr * g;
                }
            }
        }
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| {
                let s = self.scores(x);
                let best = (0..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b });
                best == y
            })
            .count();
        hits as f64 / xs.len() as f64
    }
}

/// Fused features and head positions of `records` for `task`.
pub fn design(records: &[FeatureRecord], task: &TaskSpec) -> (Vec<Vec<f64>>, Vec<usize>) {
    records
        .iter()
        .map(|r| (r.per_backbone.concat(), task.position(r.label).expect("label in task")))
        .unzip()
}

pub struct SynthDomainSpec {
    pub name: &'static str,
    pub n_classes: u32,
    pub classes_per_task: u32,
    pub seed: u64,
    pub samples_per_class: usize,
    pub base: Option<&'static str>,
    pub perturbation: f64,
}

impl SynthDomainSpec {
    pub fn new(name: &'static str, n_classes: u32, classes_per_task: u32, seed: u64, samples_per_class: usize) -> Self {
        Self {
            name,
            n_classes,
            classes_per_task,
            seed,
            samples_per_class,
            base: None,
            perturbation: 0.0,
        }
    }
}

pub fn synth_manifest(dims: &[usize], domains: &[SynthDomainSpec]) -> Manifest {
    let mut offset = 0;
    Manifest {
        seed: 0,
        backbones: dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| BackboneEntry {
                name: format!("bb{i}"),
                dim,
            })
            .collect(),
        domains: domains
            .iter()
            .map(|d| {
                let e = DomainEntry {
                    name: d.name.into(),
                    class_offset: offset,
                    n_classes: d.n_classes,
                    classes_per_task: Some(d.classes_per_task),
                    files: Vec::new(),
                    synthetic: Some(SynthEntry {
                        seed: d.seed,
                        samples_per_class: d.samples_per_class,
                        separation: 5.0,
                        noise: 0.5,
                        base_domain: d.base.map(String::from),
                        perturbation: d.perturbation,
                    }),
                };
                offset += d.n_classes;
                e
            })
            .collect(),
        tasks: Vec::new(),
    }
}

pub fn synth_stream(dims: &[usize], domains: &[SynthDomainSpec]) -> TaskStream {
    build_stream(&synth_manifest(dims, domains), Path::new(".")).unwrap()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-head loops over rows of `q`, `k`, `v` (`[t × heads·dh]`).
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, heads: usize, dh: usize, scale: f64) -> Vec<f64> {
    let w = heads * dh;
    let mut out = vec![0.0; t * w];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i * w + h * dh + c] * k[j * w + h * dh + c]).sum::<f64>() * scale)
                .collect();
            let p = naive_softmax(&scores);
            for c in 0..dh {
                out[i * w + h * dh + c] = (0..t).map(|j| p[j] * v[j * w + h * dh + c]).sum();
            }
        }
    }
    out
}
