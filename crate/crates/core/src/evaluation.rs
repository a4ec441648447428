//! Accuracy matrices, forgetting curves, router dependency and PCA.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgwr::matrix_csv;
use crate::error::{MsdemError, Result};
use crate::features::{FeatureRecord, TaskSpec};
use crate::model::MsdemModel;

const EVAL_CHUNK: usize = 256;

/// Fraction of `test_data` predicted correctly with task identity given.
pub fn evaluate_task(model: &MsdemModel, task: &TaskSpec, test_data: &[FeatureRecord]) -> Result<f64> {
    if test_data.is_empty() {
        return Err(MsdemError::invalid(format!("task {} has no test records", task.task_id)));
    }
    let correct = test_data
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<usize> {
            let refs: Vec<&FeatureRecord> = chunk.iter().collect();
            let preds = model.predict_batch(&refs, task.task_id)?;
            Ok(preds.iter().zip(chunk).filter(|(p, r)| **p == r.label).count())
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / test_data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `accuracy[i][j]`: task `j+1` measured after training task `i+1`.
    pub accuracy: Vec<Vec<f64>>,
    /// Mean of the final row.
    pub average: f64,
    /// Final task's accuracy after the whole stream.
    pub last: f64,
    /// Mean over every measured entry.
    pub average_all: f64,
    pub router_dependency: Vec<Vec<f64>>,
    pub router_dependency_normalized: Vec<Vec<f64>>,
    /// Cumulative optimisation steps at the end of each task.
    pub completed_steps: Vec<u64>,
}

impl MetricsReport {
    pub fn new(accuracy: Vec<Vec<f64>>, model: &MsdemModel) -> Result<Self> {
        let n = accuracy.len();
        if n == 0 {
            return Err(MsdemError::invalid("no accuracies to report"));
        }
        for (i, row) in accuracy.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(MsdemError::invalid(format!("accuracy row {} has {} entries", i + 1, row.len())));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(MsdemError::invalid(format!("accuracy row {} outside [0, 1]", i + 1)));
            }
        }
        let last_row = &accuracy[n - 1];
        let average = last_row.iter().sum::<f64>() / n as f64;
        let last = last_row[n - 1];
        let cells: Vec<f64> = accuracy.iter().flatten().copied().collect();
        let average_all = cells.iter().sum::<f64>() / cells.len() as f64;
        let (raw, normalized) = router_dependency(model)?;
        let mut total = 0;
        let completed_steps = (1..=n as u32)
            .map(|t| {
                total += model.task_steps.get(&t).copied().unwrap_or(0);
                total
            })
            .collect();
        Ok(Self {
            accuracy,
            average,
            last,
            average_all,
            router_dependency: raw,
            router_dependency_normalized: normalized,
            completed_steps,
        })
    }

    /// Report from final accuracies only: every later measurement of a task
    /// repeats its final value, which is exact for this model because
    /// completed tasks never change.
    pub fn from_final(final_accuracy: &[f64], model: &MsdemModel) -> Result<Self> {
        let accuracy = (1..=final_accuracy.len()).map(|i| final_accuracy[..i].to_vec()).collect();
        Self::new(accuracy, model)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MsdemError::Config(e.to_string()))
    }

    /// Write `metrics.toml` and the CSV tables into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| MsdemError::io(dir.display().to_string(), e))?;
        let files = [
            ("metrics.toml", self.to_toml()),
            ("accuracy.csv", matrix_csv(&self.accuracy)),
            ("forgetting.csv", forgetting_csv(&forgetting_curve(self))),
            ("router_dependency.csv", matrix_csv(&self.router_dependency)),
            ("router_dependency_normalized.csv", matrix_csv(&self.router_dependency_normalized)),
        ];
        let mut out = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| MsdemError::io(path.display().to_string(), e))?;
            out.push(path);
        }
        Ok(out)
    }
}

/// For each task `j`, its accuracies after tasks `j, j+1, .., N`.
pub fn forgetting_curve(report: &MetricsReport) -> Vec<Vec<f64>> {
    let n = report.accuracy.len();
    (0..n).map(|j| (j..n).map(|i| report.accuracy[i][j]).collect()).collect()
}

fn forgetting_csv(curves: &[Vec<f64>]) -> String {
    let mut out = String::from("task,after_task,accuracy\n");
    for (j, curve) in curves.iter().enumerate() {
        for (k, a) in curve.iter().enumerate() {
            writeln!(out, "{},{},{a}", j + 1, j + 1 + k).expect("write to string");
        }
    }
    out
}

/// Noise-free router weights of every task (raw), and each row divided by
/// its diagonal entry.
pub fn router_dependency(model: &MsdemModel) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut raw = Vec::new();
    let mut normalized = Vec::new();
    for t in 1..=model.current_task {
        let w = model.router_weights(t)?;
        let diag = w[t as usize - 1];
        normalized.push(w.iter().map(|x| x / diag).collect());
        raw.push(w);
    }
    Ok((raw, normalized))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
    /// Total variance of the data.
    pub total_variance: f64,
    /// Centered data projected onto the components.
    pub projected: Vec<Vec<f64>>,
}

const PCA_TOLERANCE: f64 = 1e-8;
const PCA_MAX_ITERATIONS: usize = 1000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Project onto the top `k` principal directions, found by power iteration
/// on the covariance matrix with deflation.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Pca> {
    if vectors.len() < 2 {
        return Err(MsdemError::invalid("PCA needs at least two vectors"));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(MsdemError::invalid("PCA vectors differ in length"));
    }
    if k == 0 || k > d {
        return Err(MsdemError::invalid(format!("cannot take {k} components of {d}-dimensional data")));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for v in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v[i] * v[j] / (n - 1.0);
            }
        }
    }
    let total_variance = (0..d).map(|i| cov[i][i]).sum();

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        // fixed, non-symmetric start so no direction is systematically missed
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + c * 3) % 11) as f64).collect();
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERATIONS {
            let mut w = mat_vec(&cov, &v);
            let nw = dot(&w, &w).sqrt();
            if nw == 0.0 {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            lambda = nw;
            if diff < PCA_TOLERANCE {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    let projected = centered.iter().map(|v| components.iter().map(|c| dot(c, v)).collect()).collect();
    Ok(Pca {
        mean,
        components,
        variances,
        total_variance,
        projected,
    })
}
