mod common;

use std::path::Path;

use common::{backbones, design, synth_manifest, synth_records, task, toy_config, SoftmaxRegression, SynthDomainSpec};
use msdem::evaluation::{evaluate_task, forgetting_curve, pca_project, router_dependency, MetricsReport};
use msdem::features::{build_stream, synth_domain, FeatureRecord, Split, SynthParams, TaskEntry};
use msdem::model::MsdemModel;
use msdem::numerics::Tensor;
use msdem::trainer::{train_stream, train_task, TrainConfig};

fn trained_toy() -> (MsdemModel, msdem::features::TaskSpec, Vec<FeatureRecord>) {
    let mut m = MsdemModel::new(toy_config(), backbones(&[16, 16])).unwrap();
    let spec = task(1, &[0, 1, 2]);
    m.begin_task(&spec).unwrap();
    let (train, test) = synth_records(4, 3, 20, &[16, 16], 0);
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_task(&mut m, &spec, &train, &cfg).unwrap();
    (m, spec, test)
}

#[test]
fn accuracy_matches_confusion_matrix_tally() {
    let (m, spec, test) = trained_toy();
    let k = spec.class_ids.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for r in &test {
        let truth = spec.position(r.label).unwrap();
        let pred = spec.position(m.predict(r, 1).unwrap()).unwrap();
        confusion[truth][pred] += 1;
    }
    let diag: usize = (0..k).map(|i| confusion[i][i]).sum();
    let total: usize = confusion.iter().flatten().sum();
    assert_eq!(evaluate_task(&m, &spec, &test).unwrap(), diag as f64 / total as f64);
}

#[test]
fn evaluation_is_idempotent_and_bounded() {
    let (m, spec, test) = trained_toy();
    let a = evaluate_task(&m, &spec, &test).unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(a.to_bits(), evaluate_task(&m, &spec, &test).unwrap().to_bits());
}

#[test]
fn empty_test_set_is_an_error() {
    let (m, spec, _) = trained_toy();
    assert!(evaluate_task(&m, &spec, &[]).is_err());
}

#[test]
fn zeroed_classifier_scores_first_class_share() {
    let (mut m, spec, test) = trained_toy();
    let e = m.expert(1).unwrap().clone();
    m.store.set_value(e.cls_w, Tensor::zeros(&[8, 3])).unwrap();
    m.store.set_value(e.cls_b, Tensor::zeros(&[3])).unwrap();
    // drop some first-class records so the share is not a round third
    let subset: Vec<FeatureRecord> = test.iter().enumerate().filter(|(i, r)| r.label != 0 || i % 2 == 0).map(|(_, r)| r.clone()).collect();
    let first = subset.iter().filter(|r| r.label == 0).count();
    assert_eq!(evaluate_task(&m, &spec, &subset).unwrap(), first as f64 / subset.len() as f64);
}

#[test]
fn noiseless_task_is_perfect() {
    let d = synth_domain(&SynthParams {
        seed: 8,
        n_classes: 3,
        samples_per_class: 20,
        dims: vec![16, 16],
        separation: 5.0,
        noise: 0.0,
        base_seed: None,
        perturbation: 0.0,
    })
    .unwrap();
    let conv = |split| -> Vec<FeatureRecord> {
        d.samples(split)
            .iter()
            .map(|s| FeatureRecord {
                per_backbone: s.per_backbone.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect(),
                label: s.label,
                domain_id: 0,
                split,
            })
            .collect()
    };
    let mut m = MsdemModel::new(toy_config(), backbones(&[16, 16])).unwrap();
    let spec = task(1, &[0, 1, 2]);
    m.begin_task(&spec).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs_per_task: 3,
        ..TrainConfig::default()
    };
    train_task(&mut m, &spec, &conv(Split::Train), &cfg).unwrap();
    assert_eq!(evaluate_task(&m, &spec, &conv(Split::Test)).unwrap(), 1.0);
}

#[test]
fn report_headlines_recompute_from_matrix() {
    let m = common::toy_model(3);
    let acc = vec![vec![0.9], vec![0.9, 0.7], vec![0.9, 0.7, 0.4]];
    let r = MetricsReport::new(acc.clone(), &m).unwrap();
    assert_eq!(r.average, (0.9 + 0.7 + 0.4) / 3.0);
    assert_eq!(r.last, 0.4);
    assert_eq!(r.average_all, (0.9 + 0.9 + 0.7 + 0.9 + 0.7 + 0.4) / 6.0);
    assert_eq!(MetricsReport::from_toml(&r.to_toml()).unwrap(), r);
    assert!(MetricsReport::new(vec![vec![1.5]], &common::toy_model(1)).is_err());
    assert!(MetricsReport::new(vec![vec![0.5, 0.5]], &common::toy_model(1)).is_err());

    let dir = tempfile::tempdir().unwrap();
    let files = r.write_files(dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("forgetting.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 2 + 1);
}

#[test]
fn single_task_curve_is_a_single_point() {
    let r = MetricsReport::new(vec![vec![0.8]], &common::toy_model(1)).unwrap();
    assert_eq!(forgetting_curve(&r), vec![vec![0.8]]);
    assert_eq!(r.router_dependency, vec![vec![1.0]]);
}

#[test]
fn router_dependency_rows_sum_to_one() {
    let stream = common::synth_stream(&[16, 16], &[SynthDomainSpec::new("a", 4, 2, 1, 10), SynthDomainSpec::new("b", 4, 2, 2, 10)]);
    let mut m = MsdemModel::new(toy_config(), stream.backbones().to_vec()).unwrap();
    let out = train_stream(&mut m, &stream, &TrainConfig { batch_size: 8, ..TrainConfig::default() }).unwrap();
    let (raw, norm) = router_dependency(&m).unwrap();
    assert_eq!(raw, out.report.router_dependency);
    for (i, (row, nrow)) in raw.iter().zip(&norm).enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(nrow[i], 1.0);
    }
}

/// Two domains with identical class means, where the second task lists its
/// classes in swapped order, so every input's head position flips.
fn conflicting_manifest() -> msdem::features::Manifest {
    let mut b = SynthDomainSpec::new("b", 2, 2, 2, 40);
    b.base = Some("a");
    let mut m = synth_manifest(&[16, 16], &[SynthDomainSpec::new("a", 2, 2, 1, 40), b]);
    m.tasks = vec![
        TaskEntry {
            domain: "a".into(),
            classes: vec![0, 1],
        },
        TaskEntry {
            domain: "b".into(),
            classes: vec![3, 2],
        },
    ];
    m
}

#[test]
fn shared_head_baseline_forgets_while_msdem_does_not() {
    let stream = build_stream(&conflicting_manifest(), Path::new(".")).unwrap();
    let tasks = stream.tasks().to_vec();

    let mut baseline = SoftmaxRegression::new(32, 2);
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for spec in &tasks {
        stream.set_active(spec.task_id).unwrap();
        let (x, y) = design(&stream.train_records(spec.task_id).unwrap(), spec);
        baseline.fit(&x, &y, 200, 0.05);
        let row = tasks[..spec.task_id as usize]
            .iter()
            .map(|s| {
                let (xt, yt) = design(&stream.test_records(s.task_id).unwrap(), s);
                baseline.accuracy(&xt, &yt)
            })
            .collect();
        acc.push(row);
    }
    let report = MetricsReport {
        average: 0.0,
        last: 0.0,
        average_all: 0.0,
        router_dependency: Vec::new(),
        router_dependency_normalized: Vec::new(),
        completed_steps: Vec::new(),
        accuracy: acc,
    };
    let baseline_curve = &forgetting_curve(&report)[0];
    assert!(baseline_curve[0] > 0.95, "{baseline_curve:?}");
    assert!(baseline_curve.windows(2).all(|w| w[1] < w[0]), "{baseline_curve:?}");

    let mut m = MsdemModel::new(toy_config(), stream.backbones().to_vec()).unwrap();
    let out = train_stream(&mut m, &stream, &TrainConfig { batch_size: 8, ..TrainConfig::default() }).unwrap();
    let msdem_curve = &forgetting_curve(&out.report)[0];
    assert!(msdem_curve.windows(2).all(|w| w[1] == w[0]), "{msdem_curve:?}");
    assert!(msdem_curve[1] > baseline_curve[1]);
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// (eigenvalue, eigenvector) pairs sorted by descending eigenvalue.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|i| (a[i][i], v.iter().map(|row| row[i]).collect())).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    pairs
}

#[test]
fn pca_agrees_with_direct_eigensolver() {
    let mut s = 99u64;
    let scales = [4.0, 2.5, 1.5, 0.8, 0.3];
    let data: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let z: Vec<f64> = scales.iter().map(|sc| sc * lcg(&mut s)).collect();
            // fixed mixing so components are not axis-aligned
            (0..5).map(|i| (0..5).map(|j| z[j] * if i == j { 1.0 } else { 0.2 * ((i + 2 * j) % 3) as f64 - 0.2 }).sum()).collect()
        })
        .collect();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..5).map(|i| data.iter().map(|v| v[i]).sum::<f64>() / n).collect();
    let cov: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..5).map(|j| data.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / (n - 1.0)).collect())
        .collect();
    let oracle = jacobi_eigen(cov);
    let pca = pca_project(&data, 3).unwrap();
    for c in 0..3 {
        let (lambda, vec) = &oracle[c];
        assert!((pca.variances[c] - lambda).abs() < 1e-6 * lambda.max(1.0), "{c}: {} vs {lambda}", pca.variances[c]);
        let sign = if pca.components[c].iter().zip(vec).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in pca.components[c].iter().zip(vec) {
            assert!((a - sign * b).abs() < 1e-6, "component {c}");
        }
    }
    let total: f64 = oracle.iter().map(|p| p.0).sum();
    assert!((pca.total_variance - total).abs() < 1e-9);
}

#[test]
fn pca_on_a_line_captures_everything() {
    let data: Vec<Vec<f64>> = (0..50).map(|i| {
        let t = i as f64 / 10.0;
        vec![1.0 + 2.0 * t, -t, 0.5 * t + 1e-4 * ((i % 3) as f64)]
    }).collect();
    let pca = pca_project(&data, 2).unwrap();
    assert!(pca.variances[0] / pca.total_variance > 0.999);
    for p in &pca.projected {
        assert_eq!(p.len(), 2);
    }
    let centered_sum: f64 = pca.projected.iter().map(|p| p[0]).sum();
    assert!(centered_sum.abs() < 1e-9);
}

#[test]
fn pca_preserves_distances_within_its_subspace() {
    let mut s = 5u64;
    let (u, w) = ([0.6, 0.0, 0.8, 0.0], [0.0, 1.0, 0.0, 0.0]);
    let data: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let (a, b) = (3.0 * lcg(&mut s), lcg(&mut s));
            (0..4).map(|i| 7.0 + a * u[i] + b * w[i]).collect()
        })
        .collect();
    let pca = pca_project(&data, 2).unwrap();
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            assert!((dist(&data[i], &data[j]) - dist(&pca.projected[i], &pca.projected[j])).abs() < 1e-6);
        }
    }
}

#[test]
fn pca_rejects_bad_requests() {
    let data = vec![vec![1.0, 2.0], vec![3.0, 5.0]];
    assert!(pca_project(&data, 3).is_err());
    assert!(pca_project(&data[..1], 1).is_err());
}
