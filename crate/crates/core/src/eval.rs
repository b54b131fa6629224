//! Metric reports and the domain-generalization protocol harnesses.

use crate::autodiff::ParamStore;
use crate::model::{ExpertStyle, Model};
use crate::signal;
use crate::stmap::{read_stmap, DomainManifest, StMap};
use crate::train::{predict_windows, train, TrainConfig, TrainOutput};
use crate::{Error, Result};
use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;

/// MAE / RMSE / correlation over prediction-label pairs.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TaskMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub n: usize,
}

pub fn metrics_from_pairs(preds: &[f64], labels: &[f64]) -> Option<TaskMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return None;
    }
    let n = preds.len();
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        let d = p - y;
        abs += d.abs();
        sq += d * d;
    }
    Some(TaskMetrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        pearson: signal::pearson(preds, labels),
        n,
    })
}

/// One scalar prediction row of the flat CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PredictionRow {
    pub domain: String,
    pub subject: u32,
    pub task: String,
    pub prediction: f64,
    pub label: f64,
}

/// A predicted/true pulse pair kept for plotting.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BvpSample {
    pub domain: String,
    pub subject: u32,
    pub window_start: usize,
    pub predicted: Vec<f32>,
    pub truth: Vec<f32>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub target_domains: Vec<String>,
    /// hr / spo2 / rr metrics over their labeled windows.
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Mean per-window correlation of the predicted pulse.
    pub bvp_mean_pearson: Option<f64>,
    /// lfnu / hfnu / lf_hf errors of predicted-pulse HRV against
    /// ground-truth-pulse HRV.
    pub hrv: BTreeMap<String, TaskMetrics>,
    pub per_domain: BTreeMap<String, BTreeMap<String, TaskMetrics>>,
    pub n_windows: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// (experts, routers, heads, frozen) element counts.
    pub param_breakdown: (usize, usize, usize, usize),
    pub mac_estimate: u64,
    pub config_echo: TrainConfig,
    pub rows: Vec<PredictionRow>,
    pub bvp_samples: Vec<BvpSample>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let js = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("report: {e}")))?;
        std::fs::write(path, js).map_err(|e| Error::io(path, e))
    }

    /// Flat CSV: domain, subject, task, prediction, label.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "domain,subject,task,prediction,label").map_err(|e| Error::io(path, e))?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.domain, r.subject, r.task, r.prediction, r.label
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

const BVP_SAMPLES_PER_DOMAIN: usize = 4;

/// Evaluate a trained model on one or more target domains.
pub fn evaluate(
    model: &mut Model,
    store: &ParamStore,
    config: &TrainConfig,
    manifests: &[DomainManifest],
) -> Result<MetricsReport> {
    if manifests.is_empty() || manifests.iter().all(|m| m.entries.is_empty()) {
        return Err(Error::Invalid("evaluation manifest is empty".into()));
    }
    let mut tasks_acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut per_domain_acc: BTreeMap<String, BTreeMap<String, (Vec<f64>, Vec<f64>)>> =
        BTreeMap::new();
    let mut hrv_acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut rho_acc: Vec<f64> = Vec::new();
    let mut rows = Vec::new();
    let mut bvp_samples = Vec::new();
    let mut n_windows = 0usize;

    for m in manifests {
        let mut kept = 0usize;
        for e in &m.entries {
            let (map, labels) = read_stmap(&e.path)?;
            let maps: Vec<&StMap> = vec![&map];
            let preds = predict_windows(model, store, &maps, &config.model)?;
            let p = &preds[0];
            n_windows += 1;
            let mut push = |task: &str, pred: f64, label: f64| {
                let slot = tasks_acc.entry(task.into()).or_default();
                slot.0.push(pred);
                slot.1.push(label);
                let dslot = per_domain_acc
                    .entry(m.domain_id.clone())
                    .or_default()
                    .entry(task.into())
                    .or_default();
                dslot.0.push(pred);
                dslot.1.push(label);
                rows.push(PredictionRow {
                    domain: m.domain_id.clone(),
                    subject: e.subject_id,
                    task: task.into(),
                    prediction: pred,
                    label,
                });
            };
            if labels.mask.hr {
                push("hr", p.hr as f64, labels.hr as f64);
            }
            if labels.mask.spo2 {
                push("spo2", p.spo2 as f64, labels.spo2 as f64);
            }
            if labels.mask.rr {
                push("rr", p.rr as f64, labels.rr as f64);
            }
            if labels.mask.bvp {
                if let Some(rho) = signal::pearson32(&p.bvp, &labels.bvp) {
                    rho_acc.push(rho);
                }
                let fs = map.fps as f32;
                if let (Ok(Some(hp)), Ok(Some(ht))) = (
                    signal::hrv_metrics(&p.bvp, fs),
                    signal::hrv_metrics(&labels.bvp, fs),
                ) {
                    for (key, pv, tv) in [
                        ("lfnu", hp.lfnu, ht.lfnu),
                        ("hfnu", hp.hfnu, ht.hfnu),
                        ("lf_hf", hp.lf_over_hf, ht.lf_over_hf),
                    ] {
                        if pv.is_finite() && tv.is_finite() {
                            let slot = hrv_acc.entry(key.into()).or_default();
                            slot.0.push(pv);
                            slot.1.push(tv);
                        }
                    }
                }
                if kept < BVP_SAMPLES_PER_DOMAIN {
                    kept += 1;
                    bvp_samples.push(BvpSample {
                        domain: m.domain_id.clone(),
                        subject: e.subject_id,
                        window_start: e.window_start,
                        predicted: p.bvp.clone(),
                        truth: labels.bvp.clone(),
                    });
                }
            }
        }
    }

    let collect = |acc: BTreeMap<String, (Vec<f64>, Vec<f64>)>| {
        acc.into_iter()
            .filter_map(|(k, (p, y))| metrics_from_pairs(&p, &y).map(|m| (k, m)))
            .collect::<BTreeMap<_, _>>()
    };
    let tasks = collect(tasks_acc);
    let hrv = collect(hrv_acc);
    let per_domain = per_domain_acc
        .into_iter()
        .map(|(d, acc)| (d, collect(acc)))
        .collect();

    let (trainable_params, frozen_params) = store.param_counts();
    let style = if model.config.full_fine_tune || model.config.experts == 0 {
        ExpertStyle::None
    } else {
        ExpertStyle::LowRank {
            k: model.config.experts,
            rank: model.config.rank,
        }
    };
    Ok(MetricsReport {
        target_domains: manifests.iter().map(|m| m.domain_id.clone()).collect(),
        tasks,
        bvp_mean_pearson: if rho_acc.is_empty() {
            None
        } else {
            Some(rho_acc.iter().sum::<f64>() / rho_acc.len() as f64)
        },
        hrv,
        per_domain,
        n_windows,
        trainable_params,
        frozen_params,
        param_breakdown: store.counts_by_category(),
        mac_estimate: crate::model::flops_estimate(&model.config, style).total(),
        config_echo: config.clone(),
        rows,
        bvp_samples,
    })
}

/// Leave-one-domain-out: for each domain, train on all others and
/// evaluate on it. Training must never read a held-out file; the access
/// log is audited and a violation is an error.
pub fn run_protocol_i(
    config: &TrainConfig,
    manifests: &[DomainManifest],
    mut on_trained: Option<&mut dyn FnMut(&str, &Model, &ParamStore, &TrainOutput)>,
) -> Result<Vec<MetricsReport>> {
    if manifests.len() < 2 {
        return Err(Error::Config(
            "leave-one-domain-out needs at least two domains".into(),
        ));
    }
    let mut reports = Vec::new();
    for (i, target) in manifests.iter().enumerate() {
        let sources: Vec<DomainManifest> = manifests
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, m)| m.clone())
            .collect();
        let (mut model, store, out) = train(config, &sources, None, None)?;
        let target_files: HashSet<_> = target.entries.iter().map(|e| e.path.clone()).collect();
        if let Some(leak) = out.accessed_paths.iter().find(|p| target_files.contains(*p)) {
            return Err(Error::Invalid(format!(
                "leakage: training read held-out file {}",
                leak.display()
            )));
        }
        let report = evaluate(&mut model, &store, config, std::slice::from_ref(target))?;
        if let Some(cb) = on_trained.as_mut() {
            cb(&target.domain_id, &model, &store, &out);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Subject-disjoint folds of one domain, near-equal sizes, by sorted
/// subject id.
pub fn subject_folds(manifest: &DomainManifest, k: usize) -> Result<Vec<Vec<u32>>> {
    let mut subjects: Vec<u32> = manifest
        .entries
        .iter()
        .map(|e| e.subject_id)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    subjects.sort_unstable();
    if k < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let n = subjects.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(subjects[pos..pos + size].to_vec());
        pos += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<MetricsReport>,
    /// Per-task metrics averaged across folds (plain mean of each
    /// statistic; Pearson averaged over folds that define it).
    pub averaged: BTreeMap<String, TaskMetrics>,
}

pub fn average_fold_metrics(folds: &[MetricsReport]) -> BTreeMap<String, TaskMetrics> {
    let mut out = BTreeMap::new();
    let keys: HashSet<String> = folds
        .iter()
        .flat_map(|f| f.tasks.keys().cloned())
        .collect();
    for key in keys {
        let per: Vec<&TaskMetrics> = folds.iter().filter_map(|f| f.tasks.get(&key)).collect();
        if per.is_empty() {
            continue;
        }
        let n = per.len() as f64;
        let rhos: Vec<f64> = per.iter().filter_map(|m| m.pearson).collect();
        out.insert(
            key,
            TaskMetrics {
                mae: per.iter().map(|m| m.mae).sum::<f64>() / n,
                rmse: per.iter().map(|m| m.rmse).sum::<f64>() / n,
                pearson: if rhos.is_empty() {
                    None
                } else {
                    Some(rhos.iter().sum::<f64>() / rhos.len() as f64)
                },
                n: per.iter().map(|m| m.n).sum(),
            },
        );
    }
    out
}

/// k-fold cross-validation inside one domain, split by subject.
pub fn run_protocol_ii(
    config: &TrainConfig,
    manifest: &DomainManifest,
    k: usize,
) -> Result<CrossValidationReport> {
    let folds = subject_folds(manifest, k)?;
    // partition sanity: disjoint and covering
    let mut seen = HashSet::new();
    for fold in &folds {
        for s in fold {
            if !seen.insert(*s) {
                return Err(Error::Invalid(format!("subject {s} in two folds")));
            }
        }
    }
    let mut reports = Vec::new();
    for fold in &folds {
        let test_set: HashSet<u32> = fold.iter().copied().collect();
        let mut train_manifest = manifest.clone();
        train_manifest.entries = manifest
            .entries
            .iter()
            .filter(|e| !test_set.contains(&e.subject_id))
            .cloned()
            .collect();
        let mut test_manifest = manifest.clone();
        test_manifest.entries = manifest
            .entries
            .iter()
            .filter(|e| test_set.contains(&e.subject_id))
            .cloned()
            .collect();
        let train_subjects: HashSet<u32> = train_manifest
            .entries
            .iter()
            .map(|e| e.subject_id)
            .collect();
        if train_subjects.intersection(&test_set).next().is_some() {
            return Err(Error::Invalid("subject appears in train and test".into()));
        }
        let (mut model, store, _) = train(config, &[train_manifest], None, None)?;
        reports.push(evaluate(
            &mut model,
            &store,
            config,
            std::slice::from_ref(&test_manifest),
        )?);
    }
    let averaged = average_fold_metrics(&reports);
    Ok(CrossValidationReport {
        folds: reports,
        averaged,
    })
}
