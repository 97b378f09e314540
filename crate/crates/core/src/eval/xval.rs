//! Leave-one-video-out cross-validation and report aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use super::train::{baseline_majority, evaluate, train_model, TrainConfig, TrainingCurve};
use crate::error::{Error, Result};
use crate::nn::model::ModelParams;
use crate::nn::{build_architecture, ModelName};
use crate::rng::{hash_str, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// Ordinal of the held-out video.
    pub test_video: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per video that has records; the others train.
pub fn lovo_folds(ds: &LabeledDataset) -> Result<Vec<Fold>> {
    let present: BTreeSet<u32> = ds.records().iter().map(|r| r.video).collect();
    if present.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "leave-one-video-out needs 2 videos, dataset has {}",
            present.len()
        )));
    }
    Ok(present
        .into_iter()
        .map(|v| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.records()[i].video == v);
            Fold {
                test_video: v,
                train,
                test,
            }
        })
        .collect())
}

/// Shuffles then puts `floor(n * val_fraction)` records in validation and
/// the rest in training.
pub fn split_train_val(records: &[usize], val_fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = (records.len() as f64 * val_fraction).floor() as usize;
    if n_val == 0 || records.len() - n_val < 2 {
        return Err(Error::InsufficientData(format!(
            "{} records cannot be split {val_fraction} for validation",
            records.len()
        )));
    }
    let mut order = records.to_vec();
    rng.shuffle(&mut order);
    let val = order.split_off(order.len() - n_val);
    Ok((order, val))
}

/// Seed of the fold holding out `video_id`.
pub fn fold_seed(run_seed: u64, video_id: &str) -> u64 {
    run_seed ^ hash_str(video_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub video_id: String,
    pub test_records: usize,
    pub test_accuracy: f64,
    pub baseline_accuracy: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub curve: TrainingCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub video_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub epsilon: f64,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub failures: Vec<FoldFailure>,
    pub mean_accuracy: f64,
    /// Half-width of the 95% normal interval over fold accuracies.
    pub ci95: f64,
    pub mean_baseline: f64,
    pub baseline_ci95: f64,
}

/// `(mean, 1.96 * s / sqrt(n))` with `s` the sample standard deviation.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn aggregate(
    model: ModelName,
    epsilon: f64,
    seed: u64,
    folds: Vec<FoldReport>,
    failures: Vec<FoldFailure>,
) -> Result<RunReport> {
    if folds.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} completed folds, need 2 to aggregate",
            folds.len()
        )));
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
    let base: Vec<f64> = folds.iter().map(|f| f.baseline_accuracy).collect();
    let (mean_accuracy, ci95) = mean_ci95(&acc);
    let (mean_baseline, baseline_ci95) = mean_ci95(&base);
    Ok(RunReport {
        model: model.as_str().to_string(),
        epsilon,
        seed,
        folds,
        failures,
        mean_accuracy,
        ci95,
        mean_baseline,
        baseline_ci95,
    })
}

/// Trains and tests one fold. Returns the report and the best parameters.
pub fn run_fold(
    name: ModelName,
    ds: &LabeledDataset,
    fold: &Fold,
    cfg: &TrainConfig,
) -> Result<(FoldReport, ModelParams)> {
    let spec = build_architecture(name);
    let video_id = ds.videos[fold.test_video as usize].video_id.clone();
    let rng = Rng::new(fold_seed(cfg.seed, &video_id));
    let (train, val) = split_train_val(&fold.train, cfg.val_fraction, &mut rng.derive(0))?;
    let (params, curve) = train_model(&spec, ds, &train, &val, cfg, &mut rng.derive(1))?;
    let test_accuracy = evaluate(&spec, &params, ds, &fold.test)?;
    let baseline_accuracy = baseline_majority(ds, &fold.train, &fold.test)?;
    let last = curve.epochs.last().expect("at least one epoch");
    info!(
        "{name} fold {video_id}: accuracy {test_accuracy:.3} baseline {baseline_accuracy:.3} ({} epochs, best {})",
        curve.epochs.len(),
        curve.best_epoch
    );
    Ok((
        FoldReport {
            video_id,
            test_records: fold.test.len(),
            test_accuracy,
            baseline_accuracy,
            epochs_run: curve.epochs.len(),
            best_epoch: curve.best_epoch,
            stopped_early: curve.stopped_early,
            final_train_loss: last.train_loss,
            final_val_loss: last.val_loss,
            curve,
        },
        params,
    ))
}

/// Outcome of a cross-validation run: the report plus the best
/// parameters of each completed fold, in fold order.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: RunReport,
    pub params: Vec<(String, ModelParams)>,
}

/// Runs every fold on `jobs` worker threads. Fold results depend only on
/// the dataset, config and held-out video, so the report is the same for
/// any `jobs`.
pub fn cross_validate(name: ModelName, ds: &LabeledDataset, cfg: &TrainConfig, jobs: usize) -> Result<CrossValidation> {
    cfg.validate()?;
    let folds = lovo_folds(ds)?;
    for f in &folds {
        debug_assert!(f.train.iter().all(|&i| ds.records()[i].video != f.test_video));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(FoldReport, ModelParams)>> =
        pool.install(|| folds.par_iter().map(|f| run_fold(name, ds, f, cfg)).collect());
    let mut reports = Vec::new();
    let mut params = Vec::new();
    let mut failures = Vec::new();
    for (fold, res) in folds.iter().zip(results) {
        let video_id = ds.videos[fold.test_video as usize].video_id.clone();
        match res {
            Ok((r, p)) => {
                params.push((video_id, p));
                reports.push(r);
            }
            Err(e) => {
                warn!("{name} fold {video_id} failed: {e}");
                failures.push(FoldFailure {
                    video_id,
                    error: e.to_string(),
                });
            }
        }
    }
    let report = aggregate(name, ds.epsilon, cfg.seed, reports, failures)?;
    Ok(CrossValidation { report, params })
}

/// Plain-text table: one row per epsilon, the baseline, then one column
/// per model, each cell `mean% ±ci%`.
pub fn format_table(reports: &[RunReport]) -> String {
    let mut eps: Vec<f64> = reports.iter().map(|r| r.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let cell = |m: f64, ci: f64| format!("{:.1}% ±{:.1}%", 100.0 * m, 100.0 * ci);
    let mut out = format!("{:<6} {:<16}", "eps", "Baseline");
    for m in &models {
        let _ = write!(out, " {m:<16}");
    }
    out.push('\n');
    for e in eps {
        let row: Vec<&RunReport> = reports.iter().filter(|r| r.epsilon == e).collect();
        let base = row.first().map(|r| cell(r.mean_baseline, r.baseline_ci95)).unwrap_or_default();
        let _ = write!(out, "{e:<6.2} {base:<16}");
        for m in &models {
            let c = row
                .iter()
                .find(|r| r.model == *m)
                .map(|r| cell(r.mean_accuracy, r.ci95))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " {c:<16}");
        }
        out.push('\n');
    }
    out
}
