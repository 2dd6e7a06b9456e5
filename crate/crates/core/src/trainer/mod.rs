//! Two-stage optimization, stratified cross-validation and evaluation.
//!
//! Per fold the outer training set is split 80/20 into inner train and
//! inner validation. The phase-partition autoencoder is pretrained on inner
//! train only, the changepoint threshold is chosen by inner-validation
//! accuracy of a model trained on inner train, and the final model is
//! trained on the whole outer training set with that threshold.

pub mod baseline;
pub mod gradcheck;
pub mod metrics;

use crate::app::{self, AppConfig, AppModel, AppTrainConfig, DetectionRule, TAU_C_GRID};
use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};
use crate::model::{LossValues, LossWeights, MainModel, ModelConfig};
use crate::nn::{Adam, AdamConfig};
use crate::segfc::{build_partition, PhasePartition, MIN_FC_LEN};
use crate::synthgen::BoldRecording;
use log::{debug, info, warn};
use metrics::{compute_metrics, confusion, mean_std, Confusion, Metrics};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Architecture of the phase-partition autoencoder apart from the data
/// dependent ROI count and the window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppArch {
    pub hidden: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub state_dim: usize,
}

impl Default for AppArch {
    fn default() -> Self {
        let c = AppConfig::new(1, 1);
        Self { hidden: c.hidden, kernel: c.kernel, latent_dim: c.latent_dim, state_dim: c.state_dim }
    }
}

impl AppArch {
    pub fn config(&self, n_rois: usize, window: usize) -> AppConfig {
        AppConfig { n_rois, window, hidden: self.hidden, kernel: self.kernel, latent_dim: self.latent_dim, state_dim: self.state_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub folds: usize,
    pub inner_val_fraction: f64,
    pub batch_size: usize,
    pub main_epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Segment length for the autoencoder.
    pub window: usize,
    pub tau_c_grid: Vec<f64>,
    pub app: AppTrainConfig,
    pub app_arch: AppArch,
    pub detection: DetectionRule,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            folds: 5,
            inner_val_fraction: 0.2,
            batch_size: 8,
            main_epochs: 150,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            window: crate::segfc::SHORT_WINDOW,
            tau_c_grid: TAU_C_GRID.to_vec(),
            app: AppTrainConfig::default(),
            app_arch: AppArch::default(),
            detection: DetectionRule::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.inner_val_fraction > 0.0 && self.inner_val_fraction < 1.0) {
            return Err(Error::Config(format!("inner_val_fraction must lie in (0, 1), got {}", self.inner_val_fraction)));
        }
        if self.tau_c_grid.is_empty() || self.tau_c_grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("tau_c_grid must be a nonempty list of positive thresholds".into()));
        }
        if self.app.detect_stride == 0 || self.app.train_stride == 0 {
            return Err(Error::Config("APP strides must be positive".into()));
        }
        self.app_arch.config(1, self.window).validate()?;
        self.app.weights.validate()?;
        self.model.validate()?;
        self.loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, clip_norm: Some(self.clip_norm), ..Default::default() }
    }
}

const STREAM_FOLDS: u64 = 1;
const STREAM_INNER: u64 = 2;
const STREAM_APP: u64 = 3;
const STREAM_MAIN: u64 = 4;

/// Independent child seed for a named stream and index.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Test-fold membership lists, stratified by label.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut folds = vec![Vec::new(); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Config(format!("class {class} has {} subjects, fewer than {k} folds", members.len())));
        }
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            folds[(j + offset) % k].push(i);
        }
        offset += labels.iter().filter(|&&l| l == class).count();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified split of `indices` into (train, validation).
pub fn inner_split(indices: &[usize], labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..2 {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_val = if members.len() >= 2 { ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1) } else { 0 };
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Fail unless the two id sets are disjoint.
pub fn assert_disjoint(a: &[String], b: &[String], what: &str) -> Result<()> {
    let left: BTreeSet<&String> = a.iter().collect();
    if let Some(shared) = b.iter().find(|id| left.contains(id)) {
        return Err(Error::Internal(format!("leakage: subject {shared} appears in both sets of {what}")));
    }
    Ok(())
}

/// Phase partition of one recording from its state codes.
pub fn partition_for(codes: &Mat, recording: &BoldRecording, tau_c: f64, cfg: &TrainConfig) -> Result<PhasePartition> {
    let t = recording.n_timepoints();
    let b = app::partition_boundaries(codes, tau_c, cfg.window, cfg.app.detect_stride, t, &cfg.detection);
    build_partition(&recording.signal, &b, MIN_FC_LEN)
}

pub struct MainOutcome {
    pub model: MainModel,
    /// Per-epoch means of every loss term.
    pub curve: Vec<LossValues>,
}

/// Train a fresh classifier on the given partitions.
pub fn train_main(n_rois: usize, partitions: &[&PhasePartition], labels: &[usize], cfg: &TrainConfig, seed: u64) -> Result<MainOutcome> {
    let mut model = MainModel::new(n_rois, cfg.model, seed)?;
    let mut opt = Adam::new(cfg.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..partitions.len()).collect();
    let mut curve = Vec::with_capacity(cfg.main_epochs);
    for epoch in 0..cfg.main_epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a singleton batch has no contrastive pairs; fold it into its neighbour
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let n = batches.len() - 1;
            batches[n] = &order[n * cfg.batch_size..];
        }
        let mut epoch_sum = LossValues::default();
        for batch in batches {
            let parts: Vec<&PhasePartition> = batch.iter().map(|&i| partitions[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let loss = model.batch_loss(&p, &tape, &parts, &ys, &cfg.loss)?;
            let values = loss.values();
            if !values.total.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("training loss {}", values.total) });
            }
            epoch_sum.accumulate(&values, batch.len() as f64 / partitions.len() as f64);
            let grads = p.grads(&tape.backward(loss.total));
            opt.step(&mut model.params, &grads);
        }
        debug!("main epoch {epoch}: ce {:.5} total {:.5}", epoch_sum.ce, epoch_sum.total);
        curve.push(epoch_sum);
    }
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        if curve.len() > 1 && last.ce >= first.ce {
            warn!("training cross-entropy did not decrease ({:.5} -> {:.5})", first.ce, last.ce);
        }
    }
    Ok(MainOutcome { model, curve })
}

/// Threshold candidates scored on inner validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub tau_c: f64,
    pub val_accuracy: f64,
    pub mean_phases: f64,
}

/// Everything learned from one training set.
pub struct FittedPipeline {
    pub app: AppModel,
    pub tau_c: f64,
    pub model: MainModel,
    pub app_curve: Vec<f64>,
    pub main_curve: Vec<LossValues>,
    pub threshold_scores: Vec<ThresholdScore>,
    pub inner_train: Vec<usize>,
    pub inner_val: Vec<usize>,
}

/// Run both stages on `train` (indices into `data`).
pub fn fit_pipeline(data: &[BoldRecording], train: &[usize], cfg: &TrainConfig, seed: u64) -> Result<FittedPipeline> {
    cfg.validate()?;
    let n_rois = data[train[0]].n_rois();
    let labels: Vec<usize> = data.iter().map(|r| r.label).collect();
    let (inner_train, inner_val) = inner_split(train, &labels, cfg.inner_val_fraction, derive_seed(seed, STREAM_INNER, 0));
    let ids = |ix: &[usize]| ix.iter().map(|&i| data[i].subject_id.clone()).collect::<Vec<_>>();
    assert_disjoint(&ids(&inner_train), &ids(&inner_val), "inner train/validation")?;

    let app_model = AppModel::new(cfg.app_arch.config(n_rois, cfg.window), derive_seed(seed, STREAM_APP, 0))?;
    let signals: Vec<&Mat> = inner_train.iter().map(|&i| &data[i].signal).collect();
    let pre = app::pretrain_app(app_model, &signals, &cfg.app, derive_seed(seed, STREAM_APP, 1))?;
    info!("APP pretrained on {} subjects, final loss {:.5}", signals.len(), pre.loss_curve.last().copied().unwrap_or(f64::NAN));

    let codes: Vec<Option<Mat>> = (0..data.len())
        .map(|i| if train.contains(&i) { app::state_codes(&pre.model, &data[i].signal, cfg.app.detect_stride).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    let partitions_at = |tau: f64, ix: &[usize]| -> Result<Vec<PhasePartition>> {
        ix.iter().map(|&i| partition_for(codes[i].as_ref().expect("training subject codes"), &data[i], tau, cfg)).collect()
    };

    let mut threshold_scores = Vec::with_capacity(cfg.tau_c_grid.len());
    for (g, &tau) in cfg.tau_c_grid.iter().enumerate() {
        let tr = partitions_at(tau, &inner_train)?;
        let va = partitions_at(tau, &inner_val)?;
        let tr_labels: Vec<usize> = inner_train.iter().map(|&i| labels[i]).collect();
        let va_labels: Vec<usize> = inner_val.iter().map(|&i| labels[i]).collect();
        let out = train_main(n_rois, &tr.iter().collect::<Vec<_>>(), &tr_labels, cfg, derive_seed(seed, STREAM_MAIN, g as u64))?;
        let scores = out.model.predict(&va.iter().collect::<Vec<_>>())?;
        let correct = metrics::predictions(&scores, &va_labels).into_iter().zip(&va_labels).filter(|(p, l)| p == *l).count();
        let val_accuracy = correct as f64 / va_labels.len().max(1) as f64;
        let mean_phases = tr.iter().chain(&va).map(|p| p.phase_count() as f64).sum::<f64>() / (tr.len() + va.len()) as f64;
        info!("tau_c {tau}: inner validation accuracy {val_accuracy:.3}, {mean_phases:.2} phases on average");
        threshold_scores.push(ThresholdScore { tau_c: tau, val_accuracy, mean_phases });
    }
    let best = threshold_scores.iter().fold(threshold_scores[0], |b, s| if s.val_accuracy > b.val_accuracy { *s } else { b });

    let parts = partitions_at(best.tau_c, train)?;
    let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let out = train_main(n_rois, &parts.iter().collect::<Vec<_>>(), &train_labels, cfg, derive_seed(seed, STREAM_MAIN, 1000))?;
    Ok(FittedPipeline {
        app: pre.model,
        tau_c: best.tau_c,
        model: out.model,
        app_curve: pre.loss_curve,
        main_curve: out.curve,
        threshold_scores,
        inner_train,
        inner_val,
    })
}

/// Class-1 probabilities of recordings under a fitted APP, threshold and model.
pub fn predict_recordings(app_model: &AppModel, model: &MainModel, tau_c: f64, recordings: &[&BoldRecording], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let parts = recordings
        .iter()
        .map(|r| {
            let codes = app::state_codes(app_model, &r.signal, cfg.app.detect_stride)?;
            partition_for(&codes, r, tau_c, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    model.predict(&parts.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub inner_val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub selected_tau_c: f64,
    pub threshold_scores: Vec<ThresholdScore>,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Confusion,
    pub test_scores: Vec<f64>,
    pub app_loss: Vec<f64>,
    pub main_loss: Vec<LossValues>,
}

impl FoldReport {
    pub fn initial_ce(&self) -> f64 {
        self.main_loss.first().map_or(f64::NAN, |v| v.ce)
    }

    pub fn final_ce(&self) -> f64 {
        self.main_loss.last().map_or(f64::NAN, |v| v.ce)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
}

impl EvalReport {
    pub fn from_folds(seed: u64, folds: Vec<FoldReport>) -> Self {
        let (mean_accuracy, std_accuracy) = mean_std(&folds.iter().map(|f| f.accuracy).collect::<Vec<_>>());
        let (mean_auc, std_auc) = mean_std(&folds.iter().map(|f| f.auc).collect::<Vec<_>>());
        Self { seed, folds, mean_accuracy, std_accuracy, mean_auc, std_auc }
    }

    /// Range and leakage invariants of a finished report.
    pub fn validate(&self) -> Result<()> {
        for v in [self.mean_accuracy, self.mean_auc] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Internal(format!("report metric {v} outside [0, 1]")));
            }
        }
        if !(self.std_accuracy >= 0.0 && self.std_auc >= 0.0) {
            return Err(Error::Internal("negative standard deviation in report".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.folds {
            assert_disjoint(&f.train_ids, &f.test_ids, &format!("fold {}", f.fold))?;
            assert_disjoint(&f.inner_val_ids, &f.test_ids, &format!("fold {} validation", f.fold))?;
            let train: BTreeSet<&String> = f.train_ids.iter().collect();
            if let Some(v) = f.inner_val_ids.iter().find(|v| !train.contains(v)) {
                return Err(Error::Internal(format!("validation subject {v} is outside the training set of fold {}", f.fold)));
            }
            for id in &f.test_ids {
                if !seen.insert(id.clone()) {
                    return Err(Error::Internal(format!("subject {id} is tested in more than one fold")));
                }
            }
        }
        Ok(())
    }
}

fn labels_of(data: &[BoldRecording]) -> Vec<usize> {
    data.iter().map(|r| r.label).collect()
}

/// Stratified k-fold evaluation of the full two-stage pipeline.
pub fn run_cv(data: &[BoldRecording], cfg: &TrainConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let labels = labels_of(data);
    let folds = stratified_folds(&labels, cfg.folds, derive_seed(cfg.seed, STREAM_FOLDS, 0))?;
    let mut reports = Vec::with_capacity(folds.len());
    for (k, test) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..data.len()).filter(|i| !test.contains(i)).collect();
        let ids = |ix: &[usize]| ix.iter().map(|&i| data[i].subject_id.clone()).collect::<Vec<_>>();
        let (train_ids, test_ids) = (ids(&train), ids(test));
        assert_disjoint(&train_ids, &test_ids, &format!("fold {k}"))?;
        let fitted = fit_pipeline(data, &train, cfg, derive_seed(cfg.seed, STREAM_MAIN, k as u64 + 1))?;
        let recs: Vec<&BoldRecording> = test.iter().map(|&i| &data[i]).collect();
        let scores = predict_recordings(&fitted.app, &fitted.model, fitted.tau_c, &recs, cfg)?;
        let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let Metrics { accuracy, auc } = compute_metrics(&scores, &test_labels)?;
        info!("fold {k}: accuracy {accuracy:.3}, AUC {auc:.3}, tau_c {}", fitted.tau_c);
        reports.push(FoldReport {
            fold: k,
            train_ids,
            inner_val_ids: ids(&fitted.inner_val),
            test_ids,
            selected_tau_c: fitted.tau_c,
            threshold_scores: fitted.threshold_scores,
            accuracy,
            auc,
            confusion: confusion(&scores, &test_labels)?,
            test_scores: scores,
            app_loss: fitted.app_curve,
            main_loss: fitted.main_curve,
        });
    }
    let report = EvalReport::from_folds(cfg.seed, reports);
    report.validate()?;
    Ok(report)
}

/// Static-FC logistic regression on the same stratified folds as [`run_cv`].
pub fn baseline_cv(data: &[BoldRecording], folds: usize, seed: u64, ridge: f64) -> Result<Vec<Metrics>> {
    let labels = labels_of(data);
    let feats = data.iter().map(|r| baseline::static_fc_features(&r.signal)).collect::<Result<Vec<_>>>()?;
    stratified_folds(&labels, folds, derive_seed(seed, STREAM_FOLDS, 0))?
        .iter()
        .map(|test| {
            let train: Vec<usize> = (0..data.len()).filter(|i| !test.contains(i)).collect();
            let m = baseline::LogisticModel::fit(
                &train.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>(),
                &train.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                ridge,
            )?;
            let scores: Vec<f64> = test.iter().map(|&i| m.predict(&feats[i])).collect();
            compute_metrics(&scores, &test.iter().map(|&i| labels[i]).collect::<Vec<_>>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_subjects() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let folds = stratified_folds(&labels, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.len(), 10);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 5);
        }
        assert_eq!(folds, stratified_folds(&labels, 5, 3).unwrap());
    }

    #[test]
    fn too_few_per_class() {
        let labels = [0, 0, 0, 1, 1, 0];
        assert!(matches!(stratified_folds(&labels, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn inner_split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let pool: Vec<usize> = (0..40).collect();
        let (tr, va) = inner_split(&pool, &labels, 0.2, 9);
        assert_eq!(va.len(), 8);
        assert_eq!(tr.len(), 32);
        assert_eq!(va.iter().filter(|&&i| labels[i] == 1).count(), 4);
        assert!(tr.iter().all(|i| !va.contains(i)));
    }

    #[test]
    fn leakage_is_detected() {
        let a = vec!["s1".to_string(), "s2".to_string()];
        assert!(assert_disjoint(&a, &["s3".to_string()], "x").is_ok());
        assert!(assert_disjoint(&a, &["s2".to_string()], "x").is_err());
    }

    #[test]
    fn seeds_differ_per_stream() {
        assert_ne!(derive_seed(7, 1, 0), derive_seed(7, 2, 0));
        assert_ne!(derive_seed(7, 1, 0), derive_seed(7, 1, 1));
        assert_eq!(derive_seed(7, 1, 0), derive_seed(7, 1, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { folds: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { tau_c_grid: vec![], ..Default::default() }.validate().is_err());
    }
}
