//! Command-line surface. Exit status 0 on success, 1 when input or a check
//! fails validation, 2 when a run fails.

use crate::app::{self, AppModel};
use crate::error::{Error, Result};
use crate::explain::{self, GroupAccumulator, GroupSummary, SubnetworkMap};
use crate::io::{self, AppCheckpoint, MainCheckpoint, RunConfig};
use crate::model::MainModel;
use crate::segfc::{build_partition, PhasePartition, MIN_FC_LEN};
use crate::synthgen::{generate_dataset_seeded, BoldRecording};
use crate::trainer::gradcheck::gradcheck_suite;
use crate::trainer::metrics::{self, Confusion};
use crate::trainer::{self, derive_seed};
use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const APP_CHECKPOINT: &str = "app.ckpt.json";
pub const MAIN_CHECKPOINT: &str = "main.ckpt.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const CONFIG_ECHO: &str = "config.toml";
const FINAL_STREAM: u64 = 5;

#[derive(Debug, Parser)]
#[command(name = "brainstr", version, about = "Spatio-temporal contrastive learning for dynamic connectivity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the phase-partition autoencoder on every subject.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-validate, then refit on all subjects and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a trained classifier.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export phase importance, retained structure and group edge weights.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV `roi,subnetwork`; every ROI in one group when omitted.
        #[arg(long)]
        subnet_map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Debug aid: perturb the analytic gradient of this term.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Parse arguments, run, report errors on stderr and return the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VALIDATION,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// `Ok(false)` means the command ran but its check failed.
pub fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed).map(|_| true),
        Command::Pretrain { config, data, out, seed } => pretrain(config.as_deref(), &data, &out, seed).map(|_| true),
        Command::Train { config, data, out, seed } => train(config.as_deref(), &data, &out, seed).map(|_| true),
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, &out).map(|_| true),
        Command::Explain { checkpoint, data, subnet_map, out } => explain(&checkpoint, &data, subnet_map.as_deref(), &out).map(|_| true),
        Command::Gradcheck { seed, corrupt } => gradcheck(seed, corrupt.as_deref()),
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.synth.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Vec<BoldRecording>> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let data = generate_dataset_seeded(&cfg.synth, cfg.n_per_class)?;
    io::write_dataset(out, &data)?;
    io::write_text(&out.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    println!("wrote {} subjects to {}", data.len(), out.display());
    Ok(data)
}

fn load_data(dir: &Path) -> Result<Vec<BoldRecording>> {
    let data = io::load_dataset(dir)?;
    info!("loaded {} subjects from {}", data.len(), dir.display());
    Ok(data)
}

pub fn pretrain(config: Option<&Path>, data_dir: &Path, out: &Path, seed: Option<u64>) -> Result<AppCheckpoint> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = load_data(data_dir)?;
    let tc = &cfg.train;
    let model = AppModel::new(tc.app_arch.config(data[0].n_rois(), tc.window), tc.seed)?;
    let signals: Vec<_> = data.iter().map(|r| &r.signal).collect();
    let outcome = app::pretrain_app(model, &signals, &tc.app, derive_seed(tc.seed, FINAL_STREAM, 0))?;
    let ckpt = AppCheckpoint::new(&outcome.model, tc.app.detect_stride, tc.detection);
    ckpt.save(&out.join(APP_CHECKPOINT))?;
    io::write_curve(&out.join("app_loss.csv"), &io::app_curve_rows(&outcome.loss_curve))?;
    io::write_text(&out.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    println!("app loss {} after {} epochs", io::fmt_num(outcome.loss_curve.last().copied().unwrap_or(f64::NAN)), outcome.loss_curve.len());
    Ok(ckpt)
}

pub fn train(config: Option<&Path>, data_dir: &Path, out: &Path, seed: Option<u64>) -> Result<trainer::EvalReport> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = load_data(data_dir)?;
    let tc = &cfg.train;
    let started = Instant::now();
    let report = trainer::run_cv(&data, tc)?;
    io::write_json(&out.join(EVAL_REPORT), &report)?;
    for f in &report.folds {
        io::write_curve(&out.join(format!("fold{}_main_loss.csv", f.fold)), &io::main_curve_rows(&f.main_loss))?;
        io::write_curve(&out.join(format!("fold{}_app_loss.csv", f.fold)), &io::app_curve_rows(&f.app_loss))?;
    }
    println!(
        "cv accuracy {} ± {}, auc {} ± {}",
        io::fmt_num(report.mean_accuracy),
        io::fmt_num(report.std_accuracy),
        io::fmt_num(report.mean_auc),
        io::fmt_num(report.std_auc)
    );

    let all: Vec<usize> = (0..data.len()).collect();
    let fitted = trainer::fit_pipeline(&data, &all, tc, derive_seed(tc.seed, FINAL_STREAM, 1))?;
    AppCheckpoint::new(&fitted.app, tc.app.detect_stride, tc.detection).save(&out.join(APP_CHECKPOINT))?;
    MainCheckpoint::new(&fitted.model, fitted.tau_c, APP_CHECKPOINT).save(&out.join(MAIN_CHECKPOINT))?;
    io::write_curve(&out.join("final_main_loss.csv"), &io::main_curve_rows(&fitted.main_curve))?;
    io::write_curve(&out.join("final_app_loss.csv"), &io::app_curve_rows(&fitted.app_curve))?;
    io::write_text(&out.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    println!("final model tau_c {}, trained in {:.1?}", io::fmt_num(fitted.tau_c), started.elapsed());
    Ok(report)
}

/// A trained autoencoder, threshold and classifier restored from disk.
pub struct LoadedPipeline {
    pub app: AppModel,
    pub app_checkpoint: AppCheckpoint,
    pub model: MainModel,
    pub tau_c: f64,
}

impl LoadedPipeline {
    pub fn load(main_path: &Path) -> Result<Self> {
        let main = MainCheckpoint::load(main_path)?;
        let app_checkpoint = main.load_app(main_path)?;
        if app_checkpoint.config.n_rois != main.n_rois {
            return Err(Error::Checkpoint(format!("autoencoder has {} ROIs, classifier {}", app_checkpoint.config.n_rois, main.n_rois)));
        }
        Ok(Self { app: app_checkpoint.model()?, model: main.model()?, tau_c: main.tau_c, app_checkpoint })
    }

    pub fn partition(&self, rec: &BoldRecording) -> Result<PhasePartition> {
        if rec.n_rois() != self.model.n_rois {
            return Err(Error::Dimension(format!("{} has {} ROIs, checkpoint expects {}", rec.subject_id, rec.n_rois(), self.model.n_rois)));
        }
        let c = &self.app_checkpoint;
        let codes = app::state_codes(&self.app, &rec.signal, c.detect_stride)?;
        let b = app::partition_boundaries(&codes, self.tau_c, c.config.window, c.detect_stride, rec.n_timepoints(), &c.detection);
        build_partition(&rec.signal, &b, MIN_FC_LEN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectScore {
    pub subject_id: String,
    pub label: usize,
    pub score: f64,
    pub n_phases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Absent when the dataset holds a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub subjects: Vec<SubjectScore>,
}

pub fn eval(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Evaluation> {
    let pipe = LoadedPipeline::load(checkpoint)?;
    let data = load_data(data_dir)?;
    let parts = data.iter().map(|r| pipe.partition(r)).collect::<Result<Vec<_>>>()?;
    let scores = pipe.model.predict(&parts.iter().collect::<Vec<_>>())?;
    let labels: Vec<usize> = data.iter().map(|r| r.label).collect();
    let correct = metrics::predictions(&scores, &labels).into_iter().zip(&labels).filter(|(p, l)| p == *l).count();
    let result = Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        auc: metrics::auc(&scores, &labels).ok(),
        confusion: metrics::confusion(&scores, &labels)?,
        subjects: data
            .iter()
            .zip(&scores)
            .zip(&parts)
            .map(|((r, &score), p)| SubjectScore { subject_id: r.subject_id.clone(), label: r.label, score, n_phases: p.phase_count() })
            .collect(),
    };
    io::write_json(&out.join("evaluation.json"), &result)?;
    println!("accuracy {}, auc {}", io::fmt_num(result.accuracy), result.auc.map_or("undefined".into(), io::fmt_num));
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSummary {
    pub group: GroupSummary,
    /// Planted-edge AUROC of the group weights when ground truth is known.
    pub edge_auc_important: Option<f64>,
    pub edge_auc_nonimportant: Option<f64>,
}

pub fn explain(checkpoint: &Path, data_dir: &Path, subnet_map: Option<&Path>, out: &Path) -> Result<ExplainSummary> {
    let pipe = LoadedPipeline::load(checkpoint)?;
    let data = load_data(data_dir)?;
    let map = match subnet_map {
        Some(p) => SubnetworkMap::load(p)?,
        None => SubnetworkMap::single(pipe.model.n_rois),
    };
    let mut group = GroupAccumulator::new(pipe.model.n_rois);
    for rec in &data {
        let part = pipe.partition(rec)?;
        let (record, ins) = explain::interpret(&pipe.model, &part, &rec.subject_id, rec.label, &map)?;
        record.validate()?;
        io::write_json(&out.join("subjects").join(format!("{}.json", rec.subject_id)), &record)?;
        group.add(&ins);
    }
    let (imp, non) = (group.important_edges(), group.nonimportant_edges());
    explain::write_group_edges(&out.join("group_important.csv"), &imp)?;
    explain::write_group_edges(&out.join("group_nonimportant.csv"), &non)?;
    let mut planted: Vec<(usize, usize)> = data.iter().filter(|r| r.label == 1).filter_map(|r| r.true_edges.clone()).flatten().collect();
    planted.sort_unstable();
    planted.dedup();
    let auc_of = |edges: &[explain::GroupEdge]| if planted.is_empty() { None } else { explain::edge_recovery_auc(edges, &planted).ok() };
    let summary = ExplainSummary { group: group.summary(data.len()), edge_auc_important: auc_of(&imp), edge_auc_nonimportant: auc_of(&non) };
    io::write_json(&out.join("group_summary.json"), &summary)?;
    println!("explained {} subjects: {} important and {} non-important phases", data.len(), summary.group.important_phases, summary.group.nonimportant_phases);
    if let Some(a) = summary.edge_auc_important {
        println!("planted-edge auroc: important {}, non-important {}", io::fmt_num(a), summary.edge_auc_nonimportant.map_or("undefined".into(), io::fmt_num));
    }
    Ok(summary)
}

pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<bool> {
    if let Some(term) = corrupt {
        if !trainer::gradcheck::TERMS.contains(&term) {
            return Err(Error::Config(format!("unknown loss term {term:?}; expected one of {:?}", trainer::gradcheck::TERMS)));
        }
    }
    let started = Instant::now();
    let report = gradcheck_suite(seed, corrupt)?;
    for c in &report.checks {
        let verdict = match (c.passed, c.informational) {
            (_, true) => "INFO",
            (true, _) => "PASS",
            (false, _) => "FAIL",
        };
        println!(
            "{:<18} max_rel_error {:<16} tolerance {:<8} entries {:<5} {verdict}",
            c.term,
            io::fmt_num(c.max_rel_error),
            io::fmt_num(c.tolerance),
            c.entries
        );
    }
    println!("gradcheck {} in {:.1?}", if report.passed() { "passed" } else { "FAILED" }, started.elapsed());
    Ok(report.passed())
}
