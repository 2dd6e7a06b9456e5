//! Helpers shared by the integration targets.

#![allow(dead_code)]

use brainstr::cli::{Evaluation, ExplainSummary};
use brainstr::explain::{self, InterpretabilityRecord};
use brainstr::io::{self, AppCheckpoint, GroundTruth, MainCheckpoint, RunConfig};
use brainstr::trainer::EvalReport;
use brainstr::{Error, Result};
use std::path::{Path, PathBuf};

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

/// Parse one CLI output file with the schema the CLI itself uses; unknown
/// file kinds are an error so that new outputs cannot slip past.
pub fn reparse(path: &Path) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let in_subjects = path.parent().and_then(|p| p.file_name()).is_some_and(|n| n == "subjects");
    match name {
        "manifest.csv" => io::read_manifest(path.parent().expect("manifest directory")).map(drop),
        "config.toml" => RunConfig::load(path).map(drop),
        "eval_report.json" => io::read_json::<EvalReport>(path)?.validate(),
        "app.ckpt.json" => AppCheckpoint::load(path).map(drop),
        "main.ckpt.json" => MainCheckpoint::load(path).map(drop),
        "evaluation.json" => io::read_json::<Evaluation>(path).map(drop),
        "group_summary.json" => io::read_json::<ExplainSummary>(path).map(drop),
        "group_important.csv" | "group_nonimportant.csv" => explain::read_group_edges(path).map(drop),
        n if n.ends_with("_loss.csv") => io::read_curve(path).map(drop),
        n if in_subjects && n.ends_with(".truth.json") => io::read_json::<GroundTruth>(path).map(drop),
        n if in_subjects && n.ends_with(".json") => {
            let record: InterpretabilityRecord = io::read_json(path)?;
            record.validate()
        }
        n if in_subjects && n.ends_with(".csv") => io::read_signal(path).map(drop),
        _ => Err(Error::Internal(format!("no schema for output file {}", path.display()))),
    }
}

/// Re-parse every file under `dir`; returns the number of files checked.
pub fn reparse_all(dir: &Path) -> Result<usize> {
    let files = files_under(dir);
    for f in &files {
        reparse(f)?;
    }
    Ok(files.len())
}
