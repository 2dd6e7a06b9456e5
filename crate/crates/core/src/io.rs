//! On-disk formats: dataset directories, run configuration, checkpoints,
//! JSON reports and loss-curve CSVs.
//!
//! Reports and data files carry 9 significant digits. Checkpoints keep the
//! shortest exact representation of every `f64` so reloading is bit-exact.

use crate::app::{AppConfig, AppModel, DetectionRule};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{LossValues, MainModel, ModelConfig};
use crate::nn::{NamedTensor, ParamStore};
use crate::synthgen::{BoldRecording, SynthConfig};
use crate::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
pub const SIG_DIGITS: usize = 9;
pub const MANIFEST: &str = "manifest.csv";
const SUBJECT_DIR: &str = "subjects";
const TRUTH_SUFFIX: &str = ".truth.json";

/// Decimal text with at most 9 significant digits; plain notation for
/// moderate magnitudes, exponent notation otherwise.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..SIG_DIGITS as i32).contains(&exp) {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// The value a number takes after a round trip through [`fmt_num`].
pub fn round_sig(x: f64) -> f64 {
    fmt_num(x).parse().unwrap_or(x)
}

fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(round_json),
        Value::Object(m) => m.values_mut().for_each(round_json),
        _ => {}
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// JSON with every float rounded to 9 significant digits.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Internal(e.to_string()))?;
    round_json(&mut v);
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Schema { file: path.to_path_buf(), line: e.line(), detail: e.to_string() }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| json_error(path, e))
}

// ---------------------------------------------------------------------------
// configuration

/// Everything a run reads from the configuration file. Sections mirror the
/// library config types; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_per_class: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { n_per_class: 25, synth: SynthConfig::default(), train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Schema { file: path.to_path_buf(), line, detail: e.message().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// dataset directories

/// One manifest line; `path` is relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub label: usize,
    pub path: String,
    pub n_timepoints: usize,
    pub n_rois: usize,
}

/// Generator ground truth stored next to a subject file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub boundaries: Vec<usize>,
    /// Planted edges as `"i,j"`.
    pub edges: Vec<String>,
    pub states: Vec<usize>,
}

impl GroundTruth {
    pub fn edge_pairs(&self, file: &Path) -> Result<Vec<(usize, usize)>> {
        self.edges
            .iter()
            .map(|e| {
                let parsed = e.split_once(',').and_then(|(i, j)| Some((i.trim().parse().ok()?, j.trim().parse().ok()?)));
                parsed.ok_or_else(|| Error::Schema { file: file.to_path_buf(), line: 0, detail: format!("edge {e:?} is not \"i,j\"") })
            })
            .collect()
    }
}

fn truth_path(signal: &Path) -> PathBuf {
    let stem = signal.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    signal.with_file_name(format!("{stem}{TRUTH_SUFFIX}"))
}

pub fn write_signal(path: &Path, signal: &Mat) -> Result<()> {
    let mut text = String::with_capacity(signal.len() * 14);
    for row in signal.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_num(v)).collect();
        writeln!(text, "{}", cells.join(",")).expect("writing to a string");
    }
    write_text(path, &text)
}

pub fn read_signal(path: &Path) -> Result<Mat> {
    let schema = |line: usize, detail: String| Error::Schema { file: path.to_path_buf(), line, detail };
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => schema(0, format!("{other:?}")),
    })?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| schema(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(schema(line, format!("expected {} columns, found {}", cols.unwrap_or(0), record.len())));
        }
        for cell in &record {
            let v: f64 = cell.trim().parse().map_err(|_| schema(line, format!("{cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(schema(line, format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| schema(1, "empty signal file".into()))?;
    Mat::from_shape_vec((rows, cols), values).map_err(|e| Error::Internal(e.to_string()))
}

/// Manifest, one CSV per subject and a ground-truth sidecar when known.
pub fn write_dataset(dir: &Path, recordings: &[BoldRecording]) -> Result<()> {
    let mut rows = Vec::with_capacity(recordings.len());
    for r in recordings {
        let rel = format!("{SUBJECT_DIR}/{}.csv", r.subject_id);
        let path = dir.join(&rel);
        write_signal(&path, &r.signal)?;
        if r.true_boundaries.is_some() || r.true_edges.is_some() {
            let truth = GroundTruth {
                boundaries: r.true_boundaries.clone().unwrap_or_default(),
                edges: r.true_edges.iter().flatten().map(|(i, j)| format!("{i},{j}")).collect(),
                states: r.true_states.clone().unwrap_or_default(),
            };
            write_json(&truth_path(&path), &truth)?;
        }
        rows.push(ManifestRow { subject_id: r.subject_id.clone(), label: r.label, path: rel, n_timepoints: r.n_timepoints(), n_rois: r.n_rois() });
    }
    let manifest = dir.join(MANIFEST);
    create_parent(&manifest)?;
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Internal(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let schema = |line: usize, detail: String| Error::Schema { file: path.clone(), line, detail };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => schema(0, format!("{other:?}")),
    })?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (k, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| schema(line, e.to_string()))?;
        if row.label > 1 {
            return Err(schema(line, format!("label must be 0 or 1, got {}", row.label)));
        }
        if !seen.insert(row.subject_id.clone()) {
            return Err(schema(line, format!("duplicate subject_id {}", row.subject_id)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema(1, "manifest lists no subjects".into()));
    }
    Ok(rows)
}

/// Read and validate a dataset directory. Every referenced file is checked
/// for existence before any is parsed.
pub fn load_dataset(dir: &Path) -> Result<Vec<BoldRecording>> {
    let rows = read_manifest(dir)?;
    let manifest = dir.join(MANIFEST);
    for (k, row) in rows.iter().enumerate() {
        if !dir.join(&row.path).is_file() {
            return Err(Error::Schema { file: manifest, line: k + 2, detail: format!("subject file {} does not exist", row.path) });
        }
    }
    let n_rois = rows[0].n_rois;
    rows.iter()
        .enumerate()
        .map(|(k, row)| {
            let path = dir.join(&row.path);
            let signal = read_signal(&path)?;
            if signal.dim() != (row.n_timepoints, row.n_rois) {
                return Err(Error::Schema {
                    file: manifest.clone(),
                    line: k + 2,
                    detail: format!("{} is {:?}, manifest says {}×{}", row.path, signal.dim(), row.n_timepoints, row.n_rois),
                });
            }
            if row.n_rois != n_rois {
                return Err(Error::Dimension(format!("{} has {} ROIs, first subject has {n_rois}", row.subject_id, row.n_rois)));
            }
            let tp = truth_path(&path);
            let truth: Option<GroundTruth> = if tp.is_file() { Some(read_json(&tp)?) } else { None };
            let rec = BoldRecording {
                subject_id: row.subject_id.clone(),
                label: row.label,
                signal,
                true_boundaries: truth.as_ref().map(|t| t.boundaries.clone()),
                true_edges: truth.as_ref().map(|t| t.edge_pairs(&tp)).transpose()?,
                true_states: truth.map(|t| t.states),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppCheckpoint {
    pub format_version: u32,
    pub config: AppConfig,
    pub detect_stride: usize,
    pub detection: DetectionRule,
    pub tensors: Vec<NamedTensor>,
}

/// The classifier plus the partition settings it was trained with. The
/// autoencoder checkpoint is named relative to this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainCheckpoint {
    pub format_version: u32,
    pub n_rois: usize,
    pub config: ModelConfig,
    pub tau_c: f64,
    pub app_checkpoint: String,
    pub tensors: Vec<NamedTensor>,
}

fn write_exact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: format version {found}, expected {FORMAT_VERSION}", path.display())));
    }
    Ok(())
}

impl AppCheckpoint {
    pub fn new(model: &AppModel, detect_stride: usize, detection: DetectionRule) -> Self {
        Self { format_version: FORMAT_VERSION, config: model.config, detect_stride, detection, tensors: model.params.to_named() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_exact(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        check_version(c.format_version, path)?;
        Ok(c)
    }

    pub fn model(&self) -> Result<AppModel> {
        AppModel::from_params(self.config, &ParamStore::from_named(&self.tensors)?)
    }
}

impl MainCheckpoint {
    pub fn new(model: &MainModel, tau_c: f64, app_checkpoint: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_rois: model.n_rois,
            config: model.config,
            tau_c,
            app_checkpoint: app_checkpoint.into(),
            tensors: model.params.to_named(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_exact(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        check_version(c.format_version, path)?;
        Ok(c)
    }

    pub fn model(&self) -> Result<MainModel> {
        MainModel::from_params(self.n_rois, self.config, &ParamStore::from_named(&self.tensors)?)
    }

    /// The autoencoder checkpoint this classifier was trained behind.
    pub fn load_app(&self, own_path: &Path) -> Result<AppCheckpoint> {
        let dir = own_path.parent().unwrap_or(Path::new("."));
        AppCheckpoint::load(&dir.join(&self.app_checkpoint))
    }
}

// ---------------------------------------------------------------------------
// loss curves

/// One `(epoch, term, value)` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

pub fn main_curve_rows(curve: &[LossValues]) -> Vec<CurveRow> {
    curve
        .iter()
        .enumerate()
        .flat_map(|(epoch, v)| LossValues::TERMS.iter().zip(v.as_array()).map(move |(t, value)| CurveRow { epoch, term: t.to_string(), value }))
        .collect()
}

pub fn app_curve_rows(curve: &[f64]) -> Vec<CurveRow> {
    curve.iter().enumerate().map(|(epoch, &value)| CurveRow { epoch, term: "total".into(), value }).collect()
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut text = String::from("epoch,term,value\n");
    for r in rows {
        writeln!(text, "{},{},{}", r.epoch, r.term, fmt_num(r.value)).expect("writing to a string");
    }
    write_text(path, &text)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema { file: path.to_path_buf(), line: 0, detail: format!("{other:?}") },
    })?;
    reader.deserialize().enumerate().map(|(k, r)| r.map_err(|e| Error::Schema { file: path.to_path_buf(), line: k + 2, detail: e.to_string() })).collect()
}
