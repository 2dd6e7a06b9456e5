//! Interpretability exports: per-subject phase importance, retained
//! structure and subnetwork strengths, plus group-level edge weights
//! aggregated separately over important and non-important phases.

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::io::{fmt_num, round_sig};
use crate::model::{MainModel, SubjectInspection};
use crate::segfc::PhasePartition;
use crate::structgen::retained_ratio;
use crate::trainer::metrics;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const STRENGTH_NORMALIZATION: &str = "per-subject maximum over subnetwork pairs";

/// Total map from ROI index to a subnetwork label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkMap {
    pub labels: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct MapRow {
    roi: usize,
    subnetwork: String,
}

impl SubnetworkMap {
    /// Every ROI in one group.
    pub fn single(n_rois: usize) -> Self {
        Self { labels: vec!["all".into(); n_rois] }
    }

    pub fn n_rois(&self) -> usize {
        self.labels.len()
    }

    /// CSV with header `roi,subnetwork`; every ROI `0..N` exactly once.
    pub fn load(path: &Path) -> Result<Self> {
        let schema = |line: usize, detail: String| Error::Schema { file: path.to_path_buf(), line, detail };
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => schema(0, format!("{other:?}")),
        })?;
        let mut by_roi = BTreeMap::new();
        for (k, row) in reader.deserialize::<MapRow>().enumerate() {
            let row = row.map_err(|e| schema(k + 2, e.to_string()))?;
            if by_roi.insert(row.roi, row.subnetwork).is_some() {
                return Err(schema(k + 2, format!("ROI {} mapped twice", row.roi)));
            }
        }
        let n = by_roi.len();
        if let Some((&roi, _)) = by_roi.iter().find(|(&r, _)| r >= n) {
            return Err(schema(0, format!("ROI {roi} is out of range; the map must cover 0..{n} exactly")));
        }
        Ok(Self { labels: by_roi.into_values().collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("roi,subnetwork\n");
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(text, "{i},{l}").expect("writing to a string");
        }
        crate::io::write_text(path, &text)
    }

    /// Sorted distinct labels.
    pub fn names(&self) -> Vec<String> {
        let mut v = self.labels.clone();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRecord {
    pub start: usize,
    pub end: usize,
    pub importance: f64,
    pub important: bool,
    pub retained_ratio: f64,
    /// Upper-triangle `(i, j)` with a retained edge.
    pub retained_edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetworkStrength {
    pub first: String,
    pub second: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretabilityRecord {
    pub subject_id: String,
    pub label: usize,
    pub prob_positive: f64,
    pub n_rois: usize,
    pub strength_normalization: String,
    pub phases: Vec<PhaseRecord>,
    pub subnetworks: Vec<SubnetworkStrength>,
}

fn upper_edges(binary: &Mat) -> Vec<(usize, usize)> {
    let n = binary.nrows();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| binary[[i, j]] > 0.5).collect()
}

impl InterpretabilityRecord {
    /// Ratio implied by a phase's edge list.
    pub fn ratio_from_edges(&self, phase: &PhaseRecord) -> f64 {
        let pairs = self.n_rois * (self.n_rois - 1) / 2;
        phase.retained_edges.len() as f64 / pairs as f64
    }

    /// Range, simplex and edge-list consistency checks. Values are compared
    /// at the 9 significant digits they are written with.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Internal(format!("{}: {d}", self.subject_id)));
        if self.phases.is_empty() || !self.phases.iter().any(|p| p.important) {
            return bad("record needs at least one phase and one important phase".into());
        }
        let total: f64 = self.phases.iter().map(|p| p.importance).sum();
        if (total - 1.0).abs() > 1e-7 {
            return bad(format!("importance weights sum to {total}"));
        }
        for p in &self.phases {
            if !(0.0..=1.0).contains(&p.retained_ratio) {
                return bad(format!("retained ratio {} outside [0, 1]", p.retained_ratio));
            }
            if round_sig(self.ratio_from_edges(p)) != round_sig(p.retained_ratio) {
                return bad(format!("retained ratio {} disagrees with its {} edges", p.retained_ratio, p.retained_edges.len()));
            }
        }
        if self.subnetworks.iter().any(|s| !(0.0..=1.0).contains(&s.strength)) {
            return bad("subnetwork strength outside [0, 1]".into());
        }
        Ok(())
    }
}

/// Mean retained |FC| per subnetwork pair over the important phases,
/// divided by the largest pair mean of the subject.
pub fn subnetwork_strengths(ins: &SubjectInspection, map: &SubnetworkMap) -> Vec<SubnetworkStrength> {
    let names = map.names();
    let index = |l: &String| names.binary_search(l).expect("label from the map");
    let g = names.len();
    let (mut sum, mut count) = (vec![0.0; g * g], vec![0usize; g * g]);
    let n = map.n_rois();
    for &t in &ins.important {
        let a = &ins.structures.positive_fc[t];
        for i in 0..n {
            for j in i + 1..n {
                let (x, y) = (index(&map.labels[i]), index(&map.labels[j]));
                let k = x.min(y) * g + x.max(y);
                sum[k] += a[[i, j]].abs();
                count[k] += 1;
            }
        }
    }
    let means: Vec<(usize, f64)> = (0..g * g).filter(|&k| count[k] > 0).map(|k| (k, sum[k] / count[k] as f64)).collect();
    let max = means.iter().map(|m| m.1).fold(0.0, f64::max);
    means
        .into_iter()
        .map(|(k, m)| SubnetworkStrength { first: names[k / g].clone(), second: names[k % g].clone(), strength: if max > 0.0 { m / max } else { 0.0 } })
        .collect()
}

pub fn interpret(
    model: &MainModel,
    partition: &PhasePartition,
    subject_id: &str,
    label: usize,
    map: &SubnetworkMap,
) -> Result<(InterpretabilityRecord, SubjectInspection)> {
    if map.n_rois() != model.n_rois {
        return Err(Error::Dimension(format!("subnetwork map covers {} ROIs, model has {}", map.n_rois(), model.n_rois)));
    }
    let ins = model.inspect(partition)?;
    let phases = (0..partition.phase_count())
        .map(|t| {
            let (start, end) = partition.phase(t);
            let b = &ins.structures.binary[t];
            PhaseRecord {
                start,
                end,
                importance: ins.alpha_plus[t],
                important: ins.important.contains(&t),
                retained_ratio: retained_ratio(b),
                retained_edges: upper_edges(b),
            }
        })
        .collect();
    let record = InterpretabilityRecord {
        subject_id: subject_id.into(),
        label,
        prob_positive: ins.prob_positive,
        n_rois: model.n_rois,
        strength_normalization: STRENGTH_NORMALIZATION.into(),
        phases,
        subnetworks: subnetwork_strengths(&ins, map),
    };
    Ok((record, ins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Running mean of binary structures over subjects' phases.
#[derive(Debug, Clone)]
pub struct GroupAccumulator {
    important: Mat,
    other: Mat,
    n_important: usize,
    n_other: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n_subjects: usize,
    pub important_phases: usize,
    pub nonimportant_phases: usize,
}

impl GroupAccumulator {
    pub fn new(n_rois: usize) -> Self {
        Self { important: Mat::zeros((n_rois, n_rois)), other: Mat::zeros((n_rois, n_rois)), n_important: 0, n_other: 0 }
    }

    pub fn add(&mut self, ins: &SubjectInspection) {
        for (t, b) in ins.structures.binary.iter().enumerate() {
            if ins.important.contains(&t) {
                self.important += b;
                self.n_important += 1;
            } else {
                self.other += b;
                self.n_other += 1;
            }
        }
    }

    fn edges(sum: &Mat, count: usize) -> Vec<GroupEdge> {
        if count == 0 {
            return Vec::new();
        }
        let n = sum.nrows();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| GroupEdge { i, j, weight: sum[[i, j]] / count as f64 })).collect()
    }

    /// Upper-triangle mean retention in important phases.
    pub fn important_edges(&self) -> Vec<GroupEdge> {
        Self::edges(&self.important, self.n_important)
    }

    /// Same over non-important phases; empty when every phase was important.
    pub fn nonimportant_edges(&self) -> Vec<GroupEdge> {
        Self::edges(&self.other, self.n_other)
    }

    pub fn summary(&self, n_subjects: usize) -> GroupSummary {
        GroupSummary { n_subjects, important_phases: self.n_important, nonimportant_phases: self.n_other }
    }
}

pub fn write_group_edges(path: &Path, edges: &[GroupEdge]) -> Result<()> {
    let mut text = String::from("i,j,weight\n");
    for e in edges {
        writeln!(text, "{},{},{}", e.i, e.j, fmt_num(e.weight)).expect("writing to a string");
    }
    crate::io::write_text(path, &text)
}

pub fn read_group_edges(path: &Path) -> Result<Vec<GroupEdge>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema { file: path.to_path_buf(), line: 0, detail: format!("{other:?}") },
    })?;
    reader.deserialize().enumerate().map(|(k, r)| r.map_err(|e| Error::Schema { file: path.to_path_buf(), line: k + 2, detail: e.to_string() })).collect()
}

/// AUROC of group edge weights separating planted from other edges.
pub fn edge_recovery_auc(edges: &[GroupEdge], planted: &[(usize, usize)]) -> Result<f64> {
    let scores: Vec<f64> = edges.iter().map(|e| e.weight).collect();
    let labels: Vec<usize> = edges.iter().map(|e| usize::from(planted.contains(&(e.i, e.j)) || planted.contains(&(e.j, e.i)))).collect();
    metrics::auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structgen::StructureSequence;

    fn inspection(binary: Vec<Mat>, important: Vec<usize>) -> SubjectInspection {
        let w = binary.len();
        SubjectInspection {
            alpha_plus: vec![1.0 / w as f64; w],
            important,
            structures: StructureSequence {
                continuous: binary.clone(),
                positive_fc: binary.clone(),
                negative_fc: binary.iter().map(|b| b.mapv(|v| 1.0 - v)).collect(),
                binary,
                descriptors: vec![[0.0; 3]; w],
            },
            prob_positive: 0.5,
        }
    }

    fn mask(n: usize, edges: &[(usize, usize)]) -> Mat {
        let mut m = Mat::zeros((n, n));
        for &(i, j) in edges {
            m[[i, j]] = 1.0;
            m[[j, i]] = 1.0;
        }
        m
    }

    #[test]
    fn identical_structures_aggregate_to_themselves() {
        let s = mask(4, &[(0, 1), (2, 3)]);
        let mut acc = GroupAccumulator::new(4);
        for _ in 0..3 {
            acc.add(&inspection(vec![s.clone()], vec![0]));
        }
        for e in acc.important_edges() {
            assert_eq!(e.weight, s[[e.i, e.j]]);
        }
        assert!(acc.nonimportant_edges().is_empty());
        assert_eq!(acc.summary(3), GroupSummary { n_subjects: 3, important_phases: 3, nonimportant_phases: 0 });
    }

    #[test]
    fn planted_edges_ranked_first_give_unit_auc() {
        let mut acc = GroupAccumulator::new(4);
        acc.add(&inspection(vec![mask(4, &[(0, 1)]), mask(4, &[(2, 3)])], vec![0]));
        assert_eq!(edge_recovery_auc(&acc.important_edges(), &[(0, 1)]).unwrap(), 1.0);
        // the planted edge ties four empty edges and loses to (2, 3)
        assert_eq!(edge_recovery_auc(&acc.nonimportant_edges(), &[(0, 1)]).unwrap(), 0.4);
    }

    #[test]
    fn strengths_normalize_to_subject_max() {
        let map = SubnetworkMap { labels: vec!["a".into(), "a".into(), "b".into(), "b".into()] };
        let mut s = mask(4, &[(0, 1), (0, 2)]);
        s[[0, 1]] = 0.5;
        s[[1, 0]] = 0.5;
        let out = subnetwork_strengths(&inspection(vec![s], vec![0]), &map);
        let get = |a: &str, b: &str| out.iter().find(|x| x.first == a && x.second == b).unwrap().strength;
        // a–a: 0.5 over one pair; a–b: 1 over four pairs; b–b: 0
        assert_eq!(get("a", "a"), 1.0);
        assert_eq!(get("a", "b"), 0.5);
        assert_eq!(get("b", "b"), 0.0);
    }

    #[test]
    fn map_must_cover_every_roi_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "roi,subnetwork\n0,dmn\n2,cen\n").unwrap();
        assert!(SubnetworkMap::load(&p).is_err());
        std::fs::write(&p, "roi,subnetwork\n0,dmn\n0,cen\n").unwrap();
        assert!(SubnetworkMap::load(&p).is_err());
        let m = SubnetworkMap { labels: vec!["dmn".into(), "sn".into()] };
        m.save(&p).unwrap();
        assert_eq!(SubnetworkMap::load(&p).unwrap(), m);
    }
}
