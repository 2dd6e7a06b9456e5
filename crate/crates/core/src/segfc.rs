//! Sliding-window segmentation and phase-wise Pearson connectivity.

use crate::autograd::Mat;
use crate::error::{Error, Result};
use log::warn;
use ndarray::s;
use serde::{Deserialize, Serialize};
use std::sync::Once;

/// Shortest phase a correlation matrix is computed over.
pub const MIN_FC_LEN: usize = 5;

/// Window length used for long recordings.
pub const LONG_WINDOW: usize = 200;
/// Window length used for short recordings.
pub const SHORT_WINDOW: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub segments: Vec<Mat>,
    pub window: usize,
    pub step: usize,
    pub source_length: usize,
}

impl SegmentSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// First time index covered by segment `k` (zero-based).
    pub fn start(&self, k: usize) -> usize {
        k * self.step
    }
}

/// Number of windows of length `w` at stride `s` in a length-`t` signal.
pub fn segment_count(t: usize, w: usize, s: usize) -> usize {
    (t - w) / s + 1
}

pub fn segment(signal: &Mat, window: usize, step: usize) -> Result<SegmentSequence> {
    let t = signal.nrows();
    if window == 0 || window > t {
        return Err(Error::Dimension(format!("window {window} must lie in [1, {t}]")));
    }
    if step == 0 {
        return Err(Error::Dimension("segment step must be at least 1".into()));
    }
    if step != 1 {
        static STRIDE_NOTICE: Once = Once::new();
        STRIDE_NOTICE.call_once(|| warn!("segmenting with step {step}; stride-1 windows are the reference setting"));
    }
    let k = segment_count(t, window, step);
    let segments = (0..k).map(|i| signal.slice(s![i * step..i * step + window, ..]).to_owned()).collect();
    Ok(SegmentSequence { segments, window, step, source_length: t })
}

/// Sample Pearson correlation between columns. Zero-variance columns get
/// zero off-diagonal correlation; the diagonal is always 1.
pub fn pearson_fc(x: &Mat) -> Result<Mat> {
    let (l, n) = x.dim();
    if l < 2 {
        return Err(Error::Dimension(format!("Pearson correlation needs at least 2 samples, got {l}")));
    }
    let means: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / l as f64).collect();
    let mut centered = x.clone();
    for (mut col, m) in centered.columns_mut().into_iter().zip(&means) {
        col -= *m;
    }
    let norms: Vec<f64> = centered.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let degenerate: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    if !degenerate.is_empty() {
        warn!("zero-variance columns {degenerate:?}; their correlations are set to 0");
    }
    let cov = centered.t().dot(&centered);
    let mut fc = Mat::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let r = if norms[i] > 0.0 && norms[j] > 0.0 { (cov[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0) } else { 0.0 };
            fc[[i, j]] = r;
            fc[[j, i]] = r;
        }
    }
    Ok(fc)
}

/// Detected or planted phase boundaries with one FC matrix per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePartition {
    pub boundaries: Vec<usize>,
    #[serde(skip)]
    pub fc_matrices: Vec<Mat>,
    /// Interior boundaries removed because a phase was too short.
    pub merged: Vec<usize>,
}

impl PhasePartition {
    pub fn phase_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn n_rois(&self) -> usize {
        self.fc_matrices.first().map_or(0, |m| m.nrows())
    }

    pub fn total_length(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn phase(&self, t: usize) -> (usize, usize) {
        (self.boundaries[t], self.boundaries[t + 1])
    }
}

fn check_boundaries(boundaries: &[usize], t: usize) -> Result<()> {
    if boundaries.len() < 2 || boundaries[0] != 0 || *boundaries.last().unwrap() != t {
        return Err(Error::Dimension(format!("boundaries must start at 0 and end at {t}, got {boundaries:?}")));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Dimension(format!("boundaries must be strictly increasing, got {boundaries:?}")));
    }
    Ok(())
}

/// Repeatedly fold the first phase shorter than `min_len` into its shorter
/// neighbour (left on ties). Returns the new boundaries and the removed ones.
pub fn merge_short_phases(boundaries: &[usize], min_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut b = boundaries.to_vec();
    let mut removed = Vec::new();
    loop {
        if b.len() <= 2 {
            break;
        }
        let Some(p) = (0..b.len() - 1).find(|&p| b[p + 1] - b[p] < min_len) else { break };
        let n_phases = b.len() - 1;
        let left = (p > 0).then(|| b[p] - b[p - 1]);
        let right = (p + 1 < n_phases).then(|| b[p + 2] - b[p + 1]);
        let drop_idx = match (left, right) {
            (Some(l), Some(r)) if r < l => p + 1,
            (Some(_), _) => p,
            (None, _) => p + 1,
        };
        removed.push(b.remove(drop_idx));
    }
    (b, removed)
}

pub fn build_partition(signal: &Mat, boundaries: &[usize], min_fc_len: usize) -> Result<PhasePartition> {
    let t = signal.nrows();
    check_boundaries(boundaries, t)?;
    if t < min_fc_len.max(2) {
        return Err(Error::Dimension(format!("recording of length {t} is shorter than the minimum phase {min_fc_len}")));
    }
    let (b, merged) = merge_short_phases(boundaries, min_fc_len);
    if !merged.is_empty() {
        warn!("merged short phases; removed boundaries {merged:?}");
    }
    let fc_matrices = b.windows(2).map(|w| pearson_fc(&signal.slice(s![w[0]..w[1], ..]).to_owned())).collect::<Result<_>>()?;
    Ok(PhasePartition { boundaries: b, fc_matrices, merged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn segment_counts() {
        let x = noise(1000, 2, 1);
        assert_eq!(segment(&x, 200, 1).unwrap().len(), 801);
        let y = noise(40, 3, 2);
        let seq = segment(&y, 40, 1).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.segments[0], y);
    }

    #[test]
    fn segment_strided_starts() {
        let x = Array2::from_shape_fn((10, 1), |(t, _)| t as f64);
        let seq = segment(&x, 4, 3).unwrap();
        let starts: Vec<f64> = seq.segments.iter().map(|m| m[[0, 0]]).collect();
        assert_eq!(starts, vec![0.0, 3.0, 6.0]);
        assert!(segment(&x, 11, 1).is_err());
    }

    #[test]
    fn affine_columns_fully_correlated() {
        let x = noise(50, 1, 3);
        let mut m = Array2::zeros((50, 2));
        m.column_mut(0).assign(&x.column(0));
        m.column_mut(1).assign(&x.column(0).mapv(|v| 2.0 * v + 3.0));
        let fc = pearson_fc(&m).unwrap();
        assert!((fc[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_columns_weakly_correlated() {
        let fc = pearson_fc(&noise(10_000, 4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(fc[[i, j]].abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn constant_column_zeroed() {
        let mut x = noise(30, 3, 5);
        x.column_mut(1).fill(2.5);
        let fc = pearson_fc(&x).unwrap();
        assert_eq!(fc[[1, 1]], 1.0);
        assert_eq!(fc[[1, 0]], 0.0);
        assert_eq!(fc[[2, 1]], 0.0);
    }

    #[test]
    fn partition_basic_and_merge() {
        let x = noise(400, 3, 6);
        let p = build_partition(&x, &[0, 200, 400], MIN_FC_LEN).unwrap();
        assert_eq!(p.phase_count(), 2);
        let p = build_partition(&x, &[0, 3, 400], MIN_FC_LEN).unwrap();
        assert_eq!(p.boundaries, vec![0, 400]);
        assert_eq!(p.merged, vec![3]);
    }

    #[test]
    fn merge_prefers_shorter_neighbour() {
        let (b, removed) = merge_short_phases(&[0, 50, 52, 60, 100], 5);
        // phase [50,52) has neighbours of length 50 and 8 -> joins the right one
        assert_eq!(b, vec![0, 50, 60, 100]);
        assert_eq!(removed, vec![52]);
    }

    proptest! {
        #[test]
        fn stride_one_first_rows_reproduce_signal(t in 5usize..60, w in 1usize..5, seed in 0u64..100) {
            let x = noise(t, 2, seed);
            let seq = segment(&x, w, 1).unwrap();
            for (k, seg) in seq.segments.iter().enumerate() {
                prop_assert_eq!(seg.row(0), x.row(k));
            }
        }

        #[test]
        fn fc_symmetric_unit_diagonal(seed in 0u64..200, l in 2usize..40) {
            let fc = pearson_fc(&noise(l, 5, seed)).unwrap();
            prop_assert_eq!(&fc, &fc.t());
            for i in 0..5 {
                prop_assert_eq!(fc[[i, i]], 1.0);
            }
            prop_assert!(fc.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn partition_never_yields_short_phase(cuts in proptest::collection::btree_set(1usize..99, 0..12)) {
            let mut b = vec![0];
            b.extend(cuts);
            b.push(100);
            let x = noise(100, 2, 9);
            let p = build_partition(&x, &b, MIN_FC_LEN).unwrap();
            prop_assert!(p.boundaries.windows(2).all(|w| w[1] - w[0] >= MIN_FC_LEN));
            prop_assert_eq!(p.fc_matrices.len(), p.phase_count());
        }
    }
}
