//! Synthetic BOLD-like recordings with planted brain-state phases and
//! planted class-discriminative connectivity.
//!
//! Every recording is a concatenation of phases. Each phase is drawn from a
//! zero-mean Gaussian whose correlation structure belongs to one of
//! `n_states` shared state templates. Subjects of class 1 get extra
//! correlation on `discriminative_block` while in a `discriminative_states`
//! phase. Ground truth (boundaries, state sequence, planted edges) travels
//! with the recording.

use crate::autograd::Mat;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const WITHIN_BLOCK_CORR: f64 = 0.6;
const LOADING_STEP: f64 = 0.05;
const MIN_EIGENVALUE: f64 = 1e-6;
const MAX_RAISED_CORR: f64 = 0.95;
const TEMPLATE_STREAM: u64 = 0x7465_6d70_6c61_7465;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_rois: usize,
    pub n_timepoints: usize,
    pub n_states: usize,
    pub min_phase_len: usize,
    pub noise_sigma: f64,
    pub discriminative_block: Vec<(usize, usize)>,
    pub discriminative_states: Vec<usize>,
    pub effect_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rois: 16,
            n_timepoints: 400,
            n_states: 3,
            min_phase_len: 80,
            noise_sigma: 0.3,
            discriminative_block: vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            discriminative_states: vec![0],
            effect_size: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_rois < 2 {
            return bad(format!("n_rois must be at least 2, got {}", self.n_rois));
        }
        if self.n_states < 2 {
            return bad(format!("n_states must be at least 2, got {}", self.n_states));
        }
        if self.min_phase_len < 2 {
            return bad(format!("min_phase_len must be at least 2, got {}", self.min_phase_len));
        }
        if self.n_states * self.min_phase_len > self.n_timepoints {
            return bad(format!("n_states × min_phase_len = {} exceeds n_timepoints = {}", self.n_states * self.min_phase_len, self.n_timepoints));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and nonnegative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.effect_size) {
            return bad(format!("effect_size must lie in [0, 1], got {}", self.effect_size));
        }
        for &(i, j) in &self.discriminative_block {
            if i >= self.n_rois || j >= self.n_rois {
                return bad(format!("discriminative_block pair ({i},{j}) out of range for {} ROIs", self.n_rois));
            }
            if i == j {
                return bad(format!("discriminative_block contains self-pair ({i},{i})"));
            }
        }
        if let Some(&s) = self.discriminative_states.iter().find(|&&s| s >= self.n_states) {
            return bad(format!("discriminative state {s} out of range for {} states", self.n_states));
        }
        Ok(())
    }

    /// Planted edges as sorted, deduplicated `(i, j)` pairs with `i < j`.
    pub fn planted_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self.discriminative_block.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// One subject's multivariate recording, `T×N`, row = time point.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldRecording {
    pub subject_id: String,
    pub label: usize,
    pub signal: Mat,
    pub true_boundaries: Option<Vec<usize>>,
    pub true_edges: Option<Vec<(usize, usize)>>,
    /// State index of each planted phase; generator-only ground truth.
    pub true_states: Option<Vec<usize>>,
}

impl BoldRecording {
    pub fn n_timepoints(&self) -> usize {
        self.signal.nrows()
    }

    pub fn n_rois(&self) -> usize {
        self.signal.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{}: signal contains non-finite values", self.subject_id)));
        }
        if self.label > 1 {
            return Err(Error::Config(format!("{}: label must be 0 or 1, got {}", self.subject_id, self.label)));
        }
        if let Some(b) = &self.true_boundaries {
            let t = self.n_timepoints();
            if b.first() != Some(&0) || b.last() != Some(&t) || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{}: true boundaries must increase strictly from 0 to {t}", self.subject_id)));
            }
        }
        Ok(())
    }
}

/// State correlation templates shared by every subject generated from `cfg`.
pub fn state_templates(cfg: &SynthConfig) -> Result<Vec<Mat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TEMPLATE_STREAM);
    let n = cfg.n_rois;
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_states);
    let mut attempts = 0;
    while assignments.len() < cfg.n_states {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Internal("could not draw distinct state templates".into()));
        }
        let n_blocks = rng.random_range(2..=4usize);
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_blocks)).collect();
        let canonical = canonical_partition(&assign);
        if canonical.iter().all(|&b| b == canonical[0]) {
            continue;
        }
        if assignments.iter().any(|a| canonical_partition(a) == canonical) {
            continue;
        }
        assignments.push(assign);
    }
    assignments
        .iter()
        .map(|assign| {
            let m = Mat::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    1.0
                } else if assign[i] == assign[j] {
                    WITHIN_BLOCK_CORR
                } else {
                    0.0
                }
            });
            repair_positive_definite(m)
        })
        .collect()
}

/// Relabel blocks in order of first appearance so equal partitions compare equal.
fn canonical_partition(assign: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    assign
        .iter()
        .map(|b| {
            let next = map.len();
            *map.entry(*b).or_insert(next)
        })
        .collect()
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    let n = m.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    d.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Add `0.05·I` until the smallest eigenvalue exceeds `1e-6`.
pub fn repair_positive_definite(mut m: Mat) -> Result<Mat> {
    for _ in 0..10_000 {
        if min_eigenvalue(&m) > MIN_EIGENVALUE {
            return Ok(m);
        }
        for i in 0..m.nrows() {
            m[[i, i]] += LOADING_STEP;
        }
    }
    Err(Error::Internal("diagonal loading failed to make covariance positive definite".into()))
}

/// Move `template` toward a target raised by one on the planted pairs,
/// with mixing weight `effect`, then repair definiteness.
pub fn raise_block(template: &Mat, pairs: &[(usize, usize)], effect: f64) -> Result<Mat> {
    let mut m = template.clone();
    for &(i, j) in pairs {
        let v = (template[[i, j]] + effect).min(MAX_RAISED_CORR);
        m[[i, j]] = v;
        m[[j, i]] = v;
    }
    repair_positive_definite(m)
}

fn cholesky(m: &Mat) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    d.cholesky().map(|c| c.unpack()).ok_or_else(|| Error::Internal("covariance not positive definite after repair".into()))
}

/// Phase lengths in `[min, 2·min]`, at least `n_states` of them, the last
/// absorbing the remainder.
fn sample_phase_lengths<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<usize> {
    let (t, min, m) = (cfg.n_timepoints, cfg.min_phase_len, cfg.n_states);
    let mut lens = Vec::new();
    let mut used = 0;
    loop {
        let rem = t - used;
        if lens.len() + 1 >= m && rem < 2 * min {
            lens.push(rem);
            return lens;
        }
        let still_needed = m.saturating_sub(lens.len() + 1).max(1);
        let hi = (2 * min).min(rem - still_needed * min);
        let len = rng.random_range(min..=hi);
        lens.push(len);
        used += len;
    }
}

fn sample_state_sequence<R: Rng + ?Sized>(n_phases: usize, n_states: usize, rng: &mut R) -> Vec<usize> {
    let mut states: Vec<usize> = (0..n_states).collect();
    states.shuffle(rng);
    while states.len() < n_phases {
        let prev = *states.last().unwrap();
        let mut s = rng.random_range(0..n_states - 1);
        if s >= prev {
            s += 1;
        }
        states.push(s);
    }
    states.truncate(n_phases);
    states
}

fn zscore_columns(x: &mut Mat) {
    let t = x.nrows() as f64;
    for mut col in x.columns_mut() {
        let mean = col.sum() / t;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    }
}

/// Generate one subject. Templates depend only on `cfg`; everything
/// subject-specific is drawn from `rng`.
pub fn generate_subject<R: Rng + ?Sized>(cfg: &SynthConfig, label: usize, rng: &mut R) -> Result<BoldRecording> {
    cfg.validate()?;
    if label > 1 {
        return Err(Error::Config(format!("label must be 0 or 1, got {label}")));
    }
    let templates = state_templates(cfg)?;
    generate_with_templates(cfg, &templates, label, rng)
}

fn generate_with_templates<R: Rng + ?Sized>(cfg: &SynthConfig, templates: &[Mat], label: usize, rng: &mut R) -> Result<BoldRecording> {
    let n = cfg.n_rois;
    let planted = label == 1 && cfg.effect_size > 0.0 && !cfg.discriminative_block.is_empty();
    let factors: Vec<DMatrix<f64>> = templates
        .iter()
        .enumerate()
        .map(|(s, tpl)| {
            if planted && cfg.discriminative_states.contains(&s) {
                cholesky(&raise_block(tpl, &cfg.discriminative_block, cfg.effect_size)?)
            } else {
                cholesky(tpl)
            }
        })
        .collect::<Result<_>>()?;

    let lens = sample_phase_lengths(cfg, rng);
    let states = sample_state_sequence(lens.len(), cfg.n_states, rng);
    let mut signal = Mat::zeros((cfg.n_timepoints, n));
    let mut boundaries = vec![0];
    let mut t = 0;
    let mut z = nalgebra::DVector::<f64>::zeros(n);
    for (&len, &state) in lens.iter().zip(&states) {
        let l = &factors[state];
        for _ in 0..len {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = l * &z;
            for i in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                signal[[t, i]] = x[i] + cfg.noise_sigma * noise;
            }
            t += 1;
        }
        boundaries.push(t);
    }
    zscore_columns(&mut signal);

    let rec = BoldRecording {
        subject_id: "synthetic".into(),
        label,
        signal,
        true_boundaries: Some(boundaries),
        true_edges: Some(if planted { cfg.planted_edges() } else { Vec::new() }),
        true_states: Some(states),
    };
    rec.validate()?;
    Ok(rec)
}

/// `2·n_per_class` subjects, labels alternating 0/1, each from its own
/// sub-seed drawn from `rng`.
pub fn generate_dataset<R: Rng + ?Sized>(cfg: &SynthConfig, n_per_class: usize, rng: &mut R) -> Result<Vec<BoldRecording>> {
    cfg.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let templates = state_templates(cfg)?;
    let width = (2 * n_per_class).to_string().len().max(3);
    (0..2 * n_per_class)
        .map(|i| {
            let mut sub = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let mut rec = generate_with_templates(cfg, &templates, i % 2, &mut sub)?;
            rec.subject_id = format!("sub-{i:0width$}");
            Ok(rec)
        })
        .collect()
}

/// Convenience wrapper seeding the master generator from `cfg.seed`.
pub fn generate_dataset_seeded(cfg: &SynthConfig, n_per_class: usize) -> Result<Vec<BoldRecording>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_dataset(cfg, n_per_class, &mut rng)
}
