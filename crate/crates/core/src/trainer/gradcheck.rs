//! Central finite-difference checks of every loss term on micro instances.

use crate::app::{AppConfig, AppLossWeights, AppModel};
use crate::autograd::{Mat, Tape};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::model::{LossWeights, MainModel, ModelConfig};
use crate::nn::ParamStore;
use crate::segfc::{build_partition, PhasePartition};
use crate::structgen::{structure_regularizers, StructGenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const FD_STEP: f64 = 1e-5;
pub const TERM_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-6;
const CORRUPTION: f64 = 1e-2;

pub const TERMS: [&str; 10] = ["recon", "smooth", "orth", "bin", "ms", "sp", "reference", "alignment", "ce", "total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries: usize,
    pub passed: bool,
    /// Reported but not gating (the straight-through surrogate path).
    pub informational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.informational)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

type ValueAndGrad<'a, M> = dyn Fn(&M, bool) -> (f64, Vec<Mat>) + 'a;

/// Compare analytic and central-difference gradients over every entry of
/// the selected parameters; returns the worst relative error and the count.
fn fd_check<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut ParamStore,
    select: &dyn Fn(&str) -> bool,
    objective: &ValueAndGrad<'_, M>,
    corrupt: bool,
) -> (f64, usize) {
    let (_, mut analytic) = objective(model, true);
    let mut work = model.clone();
    let names: Vec<String> = store(&mut work).names().to_vec();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut corrupted = !corrupt;
    for (k, name) in names.iter().enumerate() {
        if !select(name) {
            continue;
        }
        let shape = analytic[k].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                if !corrupted {
                    analytic[k][[r, c]] += CORRUPTION;
                    corrupted = true;
                }
                let orig = store(&mut work).values()[k][[r, c]];
                store(&mut work).values_mut()[k][[r, c]] = orig + FD_STEP;
                let up = objective(&work, false).0;
                store(&mut work).values_mut()[k][[r, c]] = orig - FD_STEP;
                let down = objective(&work, false).0;
                store(&mut work).values_mut()[k][[r, c]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_error(analytic[k][[r, c]], numeric));
                count += 1;
            }
        }
    }
    (worst, count)
}

fn app_store(m: &mut AppModel) -> &mut ParamStore {
    &mut m.params
}

fn main_store(m: &mut MainModel) -> &mut ParamStore {
    &mut m.params
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Micro classifier whose structures sit strictly inside `(0, 1)` with a
/// mix of retained and dropped entries, plus a batch of two-phase subjects.
pub fn micro_main_instance(seed: u64) -> Result<(MainModel, Vec<PhasePartition>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        encoder: EncoderConfig { e2e_channels: 2, e2n_channels: 2, hidden: 4, embed_dim: 3 },
        structgen: StructGenConfig { hidden: 4, ..Default::default() },
        attention_hidden: Some(3),
    };
    let mut model = MainModel::new(4, cfg, rng.random())?;
    let base = model.structgen.base;
    *model.params.get_mut(base) = Mat::from_shape_fn((4, 4), |_| rng.random_range(0.15..0.85));
    let out = model.structgen.inc_out.weight;
    *model.params.get_mut(out) = Mat::from_shape_fn((4, 16), |_| rng.random_range(-0.5..0.5));
    let parts = (0..4)
        .map(|_| {
            let x = randn(30, 4, &mut rng);
            build_partition(&x, &[0, 14, 30], 5)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, parts, vec![0, 0, 1, 1]))
}

/// Run every check. `corrupt` names a term whose analytic gradient is
/// perturbed by `1e-2` in one entry, to confirm the harness notices.
pub fn gradcheck_suite(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |term: &str, (err, n): (f64, usize), tol: f64, informational: bool| {
        checks.push(TermCheck { term: term.into(), max_rel_error: err, tolerance: tol, entries: n, passed: err <= tol, informational });
    };
    let all = |_: &str| true;

    let app_cfg = AppConfig { n_rois: 4, window: 8, hidden: 5, kernel: 3, latent_dim: 6, state_dim: 3 };
    let app_model = AppModel::new(app_cfg, rng.random())?;
    let segments: Vec<Mat> = (0..3).map(|_| randn(8, 4, &mut rng)).collect();
    for term in ["recon", "smooth", "orth"] {
        let objective = |m: &AppModel, grad: bool| {
            let tape = Tape::new();
            let p = m.params.bind(&tape);
            let t = m.loss(&tape, &p, &segments, &AppLossWeights::default()).expect("micro APP loss");
            let v = match term {
                "recon" => t.recon,
                "smooth" => t.smooth,
                _ => t.orth,
            };
            (v.item(), if grad { p.grads(&tape.backward(v)) } else { Vec::new() })
        };
        push(term, fd_check(&app_model, app_store, &all, &objective, corrupt == Some(term)), TERM_TOLERANCE, false);
    }

    let (model, parts, labels) = micro_main_instance(rng.random())?;
    let refs: Vec<&PhasePartition> = parts.iter().collect();
    let weights = LossWeights::default();
    for term in ["bin", "ms", "sp"] {
        let objective = |m: &MainModel, grad: bool| {
            let tape = Tape::new();
            let p = m.params.bind(&tape);
            let mut total = tape.scalar(0.0);
            for part in &refs {
                let s = m.structgen.evolve(&p, &tape, part).expect("micro structures");
                let r = structure_regularizers(&s.continuous, weights.structure.delta_margin);
                total = total.add(match term {
                    "bin" => r.bin,
                    "ms" => r.ms,
                    _ => r.sp,
                });
            }
            (total.item(), if grad { p.grads(&tape.backward(total)) } else { Vec::new() })
        };
        let structural = |name: &str| name.starts_with("structgen.");
        push(term, fd_check(&model, main_store, &structural, &objective, corrupt == Some(term)), TERM_TOLERANCE, false);
    }

    let downstream = |name: &str| !name.starts_with("structgen.");
    for term in ["reference", "alignment", "ce", "total"] {
        let objective = |m: &MainModel, grad: bool| {
            let tape = Tape::new();
            let p = m.params.bind(&tape);
            let l = m.batch_loss(&p, &tape, &refs, &labels, &weights).expect("micro batch loss");
            let v = match term {
                "reference" => l.reference,
                "alignment" => l.alignment,
                "ce" => l.ce,
                _ => l.total,
            };
            (v.item(), if grad { p.grads(&tape.backward(v)) } else { Vec::new() })
        };
        let tol = if term == "total" { COMPOSED_TOLERANCE } else { TERM_TOLERANCE };
        push(term, fd_check(&model, main_store, &downstream, &objective, corrupt == Some(term)), tol, false);
        if term == "total" {
            let structural = |name: &str| name.starts_with("structgen.");
            push("total_through_ste", fd_check(&model, main_store, &structural, &objective, false), COMPOSED_TOLERANCE, true);
        }
    }
    Ok(GradcheckReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let r = gradcheck_suite(0, None).unwrap();
        for c in &r.checks {
            assert!(c.passed || c.informational, "{c:?}");
            assert!(c.entries > 0);
        }
        assert_eq!(r.checks.iter().filter(|c| !c.informational).count(), TERMS.len());
        assert_eq!(r, gradcheck_suite(0, None).unwrap());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        for term in ["orth", "sp", "reference"] {
            let r = gradcheck_suite(1, Some(term)).unwrap();
            assert!(!r.passed());
            let bad: Vec<_> = r.checks.iter().filter(|c| !c.passed && !c.informational).map(|c| c.term.as_str()).collect();
            assert_eq!(bad, vec![term]);
        }
    }
}
