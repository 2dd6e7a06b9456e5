//! Phase attention, important-phase selection, the classifier, and the
//! contrastive and composite objectives.

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use log::warn;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub w_ref: f64,
    pub w_usl: f64,
    pub tau: f64,
    pub beta: f64,
    pub lambda_str: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { w_ref: 1.0, w_usl: 1.0, tau: 0.1, beta: 0.65, lambda_str: 1.0 }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        for (name, v) in [("w_ref", self.w_ref), ("w_usl", self.w_usl), ("lambda_str", self.lambda_str)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionModel {
    pub score_hidden: Linear,
    pub score_out: Linear,
    pub classifier: Linear,
}

/// Attention weights and aggregates for one subject.
pub struct Bundle<'t> {
    pub alpha_plus: Var<'t>,
    pub alpha_minus: Var<'t>,
    pub alpha_zero: Var<'t>,
    /// Zero-based indices of the important phases.
    pub important: Vec<usize>,
    pub h_pp: Var<'t>,
    pub h_zero: Var<'t>,
    pub h_minus: Var<'t>,
}

/// Important phases: weights strictly above uniform, else the first argmax.
pub fn important_phases(alpha: &[f64]) -> Vec<usize> {
    let w = alpha.len() as f64;
    let set: Vec<usize> = (0..alpha.len()).filter(|&t| alpha[t] > 1.0 / w).collect();
    if !set.is_empty() {
        return set;
    }
    let best = (0..alpha.len()).fold(0, |b, t| if alpha[t] > alpha[b] { t } else { b });
    vec![best]
}

impl AttentionModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            score_hidden: Linear::new(store, "attention.hidden", embed_dim, hidden, rng),
            score_out: Linear::new(store, "attention.out", hidden, 1, rng),
            classifier: Linear::new(store, "classifier", embed_dim, N_CLASSES, rng),
        }
    }

    /// Scalar score per row of a `W×d` stack.
    pub fn scores<'t>(&self, p: &Bound<'t>, stacked: Var<'t>) -> Var<'t> {
        self.score_out.forward(p, self.score_hidden.forward(p, stacked).tanh())
    }

    /// Softmax attention over phases as a `1×W` row.
    pub fn weights<'t>(&self, p: &Bound<'t>, stacked: Var<'t>) -> Var<'t> {
        self.scores(p, stacked).t().log_softmax_rows(None).exp()
    }

    pub fn aggregate<'t>(&self, p: &Bound<'t>, plus: &[Var<'t>], minus: &[Var<'t>], zero: &[Var<'t>]) -> Bundle<'t> {
        let hp = Var::vstack(plus);
        let hm = Var::vstack(minus);
        let hz = Var::vstack(zero);
        let alpha_plus = self.weights(p, hp);
        let alpha_minus = self.weights(p, hm);
        let alpha_zero = self.weights(p, hz);
        aggregate_from_weights(alpha_plus, alpha_minus, alpha_zero, hp, hm, hz)
    }

    pub fn logits<'t>(&self, p: &Bound<'t>, h_pp: Var<'t>) -> Var<'t> {
        self.classifier.forward(p, h_pp)
    }
}

/// Aggregation given attention rows and `W×d` embedding stacks.
pub fn aggregate_from_weights<'t>(alpha_plus: Var<'t>, alpha_minus: Var<'t>, alpha_zero: Var<'t>, hp: Var<'t>, hm: Var<'t>, hz: Var<'t>) -> Bundle<'t> {
    let a: Vec<f64> = alpha_plus.value().iter().copied().collect();
    let important = important_phases(&a);
    let sel = alpha_plus.t().select_rows(&important);
    let renorm = sel.mul_scalar(sel.sum().recip());
    let h_pp = renorm.t().matmul(hp.select_rows(&important));
    let h_zero = alpha_zero.matmul(hz);
    let h_minus = alpha_minus.matmul(hm);
    Bundle { alpha_plus, alpha_minus, alpha_zero, important, h_pp, h_zero, h_minus }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn warn_zero_rows(m: &Mat, what: &str) {
    let zero = m.rows().into_iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
    if zero > 0 {
        warn!("{zero} zero-norm {what} embeddings; their cosine similarities are taken as 0");
    }
}

/// Reference-adjusted supervised contrastive term.
///
/// Logits are `(cos(H⁺⁺_i, H⁺⁺_j) − β·cos(H⁰_i, H⁰_j)) / τ` over `j ≠ i`;
/// each subject with at least one same-label peer contributes the mean
/// negative log-probability of its peers, and contributions are averaged.
pub fn reference_contrastive<'t>(h_pp: Var<'t>, h_zero: Var<'t>, labels: &[usize], beta: f64, tau: f64) -> Var<'t> {
    let b = labels.len();
    let tape = h_pp.tape();
    h_pp.with_value(|m| warn_zero_rows(m, "disease-related"));
    h_zero.with_value(|m| warn_zero_rows(m, "original-graph"));
    let logits = reference_logits(h_pp, h_zero, beta, tau);
    let mask = Array2::from_shape_fn((b, b), |(i, j)| i != j);
    let log_prob = logits.log_softmax_rows(Some(&mask));
    let mut weights = Mat::zeros((b, b));
    let mut contributors = 0usize;
    for i in 0..b {
        let peers: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if peers.is_empty() {
            continue;
        }
        contributors += 1;
        for &p in &peers {
            weights[[i, p]] = 1.0 / peers.len() as f64;
        }
    }
    if contributors == 0 {
        warn!("no subject in the batch has a same-label peer; reference term is 0");
        return tape.scalar(0.0);
    }
    log_prob.weighted_sum(&weights).scale(-1.0 / contributors as f64)
}

/// Full `B×B` matrix of reference-adjusted similarity logits.
pub fn reference_logits<'t>(h_pp: Var<'t>, h_zero: Var<'t>, beta: f64, tau: f64) -> Var<'t> {
    let zp = h_pp.normalize_rows();
    let z0 = h_zero.normalize_rows();
    zp.matmul(zp.t()).sub(z0.matmul(z0.t()).scale(beta)).scale(1.0 / tau)
}

/// Alignment of complementary embeddings with the original-graph
/// embeddings: InfoNCE with `cos(H⁰_i, H⁻_j)/τ` logits and the diagonal as
/// the positive, averaged over the batch.
pub fn alignment_contrastive<'t>(h_zero: Var<'t>, h_minus: Var<'t>, tau: f64) -> Var<'t> {
    let b = h_zero.shape().0;
    h_minus.with_value(|m| warn_zero_rows(m, "complementary"));
    let logits = h_zero.normalize_rows().matmul(h_minus.normalize_rows().t()).scale(1.0 / tau);
    logits.log_softmax_rows(None).weighted_sum(&Mat::eye(b)).scale(-1.0 / b as f64)
}

pub struct ContrastTerms<'t> {
    pub reference: Var<'t>,
    pub alignment: Var<'t>,
    pub total: Var<'t>,
}

pub fn contrastive_loss<'t>(h_pp: Var<'t>, h_zero: Var<'t>, h_minus: Var<'t>, labels: &[usize], cfg: &ContrastConfig) -> Result<ContrastTerms<'t>> {
    let b = labels.len();
    if b == 0 || h_pp.shape().0 != b || h_zero.shape().0 != b || h_minus.shape().0 != b {
        return Err(Error::Dimension(format!("contrastive batch of {b} labels does not match embeddings")));
    }
    let tape = h_pp.tape();
    let reference = if b >= 2 { reference_contrastive(h_pp, h_zero, labels, cfg.beta, cfg.tau) } else { tape.scalar(0.0) };
    let alignment = alignment_contrastive(h_zero, h_minus, cfg.tau);
    let total = reference.scale(cfg.w_ref).add(alignment.scale(cfg.w_usl));
    Ok(ContrastTerms { reference, alignment, total })
}

/// Mean cross-entropy of `B×C` logits against class indices.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let (b, c) = logits.shape();
    let onehot = Array2::from_shape_fn((b, c), |(i, k)| if labels[i] == k { 1.0 } else { 0.0 });
    logits.log_softmax_rows(None).weighted_sum(&onehot).scale(-1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn importance_rule() {
        assert_eq!(important_phases(&[1.0]), vec![0]);
        assert_eq!(important_phases(&[0.25; 4]), vec![0]);
        assert_eq!(important_phases(&[0.5, 0.3, 0.2]), vec![0]);
        assert_eq!(important_phases(&[0.2, 0.4, 0.4]), vec![1, 2]);
    }

    #[test]
    fn softmax_weights_for_scores_2_0_0() {
        let tape = Tape::new();
        let scores = tape.leaf(array![[2.0], [0.0], [0.0]]);
        let a = scores.t().log_softmax_rows(None).exp().value();
        let e2 = 2f64.exp();
        assert!((a[[0, 0]] - e2 / (e2 + 2.0)).abs() < 1e-12);
        assert!((a[[0, 0]] - 0.7870).abs() < 1e-4 && (a[[0, 1]] - 0.1065).abs() < 1e-4);
        let h = tape.leaf(randn(3, 2, 1));
        let b = aggregate_from_weights(tape.leaf(a.clone()), tape.leaf(a.clone()), tape.leaf(a), h, h, h);
        assert_eq!(b.important, vec![0]);
        assert_eq!(b.h_pp.value().row(0), h.value().row(0));
    }

    #[test]
    fn single_phase_falls_back_to_it() {
        let tape = Tape::new();
        let h = tape.leaf(randn(1, 3, 2));
        let one = tape.leaf(array![[1.0]]);
        let b = aggregate_from_weights(one, one, one, h, h, h);
        assert_eq!(b.important, vec![0]);
        assert_eq!(b.h_pp.value(), h.value());
    }

    #[test]
    fn classifier_softmax_values() {
        assert_eq!(softmax(&[1.0, 1.0]), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alignment_single_sample_identity() {
        let tape = Tape::new();
        let h = tape.leaf(array![[0.3, -1.0, 2.0]]);
        assert_eq!(alignment_contrastive(h, h, 0.1).item(), 0.0);
    }

    #[test]
    fn reference_degenerate_pair() {
        let tape = Tape::new();
        let hp = tape.leaf(array![[1.0, 2.0], [1.0, 2.0]]);
        let h0 = tape.leaf(array![[0.5, -1.0], [0.5, -1.0]]);
        let logits = reference_logits(hp, h0, 0.65, 0.1).value();
        assert!((logits[[0, 1]] - 3.5).abs() < 1e-12);
        assert!((logits[[1, 0]] - 3.5).abs() < 1e-12);
        assert_eq!(reference_contrastive(hp, h0, &[1, 1], 0.65, 0.1).item(), 0.0);
    }

    /// Standard supervised contrastive loss written directly from its
    /// definition, used as an oracle for the β = 0 reduction.
    fn supcon_reference(z: &Mat, labels: &[usize], tau: f64) -> f64 {
        let b = labels.len();
        let unit: Vec<Vec<f64>> = z
            .rows()
            .into_iter()
            .map(|r| {
                let n = r.dot(&r).sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..b).filter(|&j| j != i).map(|j| sim(i, j).exp()).sum();
            let term: f64 = pos.iter().map(|&p| (sim(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
            total -= term;
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn beta_zero_reduces_to_supervised_contrastive() {
        let labels = [0, 1, 1, 0, 1, 0, 0];
        for seed in 0..5 {
            let z = randn(7, 4, seed);
            let tape = Tape::new();
            let got = reference_contrastive(tape.leaf(z.clone()), tape.leaf(randn(7, 4, seed + 100)), &labels, 0.0, 0.1).item();
            let want = supcon_reference(&z, &labels, 0.1);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn reference_invariant_to_batch_permutation() {
        let labels = [0, 1, 1, 0, 1];
        let hp = randn(5, 3, 11);
        let h0 = randn(5, 3, 12);
        let perm = [3, 0, 4, 2, 1];
        let tape = Tape::new();
        let a = reference_contrastive(tape.leaf(hp.clone()), tape.leaf(h0.clone()), &labels, 0.65, 0.1).item();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let php = hp.select(ndarray::Axis(0), &perm);
        let ph0 = h0.select(ndarray::Axis(0), &perm);
        let b = reference_contrastive(tape.leaf(php), tape.leaf(ph0), &plabels, 0.65, 0.1).item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn singleton_labels_give_zero_reference() {
        let tape = Tape::new();
        let v = reference_contrastive(tape.leaf(randn(2, 3, 1)), tape.leaf(randn(2, 3, 2)), &[0, 1], 0.65, 0.1);
        assert_eq!(v.item(), 0.0);
    }

    #[test]
    fn alignment_nonnegative() {
        for seed in 0..20 {
            let tape = Tape::new();
            let v = alignment_contrastive(tape.leaf(randn(6, 3, seed)), tape.leaf(randn(6, 3, seed + 50)), 0.1).item();
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_perfect_and_uniform() {
        let tape = Tape::new();
        let l = tape.leaf(array![[0.0, 0.0], [0.0, 0.0]]);
        assert!((cross_entropy(l, &[0, 1]).item() - 2f64.ln()).abs() < 1e-15);
        let l = tape.leaf(array![[800.0, 0.0], [0.0, 800.0]]);
        assert_eq!(cross_entropy(l, &[0, 1]).item(), 0.0);
    }

    #[test]
    fn attention_shift_invariance_and_importance_monotonicity() {
        let tape = Tape::new();
        let s = randn(5, 1, 3);
        let a1 = tape.leaf(s.clone()).t().log_softmax_rows(None).exp().value();
        let a2 = tape.leaf(s.mapv(|v| v + 7.5)).t().log_softmax_rows(None).exp().value();
        for (x, y) in a1.iter().zip(a2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let alpha = |sc: &Mat| -> Vec<f64> { softmax(&sc.iter().copied().collect::<Vec<_>>()) };
        for t in 0..5 {
            let before = important_phases(&alpha(&s)).contains(&t);
            let mut raised = s.clone();
            raised[[t, 0]] += 0.7;
            let after = important_phases(&alpha(&raised)).contains(&t);
            assert!(!before || after);
        }
    }

    #[test]
    fn smaller_temperature_gives_larger_gradients() {
        let hp = randn(2, 3, 21);
        let h0 = randn(2, 3, 22);
        let grad_norm = |tau: f64| {
            let tape = Tape::new();
            let x = tape.leaf(hp.clone());
            let l = reference_contrastive(x, tape.leaf(h0.clone()), &[0, 0], 0.65, tau).add(alignment_contrastive(tape.leaf(h0.clone()), x, tau));
            tape.backward(l).wrt(x).iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(grad_norm(0.1) > grad_norm(1.0));
    }
}
