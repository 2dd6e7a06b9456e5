//! Incremental graph structure generator.
//!
//! A shared base structure `S_0` is advanced phase by phase by an MLP that
//! reads a three-number phase descriptor. Each continuous structure is
//! binarized at 0.5 with a straight-through estimator and used to split the
//! phase FC into a retained part and its complement.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::segfc::PhasePartition;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructGenConfig {
    pub alpha_delta: f64,
    pub init_const: f64,
    pub hidden: usize,
}

impl Default for StructGenConfig {
    fn default() -> Self {
        Self { alpha_delta: 0.01, init_const: 0.05, hidden: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructRegWeights {
    pub delta_margin: f64,
    pub lambda_bin: f64,
    pub lambda_ms: f64,
    pub lambda_sp: f64,
}

impl Default for StructRegWeights {
    fn default() -> Self {
        Self { delta_margin: 0.1, lambda_bin: 1.0, lambda_ms: 1.0, lambda_sp: 0.27 }
    }
}

impl StructRegWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_margin", self.delta_margin), ("lambda_bin", self.lambda_bin), ("lambda_ms", self.lambda_ms), ("lambda_sp", self.lambda_sp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Parameters of the generator inside a shared [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructGen {
    pub n_rois: usize,
    pub config: StructGenConfig,
    pub base: ParamId,
    pub inc_hidden: Linear,
    pub inc_out: Linear,
}

/// `[normalized location, normalized duration, ‖A_t − A_{t−1}‖_F]`; the
/// change term is 0 when there is no previous phase.
pub fn phase_descriptor(c_prev: usize, c_cur: usize, a_cur: &Mat, a_prev: Option<&Mat>, t: usize) -> [f64; 3] {
    let tt = t as f64;
    let change = a_prev.map_or(0.0, |p| (a_cur - p).iter().map(|v| v * v).sum::<f64>().sqrt());
    [(c_prev + c_cur) as f64 / (2.0 * tt), (c_cur - c_prev) as f64 / tt, change]
}

pub fn partition_descriptors(partition: &PhasePartition) -> Vec<[f64; 3]> {
    let t = partition.total_length();
    (0..partition.phase_count())
        .map(|i| {
            let (a, b) = partition.phase(i);
            let prev = i.checked_sub(1).map(|j| &partition.fc_matrices[j]);
            phase_descriptor(a, b, &partition.fc_matrices[i], prev, t)
        })
        .collect()
}

/// Tape handles for one subject's structure sequence.
pub struct StructureVars<'t> {
    pub continuous: Vec<Var<'t>>,
    pub binary: Vec<Var<'t>>,
    pub positive: Vec<Var<'t>>,
    pub negative: Vec<Var<'t>>,
    pub descriptors: Vec<[f64; 3]>,
}

/// Plain values of a structure sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureSequence {
    pub continuous: Vec<Mat>,
    pub binary: Vec<Mat>,
    pub positive_fc: Vec<Mat>,
    pub negative_fc: Vec<Mat>,
    pub descriptors: Vec<[f64; 3]>,
}

impl StructureVars<'_> {
    pub fn values(&self) -> StructureSequence {
        StructureSequence {
            continuous: self.continuous.iter().map(|v| v.value()).collect(),
            binary: self.binary.iter().map(|v| v.value()).collect(),
            positive_fc: self.positive.iter().map(|v| v.value()).collect(),
            negative_fc: self.negative.iter().map(|v| v.value()).collect(),
            descriptors: self.descriptors.clone(),
        }
    }
}

/// Regularizer values on the tape.
pub struct StructRegTerms<'t> {
    pub bin: Var<'t>,
    pub ms: Var<'t>,
    pub sp: Var<'t>,
}

impl StructGen {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_rois: usize, config: StructGenConfig, rng: &mut R) -> Self {
        let base = store.add("structgen.base", Mat::from_elem((n_rois, n_rois), config.init_const));
        let inc_hidden = Linear::new(store, "structgen.inc_hidden", 3, config.hidden, rng);
        let inc_out = Linear::zeros(store, "structgen.inc_out", config.hidden, n_rois * n_rois);
        Self { n_rois, config, base, inc_hidden, inc_out }
    }

    /// `ΔS_t = f_θ(z_t)` reshaped to `N×N`.
    pub fn increment<'t>(&self, p: &Bound<'t>, tape: &'t Tape, z: [f64; 3]) -> Var<'t> {
        let zv = tape.leaf(Mat::from_shape_vec((1, 3), z.to_vec()).expect("3-vector"));
        let h = self.inc_hidden.forward(p, zv).tanh();
        self.inc_out.forward(p, h).reshape(self.n_rois, self.n_rois)
    }

    /// Run the recursion over every phase of `partition`.
    pub fn evolve<'t>(&self, p: &Bound<'t>, tape: &'t Tape, partition: &PhasePartition) -> Result<StructureVars<'t>> {
        let descriptors = partition_descriptors(partition);
        self.evolve_with(p, &partition.fc_matrices, descriptors, |z| self.increment(p, tape, z))
    }

    /// Recursion with a caller-supplied increment map; used to exercise the
    /// update rule with arbitrary increments.
    pub fn evolve_with<'t>(
        &self,
        p: &Bound<'t>,
        fcs: &[Mat],
        descriptors: Vec<[f64; 3]>,
        mut increment: impl FnMut([f64; 3]) -> Var<'t>,
    ) -> Result<StructureVars<'t>> {
        let n = self.n_rois;
        if fcs.is_empty() {
            return Err(Error::Dimension("structure recursion needs at least one phase".into()));
        }
        if let Some(a) = fcs.iter().find(|a| a.dim() != (n, n)) {
            return Err(Error::Dimension(format!("phase FC is {:?}, generator expects {n}×{n}", a.dim())));
        }
        let mut prev = p[self.base];
        let mut out = StructureVars {
            continuous: Vec::with_capacity(fcs.len()),
            binary: Vec::with_capacity(fcs.len()),
            positive: Vec::with_capacity(fcs.len()),
            negative: Vec::with_capacity(fcs.len()),
            descriptors: descriptors.clone(),
        };
        for (a, &z) in fcs.iter().zip(&descriptors) {
            let stepped = prev.add(increment(z).scale(self.config.alpha_delta));
            let sym = stepped.add(stepped.t()).scale(0.5);
            let s_t = sym.clamp_ste(0.0, 1.0);
            let bin = s_t.ste_threshold(BINARIZE_THRESHOLD);
            out.positive.push(bin.mul_const(a));
            out.negative.push(bin.rsub_scalar(1.0).mul_const(a));
            out.binary.push(bin);
            out.continuous.push(s_t);
            prev = s_t;
        }
        Ok(out)
    }
}

/// Binarization, temporal-consistency and sparsity terms over one sequence.
pub fn structure_regularizers<'t>(continuous: &[Var<'t>], delta: f64) -> StructRegTerms<'t> {
    let tape = continuous[0].tape();
    let n = continuous[0].shape().0 as f64;
    let mut bin = tape.scalar(0.0);
    let mut sp = tape.scalar(0.0);
    let mut ms = tape.scalar(0.0);
    for (t, &s_t) in continuous.iter().enumerate() {
        bin = bin.add(s_t.mul(s_t.rsub_scalar(1.0)).square().sum());
        sp = sp.add(s_t.abs().sum().scale(1.0 / (n * n)));
        if t > 0 {
            let jump = s_t.sub(continuous[t - 1]).square().sum();
            ms = ms.add(jump.add_scalar(-delta).softplus());
        }
    }
    StructRegTerms { bin, ms, sp }
}

/// Fraction of upper-triangle entries equal to 1.
pub fn retained_ratio(binary: &Mat) -> f64 {
    let n = binary.nrows();
    if n < 2 {
        return 0.0;
    }
    let kept = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| binary[[i, j]] == 1.0).count();
    kept as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segfc::build_partition;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(n: usize) -> (ParamStore, StructGen) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = StructGen::new(&mut store, n, StructGenConfig::default(), &mut rng);
        (store, g)
    }

    fn partition(n: usize, bounds: &[usize]) -> PhasePartition {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = *bounds.last().unwrap();
        let x = Array2::from_shape_fn((t, n), |_| StandardNormal.sample(&mut rng));
        build_partition(&x, bounds, 5).unwrap()
    }

    #[test]
    fn descriptor_examples() {
        let a = Mat::eye(4);
        assert_eq!(phase_descriptor(20, 50, &a, Some(&a), 100), [0.35, 0.3, 0.0]);
        assert_eq!(phase_descriptor(0, 10, &a, None, 100)[2], 0.0);
        let b = &a + &(Mat::eye(4) * 0.5);
        assert!((phase_descriptor(0, 10, &b, Some(&a), 100)[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_increment_keeps_base() {
        let (store, g) = setup(4);
        let part = partition(4, &[0, 30, 60, 90]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let seq = g.evolve(&p, &tape, &part).unwrap().values();
        assert_eq!(seq.continuous.len(), 3);
        for t in 0..3 {
            assert!(seq.continuous[t].iter().all(|&v| v == 0.05));
            assert!(seq.binary[t].iter().all(|&v| v == 0.0));
            assert!(seq.positive_fc[t].iter().all(|&v| v == 0.0));
            assert_eq!(seq.negative_fc[t], part.fc_matrices[t]);
        }
    }

    #[test]
    fn threshold_is_strict() {
        let tape = Tape::new();
        let s = tape.leaf(array![[0.7, 0.5], [0.5, 0.2]]);
        assert_eq!(s.ste_threshold(BINARIZE_THRESHOLD).value(), array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn variable_phase_counts() {
        let (store, g) = setup(3);
        for bounds in [&[0, 50][..], &[0, 20, 50], &[0, 10, 20, 30, 40, 50]] {
            let part = partition(3, bounds);
            let tape = Tape::new();
            let p = store.bind(&tape);
            assert_eq!(g.evolve(&p, &tape, &part).unwrap().binary.len(), bounds.len() - 1);
        }
    }

    #[test]
    fn mismatched_size_rejected() {
        let (store, g) = setup(4);
        let part = partition(3, &[0, 40]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(matches!(g.evolve(&p, &tape, &part), Err(Error::Dimension(_))));
    }

    #[test]
    fn regularizer_closed_forms() {
        let tape = Tape::new();
        let binary = [tape.leaf(array![[1.0, 0.0], [0.0, 1.0]])];
        assert_eq!(structure_regularizers(&binary, 0.1).bin.item(), 0.0);

        let half = [tape.leaf(Mat::from_elem((4, 4), 0.5))];
        let r = structure_regularizers(&half, 0.1);
        assert!((r.bin.item() - 1.0).abs() < 1e-12);
        assert!((r.sp.item() - 0.5).abs() < 1e-12);
        assert_eq!(r.ms.item(), 0.0);

        let s = tape.leaf(Mat::from_elem((3, 3), 0.3));
        let r = structure_regularizers(&[s, s, s], 0.1);
        let expect = 2.0 * (1.0 + (-0.1f64).exp()).ln();
        assert!((r.ms.item() - expect).abs() < 1e-12);
        assert!((expect - 2.0 * 0.644397).abs() < 1e-6);
    }

    #[test]
    fn retained_ratio_counts_upper_triangle() {
        let b = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]];
        assert!((retained_ratio(&b) - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clamp_holds_under_huge_increments(signs in proptest::collection::vec(prop::bool::ANY, 1..8), seed in 0u64..50) {
            let (store, g) = setup(3);
            let part = partition(3, &[0, 60]);
            let fcs = vec![part.fc_matrices[0].clone(); signs.len()];
            let desc = vec![[0.0; 3]; signs.len()];
            let tape = Tape::new();
            let p = store.bind(&tape);
            let mut i = 0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = g.evolve_with(&p, &fcs, desc, |_| {
                let sign = if signs[i] { 1e6 } else { -1e6 };
                i += 1;
                let noise = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.5..1.5));
                tape.leaf(noise * sign)
            }).unwrap().values();
            for (s, (b, (pos, neg))) in seq.continuous.iter().zip(seq.binary.iter().zip(seq.positive_fc.iter().zip(&seq.negative_fc))) {
                prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
                for ((x, y), a) in pos.iter().zip(neg.iter()).zip(part.fc_matrices[0].iter()) {
                    prop_assert_eq!(x + y, *a);
                }
            }
        }
    }
}
