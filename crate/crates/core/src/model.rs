//! The end-to-end classifier: structure generator, structure-aware encoder
//! and phase attention sharing one parameter store.

use crate::autograd::{Mat, Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::objective::{self, AttentionModel, Bundle, ContrastConfig};
use crate::segfc::PhasePartition;
use crate::structgen::{structure_regularizers, StructGen, StructGenConfig, StructRegWeights, StructureSequence, StructureVars};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub structgen: StructGenConfig,
    pub encoder: EncoderConfig,
    pub attention_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn attention_hidden(&self) -> usize {
        self.attention_hidden.unwrap_or(self.encoder.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.e2e_channels == 0 || e.e2n_channels == 0 || e.hidden == 0 || e.embed_dim == 0 || self.attention_hidden() == 0 {
            return Err(Error::Config("encoder and attention widths must be positive".into()));
        }
        if self.structgen.hidden == 0 || !self.structgen.alpha_delta.is_finite() || !self.structgen.init_const.is_finite() {
            return Err(Error::Config("structure generator settings must be finite with positive width".into()));
        }
        Ok(())
    }
}

/// Every weight of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub contrast: ContrastConfig,
    pub structure: StructRegWeights,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        self.structure.validate()
    }
}

#[derive(Debug, Clone)]
pub struct MainModel {
    pub n_rois: usize,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub structgen: StructGen,
    pub encoder: Encoder,
    pub attention: AttentionModel,
}

/// Forward state of one subject on a tape.
pub struct SubjectPass<'t> {
    pub structures: StructureVars<'t>,
    pub bundle: Bundle<'t>,
}

/// Loss terms of one batch; each is a scalar on the tape.
pub struct BatchLoss<'t> {
    pub ce: Var<'t>,
    pub reference: Var<'t>,
    pub alignment: Var<'t>,
    pub bin: Var<'t>,
    pub ms: Var<'t>,
    pub sp: Var<'t>,
    pub total: Var<'t>,
    /// `B×2` classifier logits.
    pub logits: Var<'t>,
}

/// Scalar values of a [`BatchLoss`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub reference: f64,
    pub alignment: f64,
    pub bin: f64,
    pub ms: f64,
    pub sp: f64,
    pub total: f64,
}

impl LossValues {
    pub const TERMS: [&'static str; 7] = ["ce", "reference", "alignment", "bin", "ms", "sp", "total"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.ce, self.reference, self.alignment, self.bin, self.ms, self.sp, self.total]
    }

    pub fn accumulate(&mut self, other: &LossValues, weight: f64) {
        self.ce += weight * other.ce;
        self.reference += weight * other.reference;
        self.alignment += weight * other.alignment;
        self.bin += weight * other.bin;
        self.ms += weight * other.ms;
        self.sp += weight * other.sp;
        self.total += weight * other.total;
    }
}

impl BatchLoss<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            ce: self.ce.item(),
            reference: self.reference.item(),
            alignment: self.alignment.item(),
            bin: self.bin.item(),
            ms: self.ms.item(),
            sp: self.sp.item(),
            total: self.total.item(),
        }
    }
}

/// Everything the interpretability export needs for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInspection {
    pub alpha_plus: Vec<f64>,
    pub important: Vec<usize>,
    pub structures: StructureSequence,
    pub prob_positive: f64,
}

impl MainModel {
    pub fn new(n_rois: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_rois < 2 {
            return Err(Error::Config(format!("need at least 2 ROIs, got {n_rois}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let structgen = StructGen::new(&mut params, n_rois, config.structgen, &mut rng);
        let encoder = Encoder::new(&mut params, n_rois, config.encoder, &mut rng);
        let attention = AttentionModel::new(&mut params, config.encoder.embed_dim, config.attention_hidden(), &mut rng);
        Ok(Self { n_rois, config, params, structgen, encoder, attention })
    }

    /// Rebuild from a config and saved parameters; names and shapes must match.
    pub fn from_params(n_rois: usize, config: ModelConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = Self::new(n_rois, config, 0)?;
        m.params.load_from(saved)?;
        Ok(m)
    }

    pub fn subject_pass<'t>(&self, p: &Bound<'t>, tape: &'t Tape, partition: &PhasePartition) -> Result<SubjectPass<'t>> {
        if partition.n_rois() != self.n_rois {
            return Err(Error::Dimension(format!("model built for {} ROIs, partition has {}", self.n_rois, partition.n_rois())));
        }
        let structures = self.structgen.evolve(p, tape, partition)?;
        let emb = self.encoder.encode_sequence(p, tape, &structures.positive, &structures.negative, &partition.fc_matrices)?;
        let bundle = self.attention.aggregate(p, &emb.plus, &emb.minus, &emb.zero);
        Ok(SubjectPass { structures, bundle })
    }

    pub fn batch_loss<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        partitions: &[&PhasePartition],
        labels: &[usize],
        weights: &LossWeights,
    ) -> Result<BatchLoss<'t>> {
        if partitions.is_empty() || partitions.len() != labels.len() {
            return Err(Error::Dimension(format!("{} partitions for {} labels", partitions.len(), labels.len())));
        }
        let passes = partitions.iter().map(|part| self.subject_pass(p, tape, part)).collect::<Result<Vec<_>>>()?;
        let b = passes.len() as f64;
        let stack = |f: fn(&Bundle<'t>) -> Var<'t>| Var::vstack(&passes.iter().map(|s| f(&s.bundle)).collect::<Vec<_>>());
        let h_pp = stack(|b| b.h_pp);
        let h_zero = stack(|b| b.h_zero);
        let h_minus = stack(|b| b.h_minus);
        let logits = self.attention.logits(p, h_pp);
        let ce = objective::cross_entropy(logits, labels);
        let contrast = objective::contrastive_loss(h_pp, h_zero, h_minus, labels, &weights.contrast)?;
        let sw = &weights.structure;
        let (mut bin, mut ms, mut sp) = (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0));
        for s in &passes {
            let r = structure_regularizers(&s.structures.continuous, sw.delta_margin);
            bin = bin.add(r.bin);
            ms = ms.add(r.ms);
            sp = sp.add(r.sp);
        }
        let (bin, ms, sp) = (bin.scale(1.0 / b), ms.scale(1.0 / b), sp.scale(1.0 / b));
        let total =
            ce.add(contrast.total.scale(weights.contrast.lambda_str)).add(bin.scale(sw.lambda_bin)).add(ms.scale(sw.lambda_ms)).add(sp.scale(sw.lambda_sp));
        Ok(BatchLoss { ce, reference: contrast.reference, alignment: contrast.alignment, bin, ms, sp, total, logits })
    }

    /// Probability of the positive class for each partition.
    pub fn predict(&self, partitions: &[&PhasePartition]) -> Result<Vec<f64>> {
        partitions
            .iter()
            .map(|part| {
                let tape = Tape::new();
                let p = self.params.bind(&tape);
                let pass = self.subject_pass(&p, &tape, part)?;
                let logits = self.attention.logits(&p, pass.bundle.h_pp).value();
                Ok(objective::softmax(&[logits[[0, 0]], logits[[0, 1]]])[1])
            })
            .collect()
    }

    pub fn inspect(&self, partition: &PhasePartition) -> Result<SubjectInspection> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let pass = self.subject_pass(&p, &tape, partition)?;
        let logits: Mat = self.attention.logits(&p, pass.bundle.h_pp).value();
        Ok(SubjectInspection {
            alpha_plus: pass.bundle.alpha_plus.value().iter().copied().collect(),
            important: pass.bundle.important.clone(),
            structures: pass.structures.values(),
            prob_positive: objective::softmax(&[logits[[0, 0]], logits[[0, 1]]])[1],
        })
    }
}
