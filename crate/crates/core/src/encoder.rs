//! Structure-aware encoder: edge-to-edge and edge-to-node filters over an
//! `N×N` connectivity matrix followed by a small MLP head.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Bound, Linear, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.33;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub e2e_channels: usize,
    pub e2n_channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { e2e_channels: 8, e2n_channels: 8, hidden: 64, embed_dim: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub n_rois: usize,
    pub config: EncoderConfig,
    /// `N×C`: filter applied along each row (aggregates a row).
    pub row_filter: ParamId,
    /// `N×C`: filter applied down each column (aggregates a column).
    pub col_filter: ParamId,
    pub e2e_bias: ParamId,
    pub e2n: Linear,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

/// The three per-phase embedding streams.
pub struct PhaseEmbeddings<'t> {
    pub plus: Vec<Var<'t>>,
    pub minus: Vec<Var<'t>>,
    pub zero: Vec<Var<'t>>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n_rois: usize, config: EncoderConfig, rng: &mut R) -> Self {
        let c = config.e2e_channels;
        let bound = 1.0 / (n_rois as f64).sqrt();
        let row_filter = store.add("encoder.e2e_row", uniform_init(rng, n_rois, c, bound));
        let col_filter = store.add("encoder.e2e_col", uniform_init(rng, n_rois, c, bound));
        let e2e_bias = store.add("encoder.e2e_bias", uniform_init(rng, 1, c, bound));
        let e2n = Linear::new(store, "encoder.e2n", c * n_rois, config.e2n_channels, rng);
        let head_hidden = Linear::new(store, "encoder.head_hidden", n_rois * config.e2n_channels, config.hidden, rng);
        let head_out = Linear::new(store, "encoder.head_out", config.hidden, config.embed_dim, rng);
        Self { n_rois, config, row_filter, col_filter, e2e_bias, e2n, head_hidden, head_out }
    }

    fn check(&self, a: &Var<'_>) -> Result<()> {
        let n = self.n_rois;
        if a.shape() != (n, n) {
            return Err(Error::Dimension(format!("encoder built for {n}×{n} input, got {:?}", a.shape())));
        }
        Ok(())
    }

    /// Edge-to-edge map, `N×(C·N)`, before activation.
    pub fn edge_to_edge<'t>(&self, p: &Bound<'t>, a: Var<'t>) -> Var<'t> {
        let row_term = a.matmul(p[self.row_filter]);
        let col_term = a.t().matmul(p[self.col_filter]);
        row_term.e2e_broadcast(col_term, p[self.e2e_bias])
    }

    /// Edge-to-node map of an edge feature map, `N×C'`, before activation.
    pub fn edge_to_node<'t>(&self, p: &Bound<'t>, e: Var<'t>) -> Var<'t> {
        self.e2n.forward(p, e)
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, a: Var<'t>) -> Result<Var<'t>> {
        self.check(&a)?;
        let e = self.edge_to_edge(p, a).leaky_relu(LEAKY_SLOPE);
        let f = self.edge_to_node(p, e).leaky_relu(LEAKY_SLOPE);
        let flat = f.reshape(1, self.n_rois * self.config.e2n_channels);
        let h = self.head_hidden.forward(p, flat).leaky_relu(LEAKY_SLOPE);
        Ok(self.head_out.forward(p, h))
    }

    /// Encode `A⁺`, `A⁻` and `A` of every phase with the same parameters.
    pub fn encode_sequence<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        positive: &[Var<'t>],
        negative: &[Var<'t>],
        original: &[Mat],
    ) -> Result<PhaseEmbeddings<'t>> {
        if positive.len() != original.len() || negative.len() != original.len() {
            return Err(Error::Dimension(format!(
                "phase count mismatch: {} retained, {} complementary, {} original",
                positive.len(),
                negative.len(),
                original.len()
            )));
        }
        let enc = |vs: &[Var<'t>]| vs.iter().map(|&a| self.encode(p, a)).collect::<Result<Vec<_>>>();
        let zero_in: Vec<Var<'t>> = original.iter().map(|a| tape.leaf(a.clone())).collect();
        Ok(PhaseEmbeddings { plus: enc(positive)?, minus: enc(negative)?, zero: enc(&zero_in)? })
    }
}
