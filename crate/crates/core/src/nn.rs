//! Parameter storage, the two layer types the models are built from, and
//! the Adam optimizer.

use crate::autograd::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use std::ops::Index;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint("parameter names do not match the configured model".into()));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.values).zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(Error::Checkpoint(format!("parameter {name}: expected shape {:?}, found {:?}", dst.dim(), src.dim())));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedTensor { name: n.clone(), rows: v.nrows(), cols: v.ncols(), data: v.rows().into_iter().map(|r| r.to_vec()).collect() })
            .collect()
    }

    pub fn from_named(tensors: &[NamedTensor]) -> Result<Self> {
        let mut store = ParamStore::new();
        for t in tensors {
            if t.data.len() != t.rows || t.data.iter().any(|r| r.len() != t.cols) {
                return Err(Error::Checkpoint(format!("tensor {} has ragged or mis-sized data", t.name)));
            }
            let flat: Vec<f64> = t.data.iter().flatten().copied().collect();
            let m = Mat::from_shape_vec((t.rows, t.cols), flat).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(t.name.clone(), m);
        }
        Ok(store)
    }
}

/// A parameter tensor as it appears in checkpoint files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

/// Parameters of one store placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order.
    pub fn grads(&self, g: &Gradients) -> Vec<Mat> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;
    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

pub(crate) fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Dense layer `x W + b` with `x` laid out as rows of samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, bound));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, fan_out, bound));
        Self { weight, bias, fan_in, fan_out }
    }

    /// Same shapes, all-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::zeros((fan_in, fan_out)));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p[self.weight]).add_row(p[self.bias])
    }
}

/// Dilated causal 1-D convolution over a batch of sequences stacked along
/// rows (`(B·L)×C_in → (B·L)×C_out`). Tap `j` of the kernel reads the input
/// `j·dilation` steps in the past; positions before the sequence start read
/// zeros.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalConv1d {
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
    pub dilation: usize,
}

impl CausalConv1d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let taps = (0..kernel).map(|j| store.add(format!("{name}.tap{j}"), uniform_init(rng, c_in, c_out, bound))).collect();
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, c_out, bound));
        Self { taps, bias, dilation }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, seq_len: usize) -> Var<'t> {
        let mut acc: Option<Var<'t>> = None;
        for (j, &tap) in self.taps.iter().enumerate() {
            let shift = j * self.dilation;
            if shift >= seq_len {
                continue;
            }
            let term = x.shift_rows(shift, seq_len).matmul(p[tap]);
            acc = Some(match acc {
                Some(a) => a.add(term),
                None => term,
            });
        }
        acc.expect("kernel has at least one tap").add_row(p[self.bias])
    }
}

/// Adam optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|p| Mat::zeros(p.dim())).collect::<Vec<_>>();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) -> f64 {
        assert_eq!(grads.len(), store.len());
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.eps;
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        norm
    }
}
