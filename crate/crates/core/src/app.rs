//! Adaptive phase partition: a dilated causal TCN autoencoder whose latent
//! splits into a slowly varying state code and a residual code, plus
//! changepoint detection on consecutive state-code distances.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, CausalConv1d, Linear, ParamStore};
use crate::segfc::{merge_short_phases, segment, SegmentSequence, MIN_FC_LEN};
use log::{debug, warn};
use ndarray::{s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Threshold grid searched for `tau_c`.
pub const TAU_C_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.5];

const DILATIONS: [usize; 3] = [1, 2, 4];
const UPSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub n_rois: usize,
    pub window: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub state_dim: usize,
}

impl AppConfig {
    pub fn new(n_rois: usize, window: usize) -> Self {
        Self { n_rois, window, hidden: 64, kernel: 3, latent_dim: 32, state_dim: 16 }
    }

    pub fn resid_dim(&self) -> usize {
        self.latent_dim - self.state_dim
    }

    fn coarse_len(&self) -> usize {
        self.window.div_ceil(UPSAMPLE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rois == 0 || self.window == 0 || self.hidden == 0 || self.kernel == 0 {
            return Err(Error::Config("APP sizes must all be positive".into()));
        }
        if self.state_dim == 0 || self.state_dim >= self.latent_dim {
            return Err(Error::Config(format!("state_dim must lie in [1, latent_dim) ({} vs {})", self.state_dim, self.latent_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppLossWeights {
    pub lambda_smooth: f64,
    pub lambda_orth: f64,
}

impl Default for AppLossWeights {
    fn default() -> Self {
        Self { lambda_smooth: 0.1, lambda_orth: 1.0 }
    }
}

impl AppLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_smooth", self.lambda_smooth), ("lambda_orth", self.lambda_orth)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangepointConfig {
    pub tau_c: f64,
}

#[derive(Debug, Clone)]
pub struct AppModel {
    pub config: AppConfig,
    pub params: ParamStore,
    enc: Vec<CausalConv1d>,
    dec_in: Linear,
    dec: Vec<CausalConv1d>,
}

/// Forward products of one batch of stacked segments.
pub struct AppForward<'t> {
    pub state: Var<'t>,
    pub resid: Var<'t>,
    pub recon: Var<'t>,
}

/// The three weighted terms and their sum, all on the tape.
pub struct AppLossTerms<'t> {
    pub recon: Var<'t>,
    pub smooth: Var<'t>,
    pub orth: Var<'t>,
    pub total: Var<'t>,
}

impl AppModel {
    pub fn new(config: AppConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (n, h, d, k) = (config.n_rois, config.hidden, config.latent_dim, config.kernel);
        let enc = vec![
            CausalConv1d::new(&mut params, "enc0", n, h, k, DILATIONS[0], &mut rng),
            CausalConv1d::new(&mut params, "enc1", h, h, k, DILATIONS[1], &mut rng),
            CausalConv1d::new(&mut params, "enc2", h, d, k, DILATIONS[2], &mut rng),
        ];
        let dec_in = Linear::new(&mut params, "dec_in", d, config.coarse_len() * h, &mut rng);
        let dec = vec![
            CausalConv1d::new(&mut params, "dec0", h, h, k, DILATIONS[2], &mut rng),
            CausalConv1d::new(&mut params, "dec1", h, h, k, DILATIONS[1], &mut rng),
            CausalConv1d::new(&mut params, "dec2", h, n, k, DILATIONS[0], &mut rng),
        ];
        Ok(Self { config, params, enc, dec_in, dec })
    }

    /// Rebuild from a config and saved parameters; shapes are checked.
    pub fn from_params(config: AppConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(saved)?;
        Ok(m)
    }

    fn check_batch(&self, x: &Mat) -> Result<()> {
        let w = self.config.window;
        if x.ncols() != self.config.n_rois || !x.nrows().is_multiple_of(w) || x.nrows() == 0 {
            return Err(Error::Dimension(format!("APP expects stacked {w}×{} segments, got {:?}", self.config.n_rois, x.dim())));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let w = self.config.window;
        let h0 = self.enc[0].forward(p, x, w).relu();
        let h1 = self.enc[1].forward(p, h0, w).relu();
        self.enc[2].forward(p, h1, w).block_mean(w)
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, latent: Var<'t>) -> Var<'t> {
        let cfg = &self.config;
        let (b, _) = latent.shape();
        let l0 = cfg.coarse_len();
        let coarse = self.dec_in.forward(p, latent).reshape(b * l0, cfg.hidden).relu();
        let up = coarse.block_upsample(l0, UPSAMPLE, cfg.window);
        let g0 = self.dec[0].forward(p, up, cfg.window).relu();
        let g1 = self.dec[1].forward(p, g0, cfg.window).relu();
        self.dec[2].forward(p, g1, cfg.window)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> AppForward<'t> {
        let latent = self.encode(p, x);
        let sd = self.config.state_dim;
        let state = latent.slice_cols(0, sd);
        let resid = latent.slice_cols(sd, self.config.latent_dim);
        let recon = self.decode(p, latent);
        AppForward { state, resid, recon }
    }

    /// Encode a sequence of segments into `(state, residual)` rows.
    pub fn encode_segments(&self, segs: &SegmentSequence) -> Result<(Mat, Mat)> {
        if segs.window != self.config.window {
            return Err(Error::Dimension(format!("segment window {} does not match model window {}", segs.window, self.config.window)));
        }
        let latent = self.latents(&segs.segments)?;
        let sd = self.config.state_dim;
        Ok((latent.slice(s![.., ..sd]).to_owned(), latent.slice(s![.., sd..]).to_owned()))
    }

    fn latents(&self, segments: &[Mat]) -> Result<Mat> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(segments.len());
        for chunk in segments.chunks(CHUNK) {
            let x = stack(chunk);
            self.check_batch(&x)?;
            let tape = Tape::new();
            let p = self.params.bind(&tape);
            let lat = self.encode(&p, tape.leaf(x)).value();
            out.push(lat);
        }
        let views: Vec<_> = out.iter().map(|m| m.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("latent chunks share width"))
    }

    /// Build the loss for consecutive segments on `tape`.
    pub fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, segments: &[Mat], weights: &AppLossWeights) -> Result<AppLossTerms<'t>> {
        if segments.len() < 2 {
            return Err(Error::Undefined { detail: "smoothness term needs at least 2 segments".into() });
        }
        let x = stack(segments);
        self.check_batch(&x)?;
        let xv = tape.leaf(x);
        let fwd = self.forward(p, xv);
        Ok(app_loss_terms(fwd.state, fwd.resid, fwd.recon, xv, weights))
    }
}

/// Compose the autoencoder objective from its pieces.
///
/// * reconstruction: mean squared error over all entries;
/// * smoothness: mean over consecutive pairs of `‖s_k − s_{k−1}‖²`;
/// * orthogonality: mean over segments of the squared cosine between the
///   state and residual codes.
pub fn app_loss_terms<'t>(state: Var<'t>, resid: Var<'t>, recon: Var<'t>, target: Var<'t>, weights: &AppLossWeights) -> AppLossTerms<'t> {
    let recon_l = recon.sub(target).square().mean();
    let k = state.shape().0;
    let smooth = state.row_diff().square().sum().scale(1.0 / (k - 1) as f64);
    let orth = state.normalize_rows().mul(resid.normalize_rows()).sum_rows().square().mean();
    let total = recon_l.add(smooth.scale(weights.lambda_smooth)).add(orth.scale(weights.lambda_orth));
    AppLossTerms { recon: recon_l, smooth, orth, total }
}

pub(crate) fn stack(segments: &[Mat]) -> Mat {
    let views: Vec<_> = segments.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("segments share width")
}

/// Squared distances between consecutive rows; entry `i` is `d_{i+2}` in
/// one-based segment numbering.
pub fn consecutive_distances(latents: &Mat) -> Vec<f64> {
    latents.rows().into_iter().zip(latents.rows().into_iter().skip(1)).map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (y - x) * (y - x)).sum()).collect()
}

/// Center and rescale state codes so their mean per-dimension variance is 1.
///
/// The distance threshold is absolute, while the smoothness term is free to
/// shrink the code scale during training; this puts every subject's codes on
/// a common scale before thresholding.
pub fn standardize_latents(latents: &Mat) -> Mat {
    let mean = latents.mean_axis(Axis(0)).expect("nonempty latents");
    let centered = latents - &mean;
    let total_var = centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64;
    if total_var > 0.0 {
        centered / total_var.sqrt()
    } else {
        centered
    }
}

/// How a run of consecutive super-threshold distances becomes one boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunAnchor {
    /// The segment with the largest distance in the run.
    Peak,
    /// The middle of the run.
    #[default]
    Center,
}

/// Detection rule parameters beyond the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionRule {
    pub anchor: RunAnchor,
    /// Super-threshold segments separated by at most this many
    /// sub-threshold segments belong to the same run.
    pub max_gap: usize,
    pub min_phase_len: usize,
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self { anchor: RunAnchor::Center, max_gap: 0, min_phase_len: MIN_FC_LEN }
    }
}

/// Threshold consecutive state-code distances into phase boundaries.
///
/// `latents` holds one state code per segment (row `k` is segment `k+1`
/// covering `[k·s, k·s + w)`). A distance `d_k` above `tau_c` marks a
/// transition at the center of segment `k`, `round((k−1)·s + w/2)`; runs of
/// consecutive detections become a single boundary.
pub fn detect_changepoints(latents: &Mat, cfg: ChangepointConfig, w: usize, s: usize, t: usize) -> Vec<usize> {
    detect_with_rule(latents, cfg, w, s, t, &DetectionRule::default())
}

pub fn detect_with_rule(latents: &Mat, cfg: ChangepointConfig, w: usize, s: usize, t: usize, rule: &DetectionRule) -> Vec<usize> {
    let d = consecutive_distances(latents);
    // index i in d corresponds to one-based segment k = i + 2
    let hits: Vec<usize> = (0..d.len()).filter(|&i| d[i] > cfg.tau_c).collect();
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for i in hits {
        match runs.last_mut() {
            Some(run) if i - run.last().unwrap() <= rule.max_gap + 1 => run.push(i),
            _ => runs.push(vec![i]),
        }
    }
    let center_of = |i: usize| -> f64 { (i + 1) as f64 * s as f64 + w as f64 / 2.0 };
    let mut cuts: Vec<usize> = runs
        .iter()
        .map(|run| {
            let pos = match rule.anchor {
                RunAnchor::Peak => {
                    let best = run.iter().copied().fold(run[0], |b, i| if d[i] > d[b] { i } else { b });
                    center_of(best)
                }
                RunAnchor::Center => (center_of(run[0]) + center_of(*run.last().unwrap())) / 2.0,
            };
            pos.round() as usize
        })
        .filter(|&c| c > 0 && c < t)
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut boundaries = Vec::with_capacity(cuts.len() + 2);
    boundaries.push(0);
    boundaries.extend(cuts);
    boundaries.push(t);
    merge_short_phases(&boundaries, rule.min_phase_len).0
}

/// Settings for the unsupervised pretraining stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stride between segments used for training sequences.
    pub train_stride: usize,
    /// Stride between segments used for changepoint detection.
    pub detect_stride: usize,
    pub weights: AppLossWeights,
}

impl Default for AppTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 1e-3, train_stride: 4, detect_stride: 1, weights: AppLossWeights::default() }
    }
}

pub struct PretrainOutcome {
    pub model: AppModel,
    /// Mean total loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Pretrain `model` on every signal in `signals`, one optimizer step per
/// subject per epoch over that subject's strided segment sequence.
pub fn pretrain_app(mut model: AppModel, signals: &[&Mat], cfg: &AppTrainConfig, seed: u64) -> Result<PretrainOutcome> {
    if signals.is_empty() {
        return Err(Error::Config("APP pretraining needs at least one recording".into()));
    }
    cfg.weights.validate()?;
    let sequences: Vec<Vec<Mat>> =
        signals.iter().map(|x| segment(x, model.config.window, cfg.train_stride.max(1)).map(|s| s.segments)).collect::<Result<_>>()?;
    if let Some(bad) = sequences.iter().position(|s| s.len() < 2) {
        return Err(Error::Undefined { detail: format!("recording {bad} yields fewer than 2 training segments") });
    }
    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let terms = model.loss(&tape, &p, &sequences[i], &cfg.weights)?;
            let value = terms.total.item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("APP loss {value}") });
            }
            total += value;
            let grads = p.grads(&tape.backward(terms.total));
            opt.step(&mut model.params, &grads);
        }
        let mean = total / order.len() as f64;
        debug!("app epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    if curve.len() >= 5 {
        let tail = &curve[curve.len() * 4 / 5..];
        if tail.windows(2).any(|w| w[1] > w[0] * 1.05) {
            warn!("APP loss rose by more than 5% between epochs in the last fifth of training");
        }
    }
    Ok(PretrainOutcome { model, loss_curve: curve })
}

/// Standardized state codes of one recording at the detection stride.
pub fn state_codes(model: &AppModel, signal: &Mat, detect_stride: usize) -> Result<Mat> {
    let segs = segment(signal, model.config.window, detect_stride)?;
    let (state, _) = model.encode_segments(&segs)?;
    Ok(standardize_latents(&state))
}

/// Boundaries of one recording for a given threshold.
pub fn partition_boundaries(codes: &Mat, tau_c: f64, window: usize, detect_stride: usize, t: usize, rule: &DetectionRule) -> Vec<usize> {
    if codes.nrows() < 2 {
        return vec![0, t];
    }
    detect_with_rule(codes, ChangepointConfig { tau_c }, window, detect_stride, t, rule)
}
