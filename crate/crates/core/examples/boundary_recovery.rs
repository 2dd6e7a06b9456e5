//! Pretrain the phase-partition autoencoder on state-switching recordings
//! and measure how often every planted boundary is matched within ±10,
//! alongside the mean number of detected boundaries so that recovery by
//! over-segmentation shows up.
//!
//! ```bash
//! cargo run --release --example boundary_recovery -- [epochs] [window]
//! ```

use brainstr::app::{self, AppConfig, AppModel, AppTrainConfig, DetectionRule, TAU_C_GRID};
use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};
use std::time::Instant;

fn hit(detected: &[usize], truth: &[usize], tol: usize) -> bool {
    truth[1..truth.len() - 1].iter().all(|&b| detected.iter().any(|&d| d.abs_diff(b) <= tol))
}

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(30);
    let window = args.get(1).copied().unwrap_or(40);
    let cfg = SynthConfig { effect_size: 0.0, ..Default::default() };
    let data = generate_dataset_seeded(&cfg, 10)?;
    let signals: Vec<_> = data.iter().map(|r| &r.signal).collect();

    let start = Instant::now();
    let model = AppModel::new(AppConfig::new(cfg.n_rois, window), 1)?;
    let train = AppTrainConfig { epochs, ..Default::default() };
    let out = app::pretrain_app(model, &signals, &train, 2)?;
    println!("pretrained {epochs} epochs in {:.1?}; final loss {:.4}", start.elapsed(), out.loss_curve.last().unwrap_or(&f64::NAN));

    let codes: Vec<_> = signals.iter().map(|x| app::state_codes(&out.model, x, train.detect_stride)).collect::<Result<_, _>>()?;
    for tau in TAU_C_GRID {
        let rule = DetectionRule::default();
        let mut hits = 0;
        let mut detected = 0;
        for (rec, c) in data.iter().zip(&codes) {
            let b = app::partition_boundaries(c, tau, window, train.detect_stride, rec.n_timepoints(), &rule);
            let truth = rec.true_boundaries.as_ref().expect("synthetic ground truth");
            detected += b.len() - 2;
            if hit(&b, truth, 10) {
                hits += 1;
            }
            if log::log_enabled!(log::Level::Debug) {
                log::debug!("tau {tau}: {b:?} vs {truth:?}");
            }
        }
        let planted: usize = data.iter().map(|r| r.true_boundaries.as_ref().map_or(0, |b| b.len() - 2)).sum();
        println!(
            "tau_c {tau:<5} recovered {hits}/{}  interior boundaries detected {:.2} per subject (planted {:.2})",
            data.len(),
            detected as f64 / data.len() as f64,
            planted as f64 / data.len() as f64
        );
    }
    Ok(())
}
