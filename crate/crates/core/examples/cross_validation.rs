//! Cross-validate the full pipeline with a short schedule and compare it
//! with the static-connectivity logistic baseline on the same folds.
//!
//! ```bash
//! cargo run --release --example cross_validation -- [main_epochs]
//! ```

use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};
use brainstr::trainer::baseline::DEFAULT_RIDGE;
use brainstr::trainer::metrics::mean_std;
use brainstr::trainer::{baseline_cv, run_cv, TrainConfig};
use std::time::Instant;

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let data = generate_dataset_seeded(&SynthConfig::default(), 15)?;
    let mut cfg = TrainConfig { folds: 3, main_epochs: epochs, ..Default::default() };
    cfg.app.epochs = 3;
    cfg.app.train_stride = 8;
    cfg.model.structgen.init_const = 0.7;
    cfg.loss.structure.lambda_bin = 0.0;

    let start = Instant::now();
    let report = run_cv(&data, &cfg)?;
    for f in &report.folds {
        println!("fold {}: accuracy {:.3} auc {:.3} tau_c {} ce {:.3} -> {:.3}", f.fold, f.accuracy, f.auc, f.selected_tau_c, f.initial_ce(), f.final_ce());
    }
    println!(
        "pipeline accuracy {:.3} ± {:.3}, auc {:.3} ± {:.3} in {:.1?}",
        report.mean_accuracy,
        report.std_accuracy,
        report.mean_auc,
        report.std_auc,
        start.elapsed()
    );

    let base = baseline_cv(&data, cfg.folds, cfg.seed, DEFAULT_RIDGE)?;
    let (acc, _) = mean_std(&base.iter().map(|m| m.accuracy).collect::<Vec<_>>());
    let (auc, _) = mean_std(&base.iter().map(|m| m.auc).collect::<Vec<_>>());
    println!("static-FC baseline accuracy {acc:.3}, auc {auc:.3}");
    Ok(())
}
