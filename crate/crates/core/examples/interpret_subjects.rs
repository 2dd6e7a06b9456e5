//! Fit a short pipeline on every subject, then print per-phase importance
//! and retained ratios for a few subjects and the group edge AUROC.

use brainstr::app;
use brainstr::explain::{edge_recovery_auc, interpret, GroupAccumulator, SubnetworkMap};
use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};
use brainstr::trainer::{fit_pipeline, partition_for, TrainConfig};

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let synth = SynthConfig::default();
    let data = generate_dataset_seeded(&synth, 10)?;
    let mut cfg = TrainConfig { main_epochs: 20, ..Default::default() };
    cfg.app.epochs = 3;
    cfg.app.train_stride = 8;
    cfg.model.structgen.init_const = 0.7;
    cfg.loss.structure.lambda_bin = 0.0;
    let fitted = fit_pipeline(&data, &(0..data.len()).collect::<Vec<_>>(), &cfg, 1)?;

    let labels: Vec<String> = (0..synth.n_rois).map(|i| if i < 4 { "block".into() } else { "rest".into() }).collect();
    let map = SubnetworkMap { labels };
    let mut group = GroupAccumulator::new(synth.n_rois);
    for (k, rec) in data.iter().enumerate() {
        let codes = app::state_codes(&fitted.app, &rec.signal, cfg.app.detect_stride)?;
        let part = partition_for(&codes, rec, fitted.tau_c, &cfg)?;
        let (record, ins) = interpret(&fitted.model, &part, &rec.subject_id, rec.label, &map)?;
        group.add(&ins);
        if k < 4 {
            println!("{} label {} p={:.3}", record.subject_id, record.label, record.prob_positive);
            for ph in &record.phases {
                println!(
                    "  [{}, {}) importance {:.3}{} retained {:.3}",
                    ph.start,
                    ph.end,
                    ph.importance,
                    if ph.important { "*" } else { "" },
                    ph.retained_ratio
                );
            }
            for s in &record.subnetworks {
                println!("  {}-{} strength {:.3}", s.first, s.second, s.strength);
            }
        }
    }
    let planted = synth.planted_edges();
    println!("planted-edge auroc, important phases {:.3}", edge_recovery_auc(&group.important_edges(), &planted)?);
    if !group.nonimportant_edges().is_empty() {
        println!("planted-edge auroc, other phases {:.3}", edge_recovery_auc(&group.nonimportant_edges(), &planted)?);
    }
    Ok(())
}
