//! Split one recording at its planted boundaries and print the phase-wise
//! correlation of the planted edge block against the rest.

use brainstr::segfc::{build_partition, MIN_FC_LEN};
use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let cfg = SynthConfig::default();
    let data = generate_dataset_seeded(&cfg, 1)?;
    let planted = cfg.planted_edges();
    for rec in &data {
        let truth = rec.true_boundaries.clone().unwrap_or_else(|| vec![0, rec.n_timepoints()]);
        let part = build_partition(&rec.signal, &truth, MIN_FC_LEN)?;
        let states = rec.true_states.clone().unwrap_or_default();
        println!("{} (label {})", rec.subject_id, rec.label);
        for (w, fc) in part.fc_matrices.iter().enumerate() {
            let block = planted.iter().map(|&(i, j)| fc[[i, j]]).sum::<f64>() / planted.len() as f64;
            let n = fc.nrows();
            let (mut rest, mut count) = (0.0, 0);
            for i in 0..n {
                for j in i + 1..n {
                    if !planted.contains(&(i, j)) {
                        rest += fc[[i, j]];
                        count += 1;
                    }
                }
            }
            let state = states.get(w).map_or("?".into(), |s| s.to_string());
            println!(
                "  phase {w} [{}, {}) state {state}: planted block {block:.3}, other edges {:.3}",
                part.boundaries[w],
                part.boundaries[w + 1],
                rest / count as f64
            );
        }
    }
    Ok(())
}
