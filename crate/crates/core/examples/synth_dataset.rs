//! Generate a planted-edge dataset, write it to disk and read it back.
//!
//! ```bash
//! cargo run --release --example synth_dataset -- /tmp/brainstr-data
//! ```

use brainstr::io;
use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};
use std::path::PathBuf;

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("brainstr-data"), PathBuf::from);
    let cfg = SynthConfig::default();
    let data = generate_dataset_seeded(&cfg, 5)?;
    io::write_dataset(&out, &data)?;

    let back = io::load_dataset(&out)?;
    for rec in &back {
        let b = rec.true_boundaries.as_deref().unwrap_or_default();
        println!("{} label {} T={} N={} boundaries {:?}", rec.subject_id, rec.label, rec.n_timepoints(), rec.n_rois(), b);
    }
    println!("planted edges {:?}", cfg.planted_edges());
    println!("wrote {} subjects to {}", back.len(), out.display());
    Ok(())
}
