//! Evolve binary structures over a partition with a nonzero increment
//! network and print how many edges each phase retains.

use brainstr::model::{MainModel, ModelConfig};
use brainstr::segfc::{build_partition, MIN_FC_LEN};
use brainstr::structgen::{retained_ratio, StructGenConfig};
use brainstr::synthgen::{generate_dataset_seeded, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> brainstr::Result<()> {
    env_logger::init();
    let data = generate_dataset_seeded(&SynthConfig::default(), 1)?;
    let rec = &data[0];
    let part = build_partition(&rec.signal, &[0, 100, 180, 260, 400], MIN_FC_LEN)?;

    let cfg = ModelConfig { structgen: StructGenConfig { init_const: 0.5, alpha_delta: 0.1, ..Default::default() }, ..Default::default() };
    let mut model = MainModel::new(rec.n_rois(), cfg, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = model.structgen.inc_out.weight;
    model.params.get_mut(w).mapv_inplace(|_| rng.random_range(-0.3..0.3));

    let ins = model.inspect(&part)?;
    for (t, s) in ins.structures.binary.iter().enumerate() {
        let z = ins.structures.descriptors[t];
        println!("phase {t}: descriptor [{:.3}, {:.3}, {:.3}] retained {:.3} attention {:.3}", z[0], z[1], z[2], retained_ratio(s), ins.alpha_plus[t]);
    }
    println!("important phases {:?}, P(label 1) = {:.3}", ins.important, ins.prob_positive);
    Ok(())
}
