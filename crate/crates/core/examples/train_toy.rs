//! Two-stage training on a small noise-only dataset: SGD on the mean head,
//! then Adam on the Bayesian model initialized from the selected checkpoint.

use cmbclean::skysim::{build_dataset, SimConfig};
use cmbclean::train::{train, TrainConfig};
use cmbclean::unet::{transfer_weights, UNet, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmbclean::Result<()> {
    let mut sim = SimConfig { nside: 8, ..SimConfig::default() };
    sim.foreground.amplitude = 0.0;
    let data = build_dataset(40, &sim, 1)?.train_data()?;
    let out = std::env::temp_dir().join("cmbclean-train-toy");

    let cfg = UNetConfig { nside: 8, depth: 1, widths: vec![8], ..UNetConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut det = UNet::new(cfg.clone(), &mut rng)?;
    let tc = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 1e-4, ..TrainConfig::deterministic(3) };
    let first = train(&mut det, &data, &tc, &out.join("det"))?;
    for r in &first.history {
        println!("deterministic epoch {}: train {:.3} val {:.3}", r.epoch, r.train_loss, r.val_loss);
    }
    println!("selected epoch {}", first.selected_epoch);

    let mut bayes = UNet::new(cfg.with_bayesian(true), &mut rng)?;
    transfer_weights(&first.selected, &mut bayes, &mut rng)?;
    let tc = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 1e-3, ..TrainConfig::bayesian(3) };
    let second = train(&mut bayes, &data, &tc, &out.join("bayes"))?;
    for r in &second.history {
        println!("bayesian epoch {}: train {:.3} val {:.3}", r.epoch, r.train_loss, r.val_loss);
    }
    println!("dropout rates {:?}", second.selected.dropout_probabilities());
    println!("checkpoints in {}", out.display());
    Ok(())
}
