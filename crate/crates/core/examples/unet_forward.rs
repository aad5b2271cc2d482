//! Deterministic and Bayesian U-Net variants on the same input, and the
//! weight transfer that makes them agree before any Bayesian training.

use cmbclean::autodiff::Tensor;
use cmbclean::layers::{MaskMode, NormMode};
use cmbclean::unet::{transfer_weights, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmbclean::Result<()> {
    let cfg = UNetConfig { nside: 16, depth: 2, widths: vec![16, 32], ..UNetConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let det = UNet::new(cfg.clone(), &mut rng)?;
    let mut bayes = UNet::new(cfg.with_bayesian(true), &mut rng)?;
    println!("deterministic: {} parameters", det.params().n_scalars());
    println!(
        "bayesian:      {} parameters, {} dropout layers",
        bayes.params().n_scalars(),
        bayes.dropout_layers().count()
    );

    transfer_weights(&det, &mut bayes, &mut rng)?;
    let x = Tensor::from_fn([1, 9, 3072], |_| rng.random_range(-1.0..1.0));
    let (a, _) = det.predict(&x, NormMode::Eval, &mut MaskMode::KeepAll)?;
    let (b, log_var) = bayes.predict(&x, NormMode::Eval, &mut MaskMode::KeepAll)?;
    println!("mean heads differ by at most {:.2e} after transfer", a.max_abs_diff(&b));
    let lv = log_var.expect("bayesian head");
    println!("initial log-variance spread {:.2e}", (lv.sum_squares() / lv.len() as f64).sqrt());

    let (s1, _) = bayes.predict(&x, NormMode::Eval, &mut MaskMode::Sample(&mut rng))?;
    let (s2, _) = bayes.predict(&x, NormMode::Eval, &mut MaskMode::Sample(&mut rng))?;
    println!(
        "two dropout samples differ by {:.2e} at p = {:?}",
        s1.max_abs_diff(&s2),
        &bayes.dropout_probabilities()[..2]
    );
    Ok(())
}
