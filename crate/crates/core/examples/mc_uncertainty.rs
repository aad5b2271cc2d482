//! Monte Carlo dropout on an untrained Bayesian U-Net: predictive mean and
//! the split of the variance into epistemic and aleatoric parts.

use cmbclean::autodiff::Tensor;
use cmbclean::layers::logit;
use cmbclean::unet::{UNet, UNetConfig};
use cmbclean::uq::mc_predict;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> cmbclean::Result<()> {
    let cfg = UNetConfig { nside: 8, depth: 2, widths: vec![8, 16], bayesian: true, ..UNetConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = UNet::new(cfg, &mut rng)?;
    let x = Tensor::from_fn([1, 9, 768], |_| rng.random_range(-1.0..1.0));
    for p in [1e-3, 0.05, 0.2] {
        let ids: Vec<_> = net.dropout_layers().map(|d| d.p_logit).collect();
        for id in ids {
            net.params_mut().get_mut(id).data_mut()[0] = logit(p);
        }
        let uq = mc_predict(&net, &x, 50, 1)?;
        println!(
            "p = {p:<5}: mean epistemic {:.3e}, aleatoric {:.3}, total {:.3}",
            mean(&uq.epistemic),
            mean(&uq.aleatoric),
            mean(&uq.total)
        );
    }
    Ok(())
}
