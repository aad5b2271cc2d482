//! Internal linear combination on simulated observations: weights, residual
//! and comparison against the best single band.

use cmbclean::healpix::latitude_mask;
use cmbclean::ilc::{ilc_clean, ilc_weights};
use cmbclean::skysim::{SimConfig, Simulator};
use cmbclean::uq::{pearson_r, rmse};

fn main() -> cmbclean::Result<()> {
    let cfg = SimConfig { nside: 16, ..SimConfig::default() };
    let sim = Simulator::new(cfg.clone(), 8)?;
    let mask = latitude_mask(sim.resolution(), 30.0)?;
    for id in 0..3 {
        let inst = sim.instance(id)?;
        let w = ilc_weights(&inst.x, None)?;
        let clean = ilc_clean(&inst.x, &w)?;
        let weights: Vec<String> = w.iter().map(|v| format!("{v:+.3}")).collect();
        println!("instance {id}: weights [{}]", weights.join(" "));
        let best = (0..inst.x.channels())
            .map(|c| rmse(inst.x.channel(c), inst.y.values(), &mask))
            .collect::<cmbclean::Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        println!(
            "  cut-sky rmse {:.2} uK (best single band {:.2}), r {:.4}",
            rmse(clean.values(), inst.y.values(), &mask)?,
            best,
            pearson_r(clean.values(), inst.y.values(), &mask)?
        );
    }
    Ok(())
}
