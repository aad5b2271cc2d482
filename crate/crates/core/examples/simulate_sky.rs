//! Simulates a few nine-band observations and reports the component
//! amplitudes per band.

use cmbclean::healpix::latitude_mask;
use cmbclean::skysim::{SimConfig, Simulator};

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn main() -> cmbclean::Result<()> {
    let cfg = SimConfig { nside: 16, ..SimConfig::default() };
    let sim = Simulator::new(cfg.clone(), 7)?;
    let c = sim.components(0)?;
    println!("CMB rms {:.1} uK", rms(c.cmb.values()));
    let plane = latitude_mask(sim.resolution(), 30.0)?;
    println!("{:>6} {:>12} {:>12} {:>10}", "GHz", "fg (plane)", "fg (cut)", "noise");
    for (b, band) in cfg.bands.iter().enumerate() {
        let fg = c.foreground[b].values();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (p, &keep) in plane.keep().iter().enumerate() {
            if keep {
                outside.push(fg[p])
            } else {
                inside.push(fg[p])
            }
        }
        println!(
            "{:>6} {:>12.1} {:>12.1} {:>10.1}",
            band.freq_ghz,
            rms(&inside),
            rms(&outside),
            rms(c.noise[b].values())
        );
    }
    let inst = sim.instance(0)?;
    println!("instance 0: x has {} channels, y rms {:.1} uK", inst.x.channels(), rms(inst.y.values()));
    Ok(())
}
