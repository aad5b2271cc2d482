//! Spherical harmonic synthesis and analysis, and the angular power
//! spectrum of a Gaussian realization.

use cmbclean::harmonics::{analyze, masked_spectrum, sample_alm, spectrum_from_alm, synthesize, PowerSpectrum};
use cmbclean::healpix::{latitude_mask, MaskMap, Resolution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmbclean::Result<()> {
    let res = Resolution::new(16)?;
    let lmax = 24;
    let spec = PowerSpectrum::placeholder(lmax);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alm = sample_alm(&spec, &mut rng);
    let map = synthesize(&alm, res)?;

    let back = analyze(&map, lmax)?;
    let worst = (0..=lmax)
        .flat_map(|l| (0..=l).map(move |m| (l, m)))
        .map(|(l, m)| (back.get(l, m) - alm.get(l, m)).norm())
        .fold(0.0, f64::max);
    println!("round trip at nside 16, lmax {lmax}: max |delta a_lm| = {worst:.2e}");

    let full = spectrum_from_alm(&back);
    let cut = masked_spectrum(&map, &latitude_mask(res, 30.0)?, lmax)?;
    let whole = masked_spectrum(&map, &MaskMap::full(res), lmax)?;
    println!("{:>3} {:>10} {:>10} {:>10} {:>10}", "l", "input", "sample", "full sky", "cut sky");
    for l in (2..=lmax).step_by(4) {
        println!("{l:>3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}", spec.cl()[l], full.cl()[l], whole.cl()[l], cut.cl()[l]);
    }
    Ok(())
}
