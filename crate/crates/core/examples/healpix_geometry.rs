//! Pixel geometry of a HEALPix grid: centres, neighbours, nested hierarchy
//! and the galactic cut used for evaluation.

use cmbclean::healpix::{children, latitude_mask, neighbors, parent, pixel_center, Resolution};

fn main() -> cmbclean::Result<()> {
    let res = Resolution::new(4)?;
    println!("nside {} has {} pixels of {:.5} sr", res.nside(), res.n_pixels(), res.pixel_area());
    for pix in [0, 71, 191] {
        let (theta, phi) = pixel_center(res, pix)?;
        println!(
            "pixel {pix:>3}: colatitude {:6.2} deg, longitude {:6.2} deg, neighbours {:?}",
            theta.to_degrees(),
            phi.to_degrees(),
            neighbors(res, pix)?
        );
    }
    println!("pixel 71 sits in parent {} with siblings {:?}", parent(71), children(parent(71)));
    for nside in [16, 32, 64] {
        let mask = latitude_mask(Resolution::new(nside)?, 30.0)?;
        println!("nside {nside}: +-30 deg cut keeps {:.4} of the sky", mask.sky_fraction());
    }
    Ok(())
}
