//! Builds the pixel-adjacency graph, estimates its largest eigenvalue and
//! applies a Chebyshev low-pass filter to a noisy map.

use cmbclean::graph::{build_graph, cheb_apply, estimate_lambda_max, laplacian, scaled_laplacian, ChebCoeffs};
use cmbclean::healpix::{pixel_center, Resolution, SkyMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn roughness(m: &SkyMap, l: &cmbclean::graph::LaplacianOperator) -> cmbclean::Result<f64> {
    let lx = l.apply(m.values())?;
    Ok(m.values().iter().zip(&lx).map(|(a, b)| a * b).sum::<f64>() / m.values().len() as f64)
}

fn main() -> cmbclean::Result<()> {
    let res = Resolution::new(16)?;
    let graph = build_graph(res);
    println!("{} nodes, {} edges", graph.n_nodes(), graph.n_edges());
    let l = laplacian(graph);
    println!("largest Laplacian eigenvalue {:.4}", estimate_lambda_max(&l, 1e-6)?);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noisy = SkyMap::from_fn(res, |p| {
        let (theta, phi) = pixel_center(res, p).unwrap();
        theta.cos() + 0.5 * (2.0 * phi).sin() * theta.sin() + rng.random_range(-0.5..0.5)
    })?;
    // a smooth response g(x) = (1 - x)/2 on the rescaled spectrum [-1, 1]
    let lowpass = ChebCoeffs::new(vec![0.5, -0.5])?;
    let mut smooth = noisy.clone();
    let lhat = scaled_laplacian(res)?;
    for _ in 0..4 {
        smooth = cheb_apply(&lhat, &lowpass, &smooth)?;
    }
    println!("roughness x'Lx/n before {:.4}, after four passes {:.4}", roughness(&noisy, &l)?, roughness(&smooth, &l)?);
    Ok(())
}
