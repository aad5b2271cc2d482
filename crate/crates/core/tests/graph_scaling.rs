//! Timing lives in its own test binary so no other test thread competes
//! for the core while it measures.

use std::time::Instant;

use cmbclean::graph::{cheb_apply, scaled_laplacian, ChebCoeffs};
use cmbclean::healpix::{Resolution, SkyMap};

fn res(n: u32) -> Resolution {
    Resolution::new(n).unwrap()
}

/// Median over many short trials of the cost ratio between consecutive
/// sizes, for one K=3 filter pass. Each trial times every size back to back
/// within about a millisecond, so a change in machine speed between trials
/// scales all sizes alike and cancels in the ratio.
fn per_doubling_ratios(nsides: &[u32]) -> Vec<f64> {
    let th = ChebCoeffs::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let largest = res(*nsides.last().unwrap()).n_pixels();
    let cases: Vec<_> = nsides
        .iter()
        .map(|&n| {
            let lhat = scaled_laplacian(res(n)).unwrap();
            let f = SkyMap::from_fn(res(n), |p| (p as f64).sin()).unwrap();
            (lhat, f, (2 * largest / res(n).n_pixels()).max(2))
        })
        .collect();
    let trials = 300;
    let mut ratios = vec![Vec::with_capacity(trials); nsides.len() - 1];
    for _ in 0..trials {
        let times: Vec<f64> = cases
            .iter()
            .map(|(lhat, f, reps)| {
                std::hint::black_box(cheb_apply(lhat, &th, f).unwrap());
                let t = Instant::now();
                for _ in 0..*reps {
                    std::hint::black_box(cheb_apply(lhat, &th, f).unwrap());
                }
                t.elapsed().as_secs_f64() / *reps as f64
            })
            .collect();
        for (r, w) in ratios.iter_mut().zip(times.windows(2)) {
            r.push(w[1] / w[0]);
        }
    }
    ratios
        .into_iter()
        .map(|mut r| {
            r.sort_by(f64::total_cmp);
            r[r.len() / 2]
        })
        .collect()
}

#[test]
fn filter_cost_scales_linearly_in_pixels() {
    let ratios = per_doubling_ratios(&[4, 8, 16, 32]);
    for ratio in &ratios {
        assert!((3.0..=5.0).contains(ratio), "per-doubling cost ratios {ratios:?}");
    }
}
