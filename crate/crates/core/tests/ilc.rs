use cmbclean::healpix::{latitude_mask, Resolution, SkyMap};
use cmbclean::ilc::{ilc_clean, ilc_weights, output_variance};
use cmbclean::skysim::{build_dataset, SimConfig, Split};
use cmbclean::uq::rmse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn stacked(res: Resolution, channels: &[Vec<f64>]) -> SkyMap {
    SkyMap::new(res, channels.len(), channels.concat()).unwrap()
}

/// Nine channels: common signal, a rank-one foreground and per-channel noise.
fn nine_band_map(rng: &mut ChaCha8Rng) -> SkyMap {
    let res = Resolution::new(8).unwrap();
    let n = res.n_pixels();
    let s = gauss(n, 50.0, rng);
    let f = gauss(n, 30.0, rng);
    let channels: Vec<Vec<f64>> = (0..9)
        .map(|c| {
            let a = 0.2 * (c as f64 + 1.0).powi(2);
            let noise = gauss(n, 2.0 + c as f64, rng);
            (0..n).map(|p| s[p] + a * f[p] + noise[p]).collect()
        })
        .collect();
    stacked(res, &channels)
}

#[test]
fn two_channel_equal_noise_gives_equal_weights() {
    let res = Resolution::new(16).unwrap();
    let n = res.n_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // chance signal-noise correlation moves the weights by about
    // σ_cmb/(σ_noise·√n), so the signal is kept weaker than the noise
    let cmb = gauss(n, 1.0, &mut rng);
    let a: Vec<f64> = cmb.iter().zip(gauss(n, 3.0, &mut rng)).map(|(c, z)| c + z).collect();
    let b: Vec<f64> = cmb.iter().zip(gauss(n, 3.0, &mut rng)).map(|(c, z)| c + z).collect();
    let w = ilc_weights(&stacked(res, &[a, b]), None).unwrap();
    let tol = 2.0 / (n as f64).sqrt();
    assert!((w[0] - 0.5).abs() <= tol && (w[1] - 0.5).abs() <= tol, "{w:?}");
}

#[test]
fn weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = nine_band_map(&mut rng);
        let w = ilc_weights(&x, None).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mask = latitude_mask(x.resolution(), 30.0).unwrap();
        let wm = ilc_weights(&x, Some(&mask)).unwrap();
        assert!((wm.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn identical_channels_are_reproduced() {
    let res = Resolution::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = gauss(res.n_pixels(), 5.0, &mut rng);
    let x = stacked(res, &vec![c.clone(); 9]);
    let w = ilc_weights(&x, None).unwrap();
    let out = ilc_clean(&x, &w).unwrap();
    for (a, b) in out.values().iter().zip(&c) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn all_zero_channels_are_singular() {
    let res = Resolution::new(4).unwrap();
    let x = SkyMap::zeros(res, 9);
    assert!(ilc_weights(&x, None).is_err());
}

#[test]
fn clean_is_a_linear_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = nine_band_map(&mut rng);
    let y = nine_band_map(&mut rng);
    let mut e0 = vec![0.0; 9];
    e0[0] = 1.0;
    assert_eq!(ilc_clean(&x, &e0).unwrap().values(), x.channel(0));

    let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sum = SkyMap::new(x.resolution(), 9, x.values().iter().zip(y.values()).map(|(a, b)| a + b).collect()).unwrap();
    let lhs = ilc_clean(&sum, &w).unwrap();
    let (cx, cy) = (ilc_clean(&x, &w).unwrap(), ilc_clean(&y, &w).unwrap());
    for ((l, a), b) in lhs.values().iter().zip(cx.values()).zip(cy.values()) {
        assert!((l - a - b).abs() <= 1e-10 * (1.0 + l.abs()));
    }
    assert!(ilc_clean(&x, &w[..8]).is_err());
}

#[test]
fn closed_form_beats_random_unit_sum_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = nine_band_map(&mut rng);
    let mask = latitude_mask(x.resolution(), 30.0).unwrap();
    let w = ilc_weights(&x, Some(&mask)).unwrap();
    let best = output_variance(&x, &w, Some(&mask)).unwrap();
    for _ in 0..10_000 {
        let mut c: Vec<f64> = w.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let s: f64 = c.iter().sum();
        c.iter_mut().for_each(|v| *v /= s);
        let var = output_variance(&x, &c, Some(&mask)).unwrap();
        assert!(var >= best * (1.0 - 1e-9), "{var} < {best}");
    }
    for ch in 0..9 {
        let mut e = vec![0.0; 9];
        e[ch] = 1.0;
        assert!(best <= output_variance(&x, &e, Some(&mask)).unwrap());
    }
}

#[test]
fn desk_test_set_rmse_is_finite() {
    let ds = build_dataset(20, &SimConfig { nside: 8, ..SimConfig::default() }, 6).unwrap();
    let mask = latitude_mask(ds.instances[0].y.resolution(), 30.0).unwrap();
    for inst in ds.split(Split::Test) {
        let w = ilc_weights(&inst.x, None).unwrap();
        let out = ilc_clean(&inst.x, &w).unwrap();
        let r = rmse(out.values(), inst.y.values(), &mask).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
}
