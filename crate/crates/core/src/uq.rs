//! Monte Carlo dropout prediction and the evaluation metrics: RMSE, Pearson
//! correlation, coverage of the predicted uncertainty, and pseudo-`C_ℓ`
//! comparisons.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harmonics::masked_spectrum;
use crate::healpix::{MaskMap, SkyMap};
use crate::layers::{MaskMode, NormMode};
use crate::rng::{label, stream};
use crate::unet::UNet;

/// Per-pixel predictive moments from `T` stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct UqResult {
    pub mean: Vec<f64>,
    /// Variance of the sampled means (divided by `T`).
    pub epistemic: Vec<f64>,
    /// Mean of the sampled `σ̂²`.
    pub aleatoric: Vec<f64>,
    pub total: Vec<f64>,
    pub samples: usize,
}

impl UqResult {
    /// Reduces `(ŷ_t, σ̂²_t)` samples in order. Samples without a variance
    /// head contribute zero aleatoric variance.
    pub fn from_samples(samples: &[(Vec<f64>, Option<Vec<f64>>)]) -> Result<Self> {
        let t = samples.len();
        if t < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 Monte Carlo samples, got {t}")));
        }
        let n = samples[0].0.len();
        if samples.iter().any(|(m, v)| m.len() != n || v.as_ref().is_some_and(|v| v.len() != n)) {
            return Err(Error::shape("mc samples", "samples differ in length"));
        }
        // Welford accumulation: the variance is exactly translation invariant
        // up to rounding and never relies on cancellation of large moments
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let mut alea = vec![0.0; n];
        for (k, (m, v)) in samples.iter().enumerate() {
            let kf = (k + 1) as f64;
            for p in 0..n {
                let d = m[p] - mean[p];
                mean[p] += d / kf;
                m2[p] += d * (m[p] - mean[p]);
            }
            if let Some(v) = v {
                for (a, s) in alea.iter_mut().zip(v) {
                    *a += s;
                }
            }
        }
        let tf = t as f64;
        let epistemic: Vec<f64> = m2.iter().map(|v| (v / tf).max(0.0)).collect();
        let aleatoric: Vec<f64> = alea.iter().map(|a| a / tf).collect();
        let total = epistemic.iter().zip(&aleatoric).map(|(e, a)| e + a).collect();
        Ok(UqResult { mean, epistemic, aleatoric, total, samples: t })
    }

    /// `√total`, the reported per-pixel uncertainty.
    pub fn std(&self) -> Vec<f64> {
        self.total.iter().map(|v| v.sqrt()).collect()
    }
}

/// `T` forward passes of a frozen network on one normalized input
/// `(1, C, N)`, batch norm in inference mode and fresh dropout masks per
/// pass drawn from `(seed, t)` streams.
pub fn mc_predict(model: &UNet, x: &Tensor, samples: usize, seed: u64) -> Result<UqResult> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 Monte Carlo samples, got {samples}")));
    }
    if x.batch() != 1 {
        return Err(Error::shape("mc_predict", format!("one input at a time, got batch {}", x.batch())));
    }
    let mut draws = Vec::with_capacity(samples);
    for t in 0..samples {
        let mut rng = stream(seed, &[label::MC, t as u64]);
        let (m, s) = model.predict(x, NormMode::Eval, &mut MaskMode::Sample(&mut rng))?;
        let var = s.map(|s| s.data().iter().map(|v| v.exp()).collect());
        draws.push((m.into_data(), var));
    }
    UqResult::from_samples(&draws)
}

fn kept_pairs<'a>(a: &'a [f64], b: &'a [f64], mask: &'a MaskMap) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if a.len() != b.len() || a.len() != mask.keep().len() {
        return Err(Error::shape("metric", format!("lengths {}, {} and mask {}", a.len(), b.len(), mask.keep().len())));
    }
    if mask.n_kept() == 0 {
        return Err(Error::InvalidArgument("mask keeps no pixels".into()));
    }
    Ok(mask.kept_indices().map(move |p| (a[p], b[p])))
}

/// Root mean square of `pred - truth` over the kept pixels.
pub fn rmse(pred: &[f64], truth: &[f64], mask: &MaskMap) -> Result<f64> {
    let s: f64 = kept_pairs(pred, truth, mask)?.map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / mask.n_kept() as f64).sqrt())
}

/// Pearson correlation of `(x, y)` pairs.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 pixels".into()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::InvalidArgument("correlation undefined: a map has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson_r(pred: &[f64], truth: &[f64], mask: &MaskMap) -> Result<f64> {
    pearson(&kept_pairs(pred, truth, mask)?.collect::<Vec<_>>())
}

/// Share of kept pixels whose truth falls within `k·σ` of the mean, for
/// `k = 1, 2, 3`, plus the correlation of `|error|` with `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub coverage: [f64; 3],
    pub error_sigma_correlation: f64,
}

/// Coverage over pooled `(mean, total variance, truth)` triples.
pub fn calibration_pooled(triples: &[(f64, f64, f64)]) -> Result<Calibration> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no pixels to calibrate".into()));
    }
    if let Some(t) = triples.iter().find(|t| !(t.1 > 0.0)) {
        return Err(Error::InvalidArgument(format!("total variance must be positive, got {}", t.1)));
    }
    let mut hits = [0usize; 3];
    let mut pairs = Vec::with_capacity(triples.len());
    for &(m, v, y) in triples {
        let err = (y - m).abs();
        let sd = v.sqrt();
        for (k, h) in hits.iter_mut().enumerate() {
            if err <= (k + 1) as f64 * sd {
                *h += 1;
            }
        }
        pairs.push((err, sd));
    }
    let n = triples.len() as f64;
    // constant σ or exact predictions leave the correlation undefined
    let error_sigma_correlation = pearson(&pairs).unwrap_or(0.0);
    Ok(Calibration { coverage: hits.map(|h| h as f64 / n), error_sigma_correlation })
}

pub fn calibration(uq: &UqResult, truth: &[f64], mask: &MaskMap) -> Result<Calibration> {
    if uq.total.len() != truth.len() {
        return Err(Error::shape("calibration", "truth length differs from prediction"));
    }
    let triples: Vec<_> =
        kept_pairs(&uq.mean, truth, mask)?.zip(mask.kept_indices()).map(|((m, y), p)| (m, uq.total[p], y)).collect();
    calibration_pooled(&triples)
}

/// Mean pseudo-spectra over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub ell: Vec<usize>,
    pub truth: Vec<f64>,
    pub cnn: Vec<f64>,
    pub ilc: Vec<f64>,
    pub diff_cnn: Vec<f64>,
    pub diff_ilc: Vec<f64>,
}

fn diff(a: &SkyMap, b: &SkyMap) -> Result<SkyMap> {
    if a.resolution() != b.resolution() || a.channels() != b.channels() {
        return Err(Error::shape("difference map", "maps differ in shape"));
    }
    SkyMap::new(a.resolution(), a.channels(), a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect())
}

pub fn spectral_report(
    cnn: &[SkyMap],
    truth: &[SkyMap],
    ilc: &[SkyMap],
    mask: &MaskMap,
    lmax: usize,
) -> Result<SpectralReport> {
    if cnn.len() != truth.len() || ilc.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "misaligned sets: {} CNN, {} truth, {} ILC maps",
            cnn.len(),
            truth.len(),
            ilc.len()
        )));
    }
    let mut acc = vec![vec![0.0; lmax + 1]; 5];
    for ((c, t), i) in cnn.iter().zip(truth).zip(ilc) {
        let maps = [t.clone(), c.clone(), i.clone(), diff(c, t)?, diff(i, t)?];
        for (a, m) in acc.iter_mut().zip(&maps) {
            for (x, v) in a.iter_mut().zip(masked_spectrum(m, mask, lmax)?.cl()) {
                *x += v;
            }
        }
    }
    let n = truth.len() as f64;
    let mut it = acc.into_iter().map(|a| a.into_iter().map(|v| v / n).collect::<Vec<f64>>());
    let mut next = || it.next().expect("five spectra");
    Ok(SpectralReport {
        ell: (0..=lmax).collect(),
        truth: next(),
        cnn: next(),
        ilc: next(),
        diff_cnn: next(),
        diff_ilc: next(),
    })
}

impl SpectralReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), std::io::Error::other(e)))?;
        let io = |e: csv::Error| Error::io(format!("writing {}", path.display()), std::io::Error::other(e));
        w.write_record(["ell", "truth", "cnn", "ilc", "diff_cnn", "diff_ilc"]).map_err(io)?;
        for (i, l) in self.ell.iter().enumerate() {
            let row = [self.truth[i], self.cnn[i], self.ilc[i], self.diff_cnn[i], self.diff_ilc[i]];
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
