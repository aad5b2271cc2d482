//! Internal linear combination: the unit-sum channel weights of minimum
//! output variance, `w = C⁻¹e / (eᵀC⁻¹e)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::healpix::{MaskMap, SkyMap};

/// Relative ridge added to the covariance when it is badly conditioned.
pub const RIDGE: f64 = 1e-10;
pub const MAX_CONDITION: f64 = 1e12;
const MIN_PIXELS: usize = 10;

/// Empirical channel covariance over the kept pixels, means removed.
pub fn channel_covariance(x: &SkyMap, mask: Option<&MaskMap>) -> Result<DMatrix<f64>> {
    let c = x.channels();
    let pixels: Vec<usize> = match mask {
        Some(m) => {
            if m.resolution() != x.resolution() {
                return Err(Error::ResolutionMismatch {
                    expected: x.resolution().nside(),
                    actual: m.resolution().nside(),
                });
            }
            m.kept_indices().collect()
        }
        None => (0..x.n_pixels()).collect(),
    };
    if pixels.len() < MIN_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "ILC needs at least {MIN_PIXELS} pixels, mask keeps {}",
            pixels.len()
        )));
    }
    let n = pixels.len() as f64;
    let centered: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let row = x.channel(ch);
            let mean = pixels.iter().map(|&p| row[p]).sum::<f64>() / n;
            pixels.iter().map(|&p| row[p] - mean).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(c, c, |i, j| centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / n))
}

/// ILC weights from the (optionally masked) channel covariance.
pub fn ilc_weights(x: &SkyMap, mask: Option<&MaskMap>) -> Result<Vec<f64>> {
    let c = x.channels();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("ILC needs at least 2 channels, got {c}")));
    }
    let mut cov = channel_covariance(x, mask)?;
    let sv = cov.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0 && smax / smin <= MAX_CONDITION) {
        let ridge = RIDGE * cov.trace() / c as f64;
        for i in 0..c {
            cov[(i, i)] += ridge;
        }
    }
    let chol = cov.cholesky().ok_or_else(|| Error::Singular("channel covariance is not positive definite".into()))?;
    let ones = DVector::from_element(c, 1.0);
    let u = chol.solve(&ones);
    let total = u.sum();
    if !(total.is_finite() && total != 0.0) {
        return Err(Error::Singular(format!("eᵀC⁻¹e = {total}")));
    }
    let mut w: Vec<f64> = u.iter().map(|v| v / total).collect();
    // renormalize so the sum is one to rounding
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    Ok(w)
}

/// `Σ_i w_i x_i` per pixel.
pub fn ilc_clean(x: &SkyMap, w: &[f64]) -> Result<SkyMap> {
    if w.len() != x.channels() {
        return Err(Error::shape("ilc_clean", format!("{} weights for {} channels", w.len(), x.channels())));
    }
    let mut out = vec![0.0; x.n_pixels()];
    for (c, &wc) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(x.channel(c)) {
            *o += wc * v;
        }
    }
    SkyMap::new(x.resolution(), 1, out)
}

/// Variance of the combined map over the kept pixels.
pub fn output_variance(x: &SkyMap, w: &[f64], mask: Option<&MaskMap>) -> Result<f64> {
    let cov = channel_covariance(x, mask)?;
    let w = DVector::from_column_slice(w);
    Ok((w.transpose() * cov * &w)[(0, 0)])
}
