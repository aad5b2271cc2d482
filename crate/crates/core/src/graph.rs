//! Weighted pixel graph on the sphere, its combinatorial Laplacian and
//! Chebyshev polynomial filtering.
//!
//! Rows are stored as fixed-order neighbour lists (at most 8 entries), so every
//! matrix-vector product sums in the same order and is bitwise reproducible.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::healpix::{neighbor_table, pixel_vector, Resolution, SkyMap};

/// How edge weights are derived from pixel-centre distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeighting {
    /// `w = exp(-d² / (2 d̄²))` with `d̄` the mean neighbour distance.
    #[default]
    Gaussian,
    /// Every neighbour pair gets weight 1.
    Unweighted,
}

#[derive(Debug, Clone)]
pub struct SphereGraph {
    resolution: Resolution,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    /// Neighbour lists padded to [`MAX_DEGREE`] with zero-weight self
    /// entries, so the operator's inner loop has a fixed trip count.
    padded_cols: Vec<[u32; MAX_DEGREE]>,
    padded_weights: Vec<[f64; MAX_DEGREE]>,
}

/// Largest neighbour count on a HEALPix grid.
pub const MAX_DEGREE: usize = 8;

fn great_circle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    sin.atan2(cos)
}

/// Graph with Gaussian edge weights over HEALPix neighbours.
pub fn build_graph(res: Resolution) -> SphereGraph {
    build_graph_with(res, EdgeWeighting::Gaussian)
}

pub fn build_graph_with(res: Resolution, weighting: EdgeWeighting) -> SphereGraph {
    let table = neighbor_table(res);
    let n = res.n_pixels();
    let centres: Vec<[f64; 3]> = (0..n).map(|p| pixel_vector(res, p).expect("pixel in range")).collect();

    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(table.n_entries());
    let mut dist = Vec::with_capacity(table.n_entries());
    offsets.push(0);
    for (p, &cp) in centres.iter().enumerate() {
        for &q in table.of(p) {
            cols.push(q);
            dist.push(great_circle(cp, centres[q]));
        }
        offsets.push(cols.len());
    }

    let weights: Vec<f64> = match weighting {
        EdgeWeighting::Unweighted => vec![1.0; dist.len()],
        EdgeWeighting::Gaussian => {
            let mean = dist.iter().sum::<f64>() / dist.len() as f64;
            let two_var = 2.0 * mean * mean;
            dist.iter().map(|d| (-d * d / two_var).exp()).collect()
        }
    };
    let degrees = (0..n).map(|p| weights[offsets[p]..offsets[p + 1]].iter().sum()).collect();
    let mut padded_cols = vec![[0u32; MAX_DEGREE]; n];
    let mut padded_weights = vec![[0.0; MAX_DEGREE]; n];
    for p in 0..n {
        let r = offsets[p]..offsets[p + 1];
        assert!(r.len() <= MAX_DEGREE, "pixel {p} has {} neighbours", r.len());
        padded_cols[p] = [p as u32; MAX_DEGREE];
        for (k, e) in r.enumerate() {
            padded_cols[p][k] = cols[e] as u32;
            padded_weights[p][k] = weights[e];
        }
    }
    SphereGraph { resolution: res, offsets, cols, weights, degrees, padded_cols, padded_weights }
}

impl SphereGraph {
    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn n_nodes(&self) -> usize {
        self.degrees.len()
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.cols.len() / 2
    }

    /// Neighbours of `i` and the matching weights, in storage order.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.weights[r])
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// `(L x)_i`. Padding slots contribute `0·x_i`.
    #[inline]
    fn row_product(&self, i: usize, x: &[f64]) -> f64 {
        let mut acc = self.degrees[i] * x[i];
        for (&j, &w) in self.padded_cols[i].iter().zip(&self.padded_weights[i]) {
            acc -= w * x[j as usize];
        }
        acc
    }

    /// `w_ij`, zero for non-adjacent pairs.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (cols, w) = self.row(i);
        cols.iter().position(|&c| c == j).map_or(0.0, |k| w[k])
    }

    /// Row-major dense weight matrix. Only sensible for tiny graphs.
    pub fn dense_weights(&self) -> Vec<f64> {
        let n = self.n_nodes();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let (cols, w) = self.row(i);
            for (&j, &wij) in cols.iter().zip(w) {
                out[i * n + j] = wij;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaplacianForm {
    /// `L = D - A`.
    Combinatorial,
    /// `L̂ = 2L/λ_max - I`.
    NormalizedScaled { lambda_max: f64 },
}

/// Laplacian applied matrix-free by traversing the neighbour lists.
#[derive(Debug, Clone)]
pub struct LaplacianOperator {
    graph: Arc<SphereGraph>,
    form: LaplacianForm,
}

pub fn laplacian(graph: SphereGraph) -> LaplacianOperator {
    LaplacianOperator { graph: Arc::new(graph), form: LaplacianForm::Combinatorial }
}

impl LaplacianOperator {
    pub fn graph(&self) -> &SphereGraph {
        &self.graph
    }

    pub fn form(&self) -> LaplacianForm {
        self.form
    }

    pub fn resolution(&self) -> Resolution {
        self.graph.resolution
    }

    pub fn n(&self) -> usize {
        self.graph.n_nodes()
    }

    /// `lambda_max` used for scaling, if this is the normalized form.
    pub fn lambda_max(&self) -> Option<f64> {
        match self.form {
            LaplacianForm::Combinatorial => None,
            LaplacianForm::NormalizedScaled { lambda_max } => Some(lambda_max),
        }
    }

    /// `out = L x` for one signal of length `n`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let g = &*self.graph;
        debug_assert_eq!(x.len(), g.n_nodes());
        debug_assert_eq!(out.len(), g.n_nodes());
        match self.form {
            LaplacianForm::Combinatorial => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = g.row_product(i, x);
                }
            }
            LaplacianForm::NormalizedScaled { lambda_max } => {
                let s = 2.0 / lambda_max;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = s * g.row_product(i, x) - x[i];
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::shape("laplacian apply", format!("signal length {} vs {} nodes", x.len(), self.n())));
        }
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        Ok(out)
    }

    /// Applies the operator to each consecutive length-`n` row of `x`.
    pub fn apply_rows(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n();
        for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            self.apply_into(xr, or);
        }
    }

    /// Row-major dense matrix of this operator.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            e[j] = 0.0;
            for i in 0..n {
                out[i * n + j] = col[i];
            }
        }
        out
    }
}

pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

/// Relative inflation applied to the power-iteration estimate before scaling.
pub const LAMBDA_MARGIN: f64 = 0.01;

/// Largest eigenvalue of a combinatorial Laplacian by power iteration.
///
/// Returns the final Rayleigh quotient, which never exceeds the true value.
/// Iteration stops once the quotient changes by less than `tol` (relative).
pub fn estimate_lambda_max(l: &LaplacianOperator, tol: f64) -> Result<f64> {
    estimate_lambda_max_with(l, tol, DEFAULT_MAX_ITERATIONS)
}

pub fn estimate_lambda_max_with(l: &LaplacianOperator, tol: f64, max_iterations: usize) -> Result<f64> {
    if l.form != LaplacianForm::Combinatorial {
        return Err(Error::InvalidArgument("power iteration expects the combinatorial Laplacian".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }
    let n = l.n();
    // Deterministic start vector with no special symmetry, projected off the
    // constant null vector.
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            // splitmix64 finalizer
            let mut h = (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            h ^= h >> 31;
            ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
        .collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut w = vec![0.0; n];
    let mut rho_prev = f64::NAN;
    for _ in 0..max_iterations {
        l.apply_into(&v, &mut w);
        let rho: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("Laplacian annihilates the start vector".into()));
        }
        if rho_prev.is_finite() && ((rho - rho_prev) / rho).abs() < tol {
            return Ok(rho);
        }
        rho_prev = rho;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    Err(Error::NoConvergence { iterations: max_iterations })
}

/// `L̂ = (2/λ_max)·L - I`, applied lazily.
pub fn normalize(l: &LaplacianOperator, lambda_max: f64) -> Result<LaplacianOperator> {
    if l.form != LaplacianForm::Combinatorial {
        return Err(Error::InvalidArgument("normalize expects the combinatorial Laplacian".into()));
    }
    if !(lambda_max.is_finite() && lambda_max > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_max must be > 0, got {lambda_max}")));
    }
    Ok(LaplacianOperator { graph: Arc::clone(&l.graph), form: LaplacianForm::NormalizedScaled { lambda_max } })
}

// Well inside LAMBDA_MARGIN: at nside 64 this lands within 0.1% of the converged value.
const CACHE_TOL: f64 = 1e-6;

/// Scaled Laplacian for a resolution (Gaussian weights, `λ̂·(1 + margin)`),
/// built once per process and shared.
pub fn scaled_laplacian(res: Resolution) -> Result<Arc<LaplacianOperator>> {
    scaled_laplacian_with(res, EdgeWeighting::Gaussian)
}

type LaplacianCache = Mutex<HashMap<(u32, EdgeWeighting), Arc<LaplacianOperator>>>;

pub fn scaled_laplacian_with(res: Resolution, weighting: EdgeWeighting) -> Result<Arc<LaplacianOperator>> {
    static CACHE: OnceLock<LaplacianCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (res.nside(), weighting);
    if let Some(op) = cache.lock().expect("laplacian cache poisoned").get(&key) {
        return Ok(Arc::clone(op));
    }
    let l = laplacian(build_graph_with(res, weighting));
    let lambda = estimate_lambda_max(&l, CACHE_TOL)?;
    let op = Arc::new(normalize(&l, lambda * (1.0 + LAMBDA_MARGIN))?);
    cache.lock().expect("laplacian cache poisoned").insert(key, Arc::clone(&op));
    Ok(op)
}

/// Filter coefficients `θ_0..θ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebCoeffs {
    theta: Vec<f64>,
}

impl ChebCoeffs {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("Chebyshev filter needs at least one coefficient".into()));
        }
        Ok(ChebCoeffs { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

/// Chebyshev basis `[T_0(L̂)x, …, T_K(L̂)x]` for `rows` stacked signals.
///
/// `x` holds `rows` consecutive signals of length `n`; the result holds `K+1`
/// blocks of the same layout, block `k` being `T_k(L̂)` applied to every row.
pub fn chebyshev_basis(lhat: &LaplacianOperator, order: usize, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut out = vec![0.0; (order + 1) * m];
    out[..m].copy_from_slice(x);
    if order >= 1 {
        let (t0, rest) = out.split_at_mut(m);
        lhat.apply_rows(t0, &mut rest[..m]);
    }
    for k in 2..=order {
        let (done, rest) = out.split_at_mut(k * m);
        let tk = &mut rest[..m];
        lhat.apply_rows(&done[(k - 1) * m..k * m], tk);
        let tkm2 = &done[(k - 2) * m..(k - 1) * m];
        for (t, p) in tk.iter_mut().zip(tkm2) {
            *t = 2.0 * *t - p;
        }
    }
    out
}

/// `Σ_k θ_k T_k(L̂) f`, channel by channel.
pub fn cheb_apply(lhat: &LaplacianOperator, coeffs: &ChebCoeffs, f: &SkyMap) -> Result<SkyMap> {
    if lhat.lambda_max().is_none() {
        return Err(Error::InvalidArgument("cheb_apply needs the normalized Laplacian".into()));
    }
    if f.resolution() != lhat.resolution() {
        return Err(Error::ResolutionMismatch { expected: lhat.resolution().nside(), actual: f.resolution().nside() });
    }
    // streams the recurrence through three buffers instead of holding every T_k f
    let theta = &coeffs.theta;
    let prev2 = f.values();
    let mut out: Vec<f64> = prev2.iter().map(|v| theta[0] * v).collect();
    if theta.len() > 1 {
        let m = prev2.len();
        let mut prev2 = prev2.to_vec();
        let mut prev = vec![0.0; m];
        lhat.apply_rows(&prev2, &mut prev);
        let mut next = vec![0.0; m];
        for (o, t) in out.iter_mut().zip(&prev) {
            *o += theta[1] * t;
        }
        for &th in &theta[2..] {
            lhat.apply_rows(&prev, &mut next);
            for ((n, p2), o) in next.iter_mut().zip(&prev2).zip(out.iter_mut()) {
                *n = 2.0 * *n - p2;
                *o += th * *n;
            }
            std::mem::swap(&mut prev2, &mut prev);
            std::mem::swap(&mut prev, &mut next);
        }
    }
    SkyMap::new(f.resolution(), f.channels(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(n: u32) -> Resolution {
        Resolution::new(n).unwrap()
    }

    #[test]
    fn weights_symmetric_and_in_unit_interval() {
        let g = build_graph(res(2));
        let n = g.n_nodes();
        let w = g.dense_weights();
        for i in 0..n {
            assert_eq!(w[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(w[i * n + j], w[j * n + i]);
                let v = w[i * n + j];
                assert!(v == 0.0 || (v > 0.0 && v < 1.0));
            }
        }
        let total: usize = (0..n).map(|p| g.row(p).0.len()).sum();
        assert_eq!(g.n_edges(), total / 2);
        assert_eq!(g.n_edges(), (24 * 7 + 24 * 8) / 2);
    }

    #[test]
    fn degrees_recomputable() {
        let g = build_graph(res(4));
        for i in 0..g.n_nodes() {
            assert_eq!(g.degrees()[i], g.row(i).1.iter().sum::<f64>());
        }
    }

    #[test]
    fn laplacian_kills_constants() {
        let l = laplacian(build_graph(res(8)));
        let out = l.apply(&vec![3.5; l.n()]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn normalized_maps_constant_to_minus_constant() {
        let l = laplacian(build_graph(res(4)));
        let lam = estimate_lambda_max(&l, 1e-10).unwrap();
        let max_deg = l.graph().degrees().iter().cloned().fold(0.0, f64::max);
        assert!(lam > 0.0 && lam <= 2.0 * max_deg);
        let lhat = normalize(&l, lam).unwrap();
        let out = lhat.apply(&vec![2.0; l.n()]).unwrap();
        assert!(out.iter().all(|v| (v + 2.0).abs() < 1e-12));
        assert!(normalize(&l, 0.0).is_err());
        assert!(normalize(&lhat, 1.0).is_err());
    }

    #[test]
    fn doubling_lambda_halves_spread() {
        let l = laplacian(build_graph(res(2)));
        let x: Vec<f64> = (0..l.n()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = normalize(&l, 3.0).unwrap().apply(&x).unwrap();
        let b = normalize(&l, 6.0).unwrap().apply(&x).unwrap();
        for i in 0..x.len() {
            // (2/λ)Lx - x: the L part halves
            assert!(((b[i] + x[i]) - 0.5 * (a[i] + x[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn cheb_degenerate_cases() {
        let lhat = scaled_laplacian(res(2)).unwrap();
        let f = SkyMap::from_fn(res(2), |p| (p as f64).cos()).unwrap();
        let out = cheb_apply(&lhat, &ChebCoeffs::new(vec![2.5]).unwrap(), &f).unwrap();
        assert!(out.values().iter().zip(f.values()).all(|(o, x)| *o == 2.5 * x));
        let out = cheb_apply(&lhat, &ChebCoeffs::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap(), &f).unwrap();
        assert_eq!(out.values(), lhat.apply(f.values()).unwrap().as_slice());
        let padded = cheb_apply(&lhat, &ChebCoeffs::new(vec![0.3, -0.2, 0.0]).unwrap(), &f).unwrap();
        let short = cheb_apply(&lhat, &ChebCoeffs::new(vec![0.3, -0.2]).unwrap(), &f).unwrap();
        assert_eq!(padded.values(), short.values());
    }

    #[test]
    fn constant_map_eigenvector() {
        let lhat = scaled_laplacian(res(4)).unwrap();
        let theta = vec![0.4, -1.1, 0.7, 0.25];
        let f = SkyMap::from_fn(res(4), |_| 1.5).unwrap();
        let out = cheb_apply(&lhat, &ChebCoeffs::new(theta.clone()).unwrap(), &f).unwrap();
        // T_k(-1) = (-1)^k
        let expect = 1.5 * theta.iter().enumerate().map(|(k, t)| if k % 2 == 0 { *t } else { -t }).sum::<f64>();
        assert!(out.values().iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn rejects_combinatorial_filtering() {
        let l = laplacian(build_graph(res(1)));
        let f = SkyMap::zeros(res(1), 1);
        assert!(cheb_apply(&l, &ChebCoeffs::new(vec![1.0]).unwrap(), &f).is_err());
        assert!(ChebCoeffs::new(vec![]).is_err());
    }
}
