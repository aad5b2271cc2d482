//! HEALPix pixelization in the nested ordering scheme.
//!
//! The 12 base faces are laid out as:
//! - 0..=3: north polar cap
//! - 4..=7: equatorial belt
//! - 8..=11: south polar cap
//!
//! Inside a face a pixel is addressed by `(ix, iy)` with the nested index
//! interleaving the bits of both coordinates, so the four children of pixel
//! `p` at the next finer resolution are `4p..4p+3`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

/// Ring offsets of the base faces (in units of nside).
const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
/// Longitude offsets of the base faces (in units of pi/4).
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

const NB_XOFFSET: [i64; 8] = [-1, -1, 0, 1, 1, 1, 0, -1];
const NB_YOFFSET: [i64; 8] = [0, 1, 1, 1, 0, -1, -1, -1];
const NB_FACEARRAY: [[i64; 12]; 9] = [
    [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9], // S
    [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],     // SE
    [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1], // E
    [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],     // SW
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],       // center
    [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],         // NE
    [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1], // W
    [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],         // NW
    [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],     // N
];
const NB_SWAPARRAY: [[u8; 3]; 9] =
    [[0, 0, 3], [0, 0, 6], [0, 0, 0], [0, 0, 5], [0, 0, 0], [5, 0, 0], [0, 0, 0], [6, 0, 0], [3, 0, 0]];

/// Largest supported nside. Desk-scale work stays far below this.
pub const MAX_NSIDE: u32 = 1 << 13;

/// A HEALPix resolution. `nside` is always a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Resolution {
    nside: u32,
}

impl Resolution {
    pub fn new(nside: u32) -> Result<Self> {
        if nside == 0 || !nside.is_power_of_two() || nside > MAX_NSIDE {
            return Err(Error::InvalidNside(nside as u64));
        }
        Ok(Resolution { nside })
    }

    pub fn nside(&self) -> u32 {
        self.nside
    }

    /// log2(nside).
    pub fn order(&self) -> u32 {
        self.nside.trailing_zeros()
    }

    pub fn n_pixels(&self) -> usize {
        12 * (self.nside as usize) * (self.nside as usize)
    }

    /// Solid angle of one pixel in steradians; identical for every pixel.
    pub fn pixel_area(&self) -> f64 {
        4.0 * PI / self.n_pixels() as f64
    }

    /// The resolution one level up the hierarchy (nside / 2).
    pub fn coarser(&self) -> Option<Resolution> {
        (self.nside > 1).then(|| Resolution { nside: self.nside / 2 })
    }

    pub fn finer(&self) -> Option<Resolution> {
        (self.nside < MAX_NSIDE).then(|| Resolution { nside: self.nside * 2 })
    }

    fn check(&self, pix: usize) -> Result<()> {
        if pix >= self.n_pixels() {
            return Err(Error::PixelOutOfRange { pix, nside: self.nside, n_pixels: self.n_pixels() });
        }
        Ok(())
    }
}

pub fn n_pixels(res: Resolution) -> usize {
    res.n_pixels()
}

/// Pixel ordering. Only the nested scheme is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Nested,
}

/// Per-pixel scalar fields over one or more channels, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyMap {
    resolution: Resolution,
    channels: usize,
    values: Vec<f64>,
}

impl SkyMap {
    pub fn new(resolution: Resolution, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("a sky map needs at least one channel".into()));
        }
        if values.len() != channels * resolution.n_pixels() {
            return Err(Error::shape(
                "SkyMap::new",
                format!("{} values for {} channels x {} pixels", values.len(), channels, resolution.n_pixels()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite map value at index {i}")));
        }
        Ok(SkyMap { resolution, channels, values })
    }

    pub fn zeros(resolution: Resolution, channels: usize) -> Self {
        SkyMap { resolution, channels, values: vec![0.0; channels * resolution.n_pixels()] }
    }

    /// Builds a single-channel map by evaluating `f` at each pixel index.
    pub fn from_fn(resolution: Resolution, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let values = (0..resolution.n_pixels()).map(f).collect();
        SkyMap::new(resolution, 1, values)
    }

    /// Stacks single- or multi-channel maps of the same resolution.
    pub fn stack(maps: &[SkyMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let mut values = Vec::new();
        let mut channels = 0;
        for m in maps {
            if m.resolution != first.resolution {
                return Err(Error::ResolutionMismatch { expected: first.resolution.nside, actual: m.resolution.nside });
            }
            channels += m.channels;
            values.extend_from_slice(&m.values);
        }
        Ok(SkyMap { resolution: first.resolution, channels, values })
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn ordering(&self) -> Ordering {
        Ordering::Nested
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_pixels(&self) -> usize {
        self.resolution.n_pixels()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_pixels();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Copies channel `c` out as its own single-channel map.
    pub fn extract(&self, c: usize) -> SkyMap {
        SkyMap { resolution: self.resolution, channels: 1, values: self.channel(c).to_vec() }
    }

    pub fn require_single_channel(&self, op: &'static str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::shape(op, format!("expected 1 channel, got {}", self.channels)));
        }
        Ok(())
    }
}

/// Per-pixel keep flags. `true` marks a pixel that enters evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    resolution: Resolution,
    keep: Vec<bool>,
}

impl MaskMap {
    pub fn new(resolution: Resolution, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != resolution.n_pixels() {
            return Err(Error::shape(
                "MaskMap::new",
                format!("{} flags for {} pixels", keep.len(), resolution.n_pixels()),
            ));
        }
        Ok(MaskMap { resolution, keep })
    }

    pub fn full(resolution: Resolution) -> Self {
        MaskMap { resolution, keep: vec![true; resolution.n_pixels()] }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sky_fraction(&self) -> f64 {
        self.n_kept() as f64 / self.keep.len() as f64
    }

    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }
}

#[inline]
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0xffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    (x | (x << 1)) & 0x5555_5555_5555_5555
}

#[inline]
fn compress_bits(v: u64) -> u64 {
    let mut x = v & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x >> 4)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x >> 8)) & 0x0000_ffff_0000_ffff;
    (x | (x >> 16)) & 0x0000_0000_ffff_ffff
}

/// Splits a nested index into `(ix, iy, face)`.
pub fn nest_to_xyf(res: Resolution, pix: usize) -> (i64, i64, usize) {
    let npface = (res.nside as u64) * (res.nside as u64);
    let pix = pix as u64;
    let face = (pix / npface) as usize;
    let sub = pix & (npface - 1);
    (compress_bits(sub) as i64, compress_bits(sub >> 1) as i64, face)
}

pub fn xyf_to_nest(res: Resolution, ix: i64, iy: i64, face: usize) -> usize {
    let npface = (res.nside as u64) * (res.nside as u64);
    (face as u64 * npface + spread_bits(ix as u64) + (spread_bits(iy as u64) << 1)) as usize
}

/// Pixel center as `(z = cos θ, φ)` using exact integer ring arithmetic.
fn pix_to_z_phi(res: Resolution, pix: usize) -> (f64, f64) {
    let nside = res.nside as i64;
    let (ix, iy, face) = nest_to_xyf(res, pix);
    let fact2 = 4.0 / res.n_pixels() as f64;
    let fact1 = (2 * nside) as f64 * fact2;
    let jr = JRLL[face] * nside - ix - iy - 1;
    let (nr, z) = if jr < nside {
        (jr, 1.0 - (jr * jr) as f64 * fact2)
    } else if jr > 3 * nside {
        let nr = 4 * nside - jr;
        (nr, (nr * nr) as f64 * fact2 - 1.0)
    } else {
        (nside, (2 * nside - jr) as f64 * fact1)
    };
    let mut tmp = JPLL[face] * nr + ix - iy;
    if tmp < 0 {
        tmp += 8 * nr;
    }
    let phi =
        if nr == nside { 0.75 * FRAC_PI_2 * tmp as f64 * fact1 } else { 0.5 * FRAC_PI_2 * tmp as f64 / nr as f64 };
    (z, phi)
}

/// Colatitude and longitude (radians) of a pixel center.
pub fn pixel_center(res: Resolution, pix: usize) -> Result<(f64, f64)> {
    res.check(pix)?;
    let (z, phi) = pix_to_z_phi(res, pix);
    Ok((z.clamp(-1.0, 1.0).acos(), phi))
}

/// Unit vector of a pixel center.
pub fn pixel_vector(res: Resolution, pix: usize) -> Result<[f64; 3]> {
    res.check(pix)?;
    let (z, phi) = pix_to_z_phi(res, pix);
    Ok(z_phi_to_vec(z, phi))
}

fn z_phi_to_vec(z: f64, phi: f64) -> [f64; 3] {
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Maps continuous face coordinates `(x, y) ∈ [0, 1]²` to `(z, φ)`.
pub fn face_xy_to_z_phi(x: f64, y: f64, face: usize) -> (f64, f64) {
    let jr = JRLL[face] as f64 - x - y;
    let (nr, z) = if jr < 1.0 {
        (jr, 1.0 - jr * jr / 3.0)
    } else if jr > 3.0 {
        let nr = 4.0 - jr;
        (nr, nr * nr / 3.0 - 1.0)
    } else {
        (1.0, (2.0 - jr) * 2.0 / 3.0)
    };
    let mut tmp = JPLL[face] as f64 * nr + x - y;
    if tmp < 0.0 {
        tmp += 8.0;
    }
    if tmp >= 8.0 {
        tmp -= 8.0;
    }
    let phi = if nr < 1e-15 { 0.0 } else { FRAC_PI_4 * tmp / nr };
    (z, phi)
}

/// Unit vectors of the four pixel vertices, counter-clockwise from the
/// `(ix, iy)` corner.
pub fn pixel_corners(res: Resolution, pix: usize) -> Result<[[f64; 3]; 4]> {
    res.check(pix)?;
    let (ix, iy, face) = nest_to_xyf(res, pix);
    let ns = res.nside as f64;
    let corner = |dx: i64, dy: i64| {
        let (z, phi) = face_xy_to_z_phi((ix + dx) as f64 / ns, (iy + dy) as f64 / ns, face);
        z_phi_to_vec(z, phi)
    };
    Ok([corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)])
}

/// Nested parent at the next coarser resolution.
pub fn parent(pix: usize) -> usize {
    pix >> 2
}

/// The four nested children at the next finer resolution.
pub fn children(pix: usize) -> [usize; 4] {
    let b = pix << 2;
    [b, b + 1, b + 2, b + 3]
}

fn neighbors_uncached(res: Resolution, pix: usize) -> Vec<usize> {
    let nside = res.nside as i64;
    let (ix, iy, face) = nest_to_xyf(res, pix);
    let mut out = Vec::with_capacity(8);
    for i in 0..8 {
        let mut x = ix + NB_XOFFSET[i];
        let mut y = iy + NB_YOFFSET[i];
        let mut nbnum = 4i64;
        if x < 0 {
            x += nside;
            nbnum -= 1;
        } else if x >= nside {
            x -= nside;
            nbnum += 1;
        }
        if y < 0 {
            y += nside;
            nbnum -= 3;
        } else if y >= nside {
            y -= nside;
            nbnum += 3;
        }
        let f = NB_FACEARRAY[nbnum as usize][face];
        if f < 0 {
            continue;
        }
        let bits = NB_SWAPARRAY[nbnum as usize][face >> 2];
        if bits & 1 != 0 {
            x = nside - x - 1;
        }
        if bits & 2 != 0 {
            y = nside - y - 1;
        }
        if bits & 4 != 0 {
            std::mem::swap(&mut x, &mut y);
        }
        out.push(xyf_to_nest(res, x, y, f as usize));
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Adjacency lists for every pixel at one resolution, in CSR layout.
#[derive(Debug)]
pub struct NeighborTable {
    resolution: Resolution,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborTable {
    fn build(res: Resolution) -> Self {
        let n = res.n_pixels();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(8 * n);
        offsets.push(0);
        for p in 0..n {
            indices.extend(neighbors_uncached(res, p));
            offsets.push(indices.len());
        }
        NeighborTable { resolution: res, offsets, indices }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn of(&self, pix: usize) -> &[usize] {
        &self.indices[self.offsets[pix]..self.offsets[pix + 1]]
    }

    /// Number of directed adjacency entries (twice the undirected edge count).
    pub fn n_entries(&self) -> usize {
        self.indices.len()
    }
}

/// Shared neighbor table for `res`, built on first use.
pub fn neighbor_table(res: Resolution) -> Arc<NeighborTable> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<NeighborTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard.entry(res.nside).or_insert_with(|| Arc::new(NeighborTable::build(res))).clone()
}

/// Pixels sharing an edge or a vertex with `pix`, sorted ascending.
///
/// For nside >= 2 every pixel has 7 or 8 neighbours. At nside = 1 each of the
/// 12 base pixels touches exactly 6 others.
pub fn neighbors(res: Resolution, pix: usize) -> Result<Vec<usize>> {
    res.check(pix)?;
    Ok(neighbor_table(res).of(pix).to_vec())
}

/// Mask removing the band `|latitude| < cut_deg` around the map equator.
///
/// The band boundary is inclusive on the kept side, so `cut_deg = 0` keeps
/// the whole sky.
pub fn latitude_mask(res: Resolution, cut_deg: f64) -> Result<MaskMap> {
    if !(0.0..90.0).contains(&cut_deg) {
        return Err(Error::InvalidArgument(format!("cut_deg must be in [0, 90), got {cut_deg}")));
    }
    let zcut = cut_deg.to_radians().sin();
    let keep = (0..res.n_pixels()).map(|p| pix_to_z_phi(res, p).0.abs() >= zcut).collect();
    MaskMap::new(res, keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(n: u32) -> Resolution {
        Resolution::new(n).unwrap()
    }

    #[test]
    fn pixel_counts() {
        assert_eq!(n_pixels(res(1)), 12);
        assert_eq!(n_pixels(res(16)), 3072);
        assert_eq!(n_pixels(res(64)), 49152);
        for k in 1..8 {
            assert_eq!(n_pixels(res(1 << k)), 4 * n_pixels(res(1 << (k - 1))));
        }
    }

    #[test]
    fn rejects_bad_nside() {
        for bad in [0, 3, 6, 12, 100] {
            assert!(matches!(Resolution::new(bad), Err(Error::InvalidNside(_))));
        }
    }

    #[test]
    fn base_pixel_rings() {
        let r = res(1);
        let zs: Vec<f64> = (0..12).map(|p| pixel_center(r, p).unwrap().0.cos()).collect();
        for (p, z) in zs.iter().enumerate() {
            let expect = match p {
                0..=3 => 2.0 / 3.0,
                4..=7 => 0.0,
                _ => -2.0 / 3.0,
            };
            assert!((z - expect).abs() < 1e-12, "pix {p}: {z}");
        }
    }

    #[test]
    fn centers_sum_to_zero() {
        let r = res(2);
        let mut s = [0.0; 3];
        for p in 0..r.n_pixels() {
            let v = pixel_vector(r, p).unwrap();
            for k in 0..3 {
                s[k] += v[k];
            }
        }
        for c in s {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_pixel() {
        assert!(matches!(pixel_center(res(1), 12), Err(Error::PixelOutOfRange { .. })));
        assert!(neighbors(res(2), 48).is_err());
    }

    #[test]
    fn hierarchy() {
        assert_eq!(parent(7), 1);
        assert_eq!(parent(0), 0);
        assert_eq!(children(3), [12, 13, 14, 15]);
        for p in 0..48 {
            assert!(children(parent(p)).contains(&p));
        }
    }

    #[test]
    fn continuous_and_integer_centers_agree() {
        for n in [1, 2, 4, 16] {
            let r = res(n);
            for p in 0..r.n_pixels() {
                let (ix, iy, f) = nest_to_xyf(r, p);
                let ns = n as f64;
                let (z, phi) = face_xy_to_z_phi((ix as f64 + 0.5) / ns, (iy as f64 + 0.5) / ns, f);
                let a = z_phi_to_vec(z, phi);
                let b = pixel_vector(r, p).unwrap();
                let d: f64 = (0..3).map(|k| (a[k] - b[k]).abs()).sum();
                assert!(d < 1e-12, "nside {n} pix {p}");
            }
        }
    }

    #[test]
    fn mask_limits() {
        let r = res(16);
        assert_eq!(latitude_mask(r, 0.0).unwrap().n_kept(), r.n_pixels());
        // a ring sits exactly on latitude 30° at nside 16 and is kept: 1536 + 64 pixels
        assert_eq!(latitude_mask(r, 30.0).unwrap().n_kept(), 1600);
        for n in [32, 64] {
            let f = latitude_mask(res(n), 30.0).unwrap().sky_fraction();
            assert!((f - 0.5).abs() <= 0.02, "nside {n}: {f}");
        }
        let polar = latitude_mask(r, 89.9).unwrap();
        for p in polar.kept_indices() {
            let (theta, _) = pixel_center(r, p).unwrap();
            assert!((90.0 - theta.to_degrees()).abs() >= 89.9);
        }
        assert!(latitude_mask(r, 90.0).is_err());
        assert!(latitude_mask(r, -1.0).is_err());
    }
}
