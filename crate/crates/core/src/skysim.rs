//! Synthetic multi-frequency skies: beam-smoothed CMB plus a galactic-plane
//! foreground plus spatially modulated white noise, in nine bands.
//!
//! All maps are in μK. Each instance draws its own CMB, noise and
//! foreground modulation from streams keyed by the dataset seed and the
//! instance id, so any instance can be regenerated in isolation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harmonics::{apply_beam, sample_alm, synthesize, Beam, PowerSpectrum};
use crate::healpix::{pixel_center, Resolution, SkyMap};
use crate::hmap::{self, MapFile};
use crate::rng::{derive_seed, label, stream};

pub const UNITS: &str = "uK";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const N_BANDS: usize = 9;
pub const FREQUENCIES_GHZ: [f64; N_BANDS] = [30.0, 44.0, 70.0, 100.0, 143.0, 217.0, 353.0, 545.0, 857.0];
/// Per-pixel white-noise level of each band, lowest near 143 GHz.
pub const DEFAULT_NOISE_SIGMA: [f64; N_BANDS] = [55.0, 45.0, 35.0, 22.5, 17.5, 22.5, 45.0, 150.0, 500.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub freq_ghz: f64,
    /// Noise standard deviation per pixel before modulation (μK).
    pub noise_sigma: f64,
}

pub fn default_bands() -> Vec<BandSpec> {
    FREQUENCIES_GHZ
        .iter()
        .zip(DEFAULT_NOISE_SIGMA)
        .map(|(&freq_ghz, noise_sigma)| BandSpec { freq_ghz, noise_sigma })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForegroundConfig {
    /// Peak amplitude on the equator at the pivot frequency (μK).
    pub amplitude: f64,
    /// Latitude width `w` of the `exp(-(|90° - θ|/w)²)` profile, degrees.
    pub width_deg: f64,
    pub spectral_index: f64,
    pub pivot_ghz: f64,
    /// Highest multipole of the fixed large-scale pattern.
    pub pattern_lmax: usize,
    /// Log-amplitude standard deviation of the fixed pattern.
    pub pattern_strength: f64,
    /// Relative amplitude of the per-instance multiplicative modulation.
    pub instance_modulation: f64,
    /// Optional `.hmap` with one channel per band replacing the synthetic
    /// template.
    pub template_file: Option<PathBuf>,
}

impl Default for ForegroundConfig {
    fn default() -> Self {
        ForegroundConfig {
            amplitude: 300.0,
            width_deg: 15.0,
            spectral_index: 2.0,
            pivot_ghz: 100.0,
            pattern_lmax: 6,
            pattern_strength: 0.5,
            instance_modulation: 0.1,
            template_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub nside: u32,
    /// Band limit of the simulated CMB; `None` means `3·nside - 1`.
    pub lmax: Option<usize>,
    pub beam_fwhm_arcmin: f64,
    /// CSV `ell,C_ell` theory spectrum; `None` uses the built-in plateau.
    pub spectrum_file: Option<PathBuf>,
    pub bands: Vec<BandSpec>,
    pub foreground: ForegroundConfig,
    /// Noise modulation `m(θ) = 1 + a·|cos θ|`; this is `a`.
    pub noise_modulation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nside: 64,
            lmax: None,
            beam_fwhm_arcmin: 150.0,
            spectrum_file: None,
            bands: default_bands(),
            foreground: ForegroundConfig::default(),
            noise_modulation: 0.5,
        }
    }
}

impl SimConfig {
    pub fn resolution(&self) -> Result<Resolution> {
        Resolution::new(self.nside)
    }

    pub fn cmb_lmax(&self) -> usize {
        self.lmax.unwrap_or(3 * self.nside as usize - 1)
    }

    pub fn spectrum(&self) -> Result<PowerSpectrum> {
        let lmax = self.cmb_lmax();
        match &self.spectrum_file {
            Some(p) => PowerSpectrum::from_csv(p)?.truncated(lmax),
            None => Ok(PowerSpectrum::placeholder(lmax)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution()?;
        if self.bands.len() != N_BANDS {
            return Err(Error::Config(format!("expected {N_BANDS} bands, got {}", self.bands.len())));
        }
        if self.bands.windows(2).any(|w| w[0].freq_ghz >= w[1].freq_ghz) {
            return Err(Error::Config("bands must be in ascending frequency order".into()));
        }
        if self.bands.iter().any(|b| !(b.noise_sigma >= 0.0 && b.freq_ghz > 0.0)) {
            return Err(Error::Config("band frequencies must be positive and noise levels non-negative".into()));
        }
        if !(self.noise_modulation >= 0.0) {
            return Err(Error::Config("noise modulation amplitude must be non-negative".into()));
        }
        let f = &self.foreground;
        if !(f.width_deg > 0.0 && f.pivot_ghz > 0.0 && f.pattern_strength >= 0.0 && f.instance_modulation >= 0.0) {
            return Err(Error::Config("foreground width, pivot and modulation settings are out of range".into()));
        }
        Beam::new(self.beam_fwhm_arcmin)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the config, count and seed.
    pub fn hash(&self, n: usize, seed: u64) -> Result<String> {
        let bytes = serde_json::to_vec(&(self, n, seed))?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Beam-smoothed Gaussian CMB realization.
pub fn simulate_cmb<R: Rng + ?Sized>(
    spec: &PowerSpectrum,
    res: Resolution,
    beam: &Beam,
    rng: &mut R,
) -> Result<SkyMap> {
    synthesize(&apply_beam(&sample_alm(spec, rng), beam), res)
}

/// Equatorial concentration `exp(-(|90° - θ|/w)²)` at colatitude `theta`
/// (radians).
pub fn plane_profile(theta: f64, width_deg: f64) -> f64 {
    let d = (90.0 - theta.to_degrees()).abs() / width_deg;
    (-d * d).exp()
}

/// `(ν/ν₀)^β`.
pub fn spectral_scaling(freq_ghz: f64, cfg: &ForegroundConfig) -> f64 {
    (freq_ghz / cfg.pivot_ghz).powf(cfg.spectral_index)
}

/// Zero-mean, unit-variance random field with power only in `1..=lmax`.
fn large_scale_field<R: Rng + ?Sized>(res: Resolution, lmax: usize, rng: &mut R) -> Result<SkyMap> {
    let lmax = lmax.min(3 * res.nside() as usize - 1).max(1);
    let cl = (0..=lmax).map(|l| if l == 0 { 0.0 } else { 1.0 }).collect();
    let mut map = synthesize(&sample_alm(&PowerSpectrum::new(cl)?, rng), res)?;
    let n = map.n_pixels() as f64;
    let mean = map.values().iter().sum::<f64>() / n;
    let sd = (map.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in map.channel_mut(0) {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
    Ok(map)
}

/// Fixed per-dataset foreground, one single-channel map per band:
/// `a·profile(θ)·exp(s·G(θ, φ))·(ν/ν₀)^β` with `G` a fixed large-scale field.
pub fn synth_foreground<R: Rng + ?Sized>(
    bands: &[BandSpec],
    res: Resolution,
    cfg: &ForegroundConfig,
    rng: &mut R,
) -> Result<Vec<SkyMap>> {
    let pattern = large_scale_field(res, cfg.pattern_lmax, rng)?;
    let mut template = Vec::with_capacity(res.n_pixels());
    for (p, g) in pattern.values().iter().enumerate() {
        let (theta, _) = pixel_center(res, p)?;
        template.push(cfg.amplitude * plane_profile(theta, cfg.width_deg) * (cfg.pattern_strength * g).exp());
    }
    bands
        .iter()
        .map(|b| {
            let s = spectral_scaling(b.freq_ghz, cfg);
            SkyMap::new(res, 1, template.iter().map(|t| t * s).collect())
        })
        .collect()
}

/// Default noise modulation `1 + a·|cos θ|`.
pub fn noise_modulation(res: Resolution, amplitude: f64) -> Result<SkyMap> {
    let mut values = Vec::with_capacity(res.n_pixels());
    for p in 0..res.n_pixels() {
        values.push(1.0 + amplitude * pixel_center(res, p)?.0.cos().abs());
    }
    SkyMap::new(res, 1, values)
}

/// `σ·m(p)·z_p` with i.i.d. standard normal `z_p`.
pub fn noise_realization<R: Rng + ?Sized>(band: &BandSpec, modulation: &SkyMap, rng: &mut R) -> Result<SkyMap> {
    modulation.require_single_channel("noise_realization")?;
    if let Some(m) = modulation.values().iter().find(|m| !(**m > 0.0)) {
        return Err(Error::InvalidArgument(format!("noise modulation must be strictly positive, found {m}")));
    }
    let values =
        modulation.values().iter().map(|m| band.noise_sigma * m * rng.sample::<f64, _>(StandardNormal)).collect();
    SkyMap::new(modulation.resolution(), 1, values)
}

/// Everything an instance is built from, for regeneration checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub cmb: SkyMap,
    /// Per-band foreground after the instance modulation.
    pub foreground: Vec<SkyMap>,
    pub noise: Vec<SkyMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    /// Nine-channel observation (μK).
    pub x: SkyMap,
    /// Beam-smoothed CMB target (μK).
    pub y: SkyMap,
}

/// Shared state for generating the instances of one dataset.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    seed: u64,
    res: Resolution,
    spectrum: PowerSpectrum,
    beam: Beam,
    foreground: Vec<SkyMap>,
    modulation: SkyMap,
}

impl Simulator {
    pub fn new(config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let res = config.resolution()?;
        let spectrum = config.spectrum()?;
        let beam = Beam::new(config.beam_fwhm_arcmin)?;
        let foreground = match &config.foreground.template_file {
            Some(path) => {
                let f = hmap::load(path)?;
                if f.map.resolution() != res || f.map.channels() != N_BANDS {
                    return Err(Error::Config(format!(
                        "foreground file {} must hold {N_BANDS} channels at nside {}",
                        path.display(),
                        res.nside()
                    )));
                }
                (0..N_BANDS).map(|c| f.map.extract(c)).collect()
            }
            None => synth_foreground(&config.bands, res, &config.foreground, &mut stream(seed, &[label::FOREGROUND]))?,
        };
        let modulation = noise_modulation(res, config.noise_modulation)?;
        Ok(Simulator { config, seed, res, spectrum, beam, foreground, modulation })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    /// The fixed per-dataset foreground template, one map per band.
    pub fn foreground(&self) -> &[SkyMap] {
        &self.foreground
    }

    pub fn components(&self, id: usize) -> Result<Components> {
        let id = id as u64;
        let cmb = simulate_cmb(&self.spectrum, self.res, &self.beam, &mut stream(self.seed, &[label::CMB, id]))?;
        let fm = &self.config.foreground;
        let factor = if fm.instance_modulation > 0.0 {
            let field =
                large_scale_field(self.res, fm.pattern_lmax, &mut stream(self.seed, &[label::FOREGROUND_MOD, id]))?;
            field.values().iter().map(|g| 1.0 + fm.instance_modulation * g).collect()
        } else {
            vec![1.0; self.res.n_pixels()]
        };
        let foreground = self
            .foreground
            .iter()
            .map(|f| SkyMap::new(self.res, 1, f.values().iter().zip(&factor).map(|(a, b)| a * b).collect()))
            .collect::<Result<Vec<_>>>()?;
        let noise = self
            .config
            .bands
            .iter()
            .enumerate()
            .map(|(b, band)| {
                noise_realization(band, &self.modulation, &mut stream(self.seed, &[label::NOISE, id, b as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Components { cmb, foreground, noise })
    }

    pub fn instance(&self, id: usize) -> Result<Instance> {
        let c = self.components(id)?;
        let n = self.res.n_pixels();
        let mut x = Vec::with_capacity(N_BANDS * n);
        for (f, z) in c.foreground.iter().zip(&c.noise) {
            x.extend(c.cmb.values().iter().zip(f.values()).zip(z.values()).map(|((s, f), z)| s + f + z));
        }
        Ok(Instance { id, x: SkyMap::new(self.res, N_BANDS, x)?, y: c.cmb })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// `(train, validation, test)` counts: a tenth each for validation and test.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 instances to split 80/10/10, got {n}")));
    }
    let held = n / 10;
    Ok((n - 2 * held, held, held))
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation per channel over all pixels
    /// of all given maps.
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a SkyMap>) -> Result<Self> {
        let maps: Vec<&SkyMap> = maps.into_iter().collect();
        let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps to normalize over".into()))?;
        let c = first.channels();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let count = (maps.len() * first.n_pixels()) as f64;
            let m = maps.iter().map(|x| x.channel(ch).iter().sum::<f64>()).sum::<f64>() / count;
            let v =
                maps.iter().map(|x| x.channel(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sum::<f64>() / count;
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("channel {ch} has zero variance")));
            }
            mean[ch] = m;
            std[ch] = v.sqrt();
        }
        Ok(NormStats { mean, std })
    }

    /// `(x - mean)/std` per channel, as a `(1, C, N)` tensor.
    pub fn apply(&self, x: &SkyMap) -> Result<Tensor> {
        if x.channels() != self.mean.len() {
            return Err(Error::shape("normalize", format!("{} channels, stats for {}", x.channels(), self.mean.len())));
        }
        let mut out = Vec::with_capacity(x.values().len());
        for c in 0..x.channels() {
            out.extend(x.channel(c).iter().map(|v| (v - self.mean[c]) / self.std[c]));
        }
        Tensor::new([1, x.channels(), x.n_pixels()], out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_instances: usize,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: SimConfig,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub normalization: NormStats,
    /// Stream seeds behind each instance: `[cmb, foreground modulation]`
    /// (band noise streams derive from the instance id and band index).
    pub instance_seeds: Vec<[u64; 2]>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// A dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Indexed by instance id.
    pub instances: Vec<Instance>,
}

pub fn build_dataset(n: usize, config: &SimConfig, seed: u64) -> Result<Dataset> {
    let (n_train, n_val, _) = split_counts(n)?;
    let sim = Simulator::new(config.clone(), seed)?;
    let instances = (0..n).map(|id| sim.instance(id)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[label::SPLIT]));
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();

    let normalization = NormStats::from_maps(train.iter().map(|&i| &instances[i].x))?;
    let instance_seeds = (0..n as u64)
        .map(|id| [derive_seed(seed, &[label::CMB, id]), derive_seed(seed, &[label::FOREGROUND_MOD, id])])
        .collect();
    let manifest = DatasetManifest {
        n_instances: n,
        master_seed: seed,
        config_hash: config.hash(n, seed)?,
        config: config.clone(),
        train,
        validation,
        test,
        normalization,
        instance_seeds,
    };
    Ok(Dataset { manifest, instances })
}

pub fn instance_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("inst_{id}.hmap"))
}

impl Dataset {
    /// Writes `manifest.json` and one `inst_<id>.hmap` per instance holding
    /// the nine observed channels followed by the target as channel 9.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for inst in &self.instances {
            let both = SkyMap::stack(&[inst.x.clone(), inst.y.clone()])?;
            hmap::save(&instance_path(dir, inst.id), &MapFile::new(both, UNITS))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let instances = (0..manifest.n_instances).map(|id| load_instance(dir, id)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, instances })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.manifest.ids(split).iter().map(|&i| &self.instances[i])
    }

    /// Normalized training and validation pairs.
    pub fn train_data(&self) -> Result<crate::train::TrainData> {
        let stats = &self.manifest.normalization;
        let pairs = |s: Split| -> Result<Vec<crate::train::Sample>> {
            self.split(s)
                .map(|inst| {
                    let n = inst.y.n_pixels();
                    Ok(crate::train::Sample {
                        x: stats.apply(&inst.x)?,
                        y: Tensor::new([1, 1, n], inst.y.values().to_vec())?,
                    })
                })
                .collect()
        };
        Ok(crate::train::TrainData { train: pairs(Split::Train)?, validation: pairs(Split::Validation)? })
    }
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { kind: "manifest", path, detail: e.to_string() })
}

pub fn load_instance(dir: &Path, id: usize) -> Result<Instance> {
    let path = instance_path(dir, id);
    let f = hmap::load(&path)?;
    if f.map.channels() != N_BANDS + 1 {
        return Err(Error::Format {
            kind: "instance",
            path,
            detail: format!("expected {} channels, got {}", N_BANDS + 1, f.map.channels()),
        });
    }
    let res = f.map.resolution();
    let n = res.n_pixels();
    let x = SkyMap::new(res, N_BANDS, f.map.values()[..N_BANDS * n].to_vec())?;
    Ok(Instance { id, x, y: f.map.extract(N_BANDS) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(1000).unwrap(), (800, 100, 100));
        assert_eq!(split_counts(100).unwrap(), (80, 10, 10));
        assert_eq!(split_counts(10).unwrap(), (8, 1, 1));
        assert!(split_counts(9).is_err());
    }

    #[test]
    fn spectral_scaling_at_857() {
        let g = spectral_scaling(857.0, &ForegroundConfig::default());
        assert!((g - 73.4449).abs() < 1e-4);
    }
}
