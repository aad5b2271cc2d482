//! The command-line workflow as library calls: simulate, train, predict,
//! ILC, evaluate and spectrum. Each step reads and writes plain directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::healpix::{latitude_mask, MaskMap, SkyMap};
use crate::hmap::{self, MapFile};
use crate::ilc::{ilc_clean, ilc_weights};
use crate::rng::{derive_seed, label, stream};
use crate::skysim::{build_dataset, load_instance, load_manifest, Dataset, DatasetManifest, Split, UNITS};
use crate::train::{train, Stage, TrainOutcome};
use crate::unet::{transfer_weights, UNet};
use crate::uq::{calibration_pooled, mc_predict, pearson, spectral_report, Calibration, SpectralReport};

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const WEIGHTS_FILE: &str = "weights.json";

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |e| Error::io(context, e)
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(format!("reading {}", dir.display()), e)),
    }
}

/// Builds a dataset and writes it to `out`.
pub fn simulate(cfg: &RunConfig, n: usize, seed: u64, out: &Path, force: bool) -> Result<DatasetManifest> {
    if !force && is_nonempty_dir(out)? {
        return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    crate::skysim::split_counts(n).map_err(|e| Error::Usage(e.to_string()))?;
    let ds = build_dataset(n, &cfg.simulation, seed)?;
    ds.save(out)?;
    Ok(ds.manifest)
}

fn check_resolution(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.config.nside != cfg.simulation.nside {
        return Err(Error::Config(format!(
            "dataset is at nside {}, configuration expects {}",
            manifest.config.nside, cfg.simulation.nside
        )));
    }
    Ok(())
}

/// Runs one training stage on a dataset directory. The Bayesian stage starts
/// from the deterministic checkpoint given as `init`.
pub fn train_stage(
    stage: Stage,
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    init: Option<&Path>,
) -> Result<TrainOutcome> {
    let tc = cfg.train(stage);
    let seed = tc.seed;
    let mut model = match (stage, init) {
        (Stage::Deterministic, None) => UNet::new(cfg.unet(false), &mut stream(seed, &[label::INIT]))?,
        (Stage::Deterministic, Some(_)) => {
            return Err(Error::Usage("--init applies to the bayesian stage only".into()));
        }
        (Stage::Bayesian, None) => {
            return Err(Error::Usage(
                "the bayesian stage starts from a pre-trained network: run `train --stage deterministic` \
                 first and pass its selected.ckpt with --init"
                    .into(),
            ));
        }
        (Stage::Bayesian, Some(path)) => {
            let det = Checkpoint::load(path)?.to_model()?;
            if det.config().bayesian {
                return Err(Error::Usage(format!("{} is not a deterministic checkpoint", path.display())));
            }
            let mut bayes = UNet::new(cfg.unet(true), &mut stream(seed, &[label::INIT, 1]))?;
            transfer_weights(&det, &mut bayes, &mut stream(seed, &[label::TRANSFER]))?;
            bayes
        }
    };
    let ds = Dataset::load(data)?;
    check_resolution(cfg, &ds.manifest)?;
    train(&mut model, &ds.train_data()?, &tc, out)
}

/// Bookkeeping written next to per-instance prediction maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub method: String,
    pub split: Split,
    pub ids: Vec<usize>,
    /// Monte Carlo passes (0 for the ILC).
    pub samples: usize,
}

pub fn prediction_path(dir: &Path, id: usize, what: &str) -> PathBuf {
    dir.join(format!("inst_{id}_{what}.hmap"))
}

fn write_index(dir: &Path, index: &PredictionIndex) -> Result<()> {
    let path = dir.join(PREDICTIONS_FILE);
    fs::write(&path, serde_json::to_string_pretty(index)? + "\n").map_err(io(format!("writing {}", path.display())))
}

pub fn read_index(dir: &Path) -> Result<PredictionIndex> {
    let path = dir.join(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(io(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { kind: "prediction index", path, detail: e.to_string() })
}

fn single(map: &[f64], like: &SkyMap) -> Result<MapFile> {
    Ok(MapFile::new(SkyMap::new(like.resolution(), 1, map.to_vec())?, UNITS))
}

/// Monte Carlo predictions for one split: per instance the mean, epistemic,
/// aleatoric and total maps.
pub fn predict(
    model: &Path,
    data: &Path,
    split: Split,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<PredictionIndex> {
    if samples < 2 {
        return Err(Error::Usage(format!("--T must be at least 2, got {samples}")));
    }
    let net = Checkpoint::load(model)?.to_model()?;
    let manifest = load_manifest(data)?;
    fs::create_dir_all(out).map_err(io(format!("creating {}", out.display())))?;
    let ids = manifest.ids(split).to_vec();
    for &id in &ids {
        let inst = load_instance(data, id)?;
        let x = manifest.normalization.apply(&inst.x)?;
        let uq = mc_predict(&net, &x, samples, derive_seed(seed, &[id as u64]))?;
        let maps =
            [("mean", &uq.mean), ("epistemic", &uq.epistemic), ("aleatoric", &uq.aleatoric), ("total", &uq.total)];
        for (what, m) in maps {
            hmap::save(&prediction_path(out, id, what), &single(m, &inst.y)?)?;
        }
    }
    let index = PredictionIndex { method: "cnn".into(), split, ids, samples };
    write_index(out, &index)?;
    Ok(index)
}

/// Per-instance ILC maps for one split, with the weights in `weights.json`.
pub fn ilc(data: &Path, split: Split, mask: Option<&MaskMap>, out: &Path) -> Result<PredictionIndex> {
    let manifest = load_manifest(data)?;
    fs::create_dir_all(out).map_err(io(format!("creating {}", out.display())))?;
    let ids = manifest.ids(split).to_vec();
    let mut weights = BTreeMap::new();
    for &id in &ids {
        let inst = load_instance(data, id)?;
        let w = ilc_weights(&inst.x, mask)?;
        let clean = ilc_clean(&inst.x, &w)?;
        hmap::save(&prediction_path(out, id, "mean"), &MapFile::new(clean, UNITS))?;
        weights.insert(id.to_string(), w);
    }
    let path = out.join(WEIGHTS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&weights)? + "\n")
        .map_err(io(format!("writing {}", path.display())))?;
    let index = PredictionIndex { method: "ilc".into(), split, ids, samples: 0 };
    write_index(out, &index)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: usize,
    pub rmse: f64,
    pub pearson_r: f64,
}

/// Pooled accuracy over a prediction directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub cut_deg: f64,
    pub kept_fraction: f64,
    pub n_instances: usize,
    /// Over all kept pixels of all instances (μK).
    pub rmse: f64,
    pub pearson_r: f64,
    pub per_instance: Vec<InstanceScore>,
    /// Present when total-variance maps are available.
    pub calibration: Option<Calibration>,
    pub spectra: EvalSpectra,
}

/// Mean pseudo-spectra of truth, prediction and their difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpectra {
    pub ell: Vec<usize>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    pub difference: Vec<f64>,
}

/// Predicted mean maps and truths, aligned by id.
fn aligned(pred: &Path, data: &Path) -> Result<(PredictionIndex, Vec<SkyMap>, Vec<SkyMap>)> {
    let index = read_index(pred)?;
    let manifest = load_manifest(data)?;
    if manifest.ids(index.split) != index.ids.as_slice() {
        return Err(Error::InvalidArgument(format!(
            "prediction ids in {} do not match the {:?} split of {}",
            pred.display(),
            index.split,
            data.display()
        )));
    }
    let mut preds = Vec::with_capacity(index.ids.len());
    let mut truths = Vec::with_capacity(index.ids.len());
    for &id in &index.ids {
        preds.push(hmap::load(&prediction_path(pred, id, "mean"))?.map);
        truths.push(load_instance(data, id)?.y);
    }
    Ok((index, preds, truths))
}

pub fn evaluate(pred: &Path, data: &Path, cut_deg: f64, lmax: Option<usize>) -> Result<EvalReport> {
    let (index, preds, truths) = aligned(pred, data)?;
    let first = truths.first().ok_or_else(|| Error::InvalidArgument("no instances to evaluate".into()))?;
    let res = first.resolution();
    let mask = latitude_mask(res, cut_deg)?;
    let lmax = lmax.unwrap_or(2 * res.nside() as usize);

    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    let mut per_instance = Vec::with_capacity(preds.len());
    for ((p, t), &id) in preds.iter().zip(&truths).zip(&index.ids) {
        let kept: Vec<(f64, f64)> = mask.kept_indices().map(|i| (p.values()[i], t.values()[i])).collect();
        let se: f64 = kept.iter().map(|(a, b)| (a - b) * (a - b)).sum();
        per_instance.push(InstanceScore { id, rmse: (se / kept.len() as f64).sqrt(), pearson_r: pearson(&kept)? });
        let total_path = prediction_path(pred, id, "total");
        if total_path.exists() {
            let total = hmap::load(&total_path)?.map;
            triples.extend(mask.kept_indices().map(|i| (p.values()[i], total.values()[i], t.values()[i])));
        }
        pairs.extend(kept);
    }
    let rmse = (pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pairs.len() as f64).sqrt();
    let calibration = if triples.len() == pairs.len() { Some(calibration_pooled(&triples)?) } else { None };
    let s = spectral_report(&preds, &truths, &preds, &mask, lmax)?;
    Ok(EvalReport {
        method: index.method,
        split: index.split,
        cut_deg,
        kept_fraction: mask.sky_fraction(),
        n_instances: preds.len(),
        rmse,
        // pairs are (prediction, truth)
        pearson_r: pearson(&pairs)?,
        per_instance,
        calibration,
        spectra: EvalSpectra { ell: s.ell, truth: s.truth, predicted: s.cnn, difference: s.diff_cnn },
    })
}

/// Mean spectra of truth, CNN and ILC maps and of both difference maps.
pub fn spectrum(cnn: &Path, ilc: &Path, data: &Path, cut_deg: f64, lmax: Option<usize>) -> Result<SpectralReport> {
    let (ci, cnn_maps, truths) = aligned(cnn, data)?;
    let (ii, ilc_maps, _) = aligned(ilc, data)?;
    if ci.ids != ii.ids {
        return Err(Error::InvalidArgument("CNN and ILC predictions cover different instances".into()));
    }
    let res = truths.first().ok_or_else(|| Error::InvalidArgument("no instances".into()))?.resolution();
    let mask = latitude_mask(res, cut_deg)?;
    spectral_report(&cnn_maps, &truths, &ilc_maps, &mask, lmax.unwrap_or(2 * res.nside() as usize))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(format!("creating {}", parent.display())))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io(format!("writing {}", path.display())))
}
