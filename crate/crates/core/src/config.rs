//! Run configuration read from TOML. Unknown keys are rejected, and every
//! omitted key takes its documented default.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::EdgeWeighting;
use crate::optim::OptimizerKind;
use crate::skysim::SimConfig;
use crate::train::{SelectionMetric, Stage, TrainConfig};
use crate::unet::UNetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Chebyshev order `K`.
    pub order: usize,
    pub edge_weighting: EdgeWeighting,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        ArchitectureConfig { depth: u.depth, widths: u.widths, order: u.order, edge_weighting: u.edge_weighting }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub deterministic: StageConfig,
    pub bayesian: StageConfig,
    pub length_scale: f64,
    pub selection: SelectionMetric,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            deterministic: StageConfig {
                epochs: 200,
                batch_size: 10,
                optimizer: OptimizerKind::Sgd,
                learning_rate: 1e-3,
            },
            bayesian: StageConfig { epochs: 200, batch_size: 7, optimizer: OptimizerKind::Adam, learning_rate: 1e-5 },
            length_scale: 1e-4,
            selection: SelectionMetric::default(),
            patience: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Monte Carlo passes per prediction.
    pub samples: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { samples: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Half-width of the excluded band around the equator, degrees.
    pub cut_deg: f64,
    /// Highest multipole of reported spectra; `None` means `2·nside`.
    pub lmax: Option<usize>,
    /// Estimate ILC weights over the cut sky instead of the full sky.
    pub ilc_masked: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { cut_deg: 30.0, lmax: None, ilc_masked: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimConfig,
    pub architecture: ArchitectureConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.unet(false).validate().map_err(|e| Error::Config(format!("architecture: {e}")))?;
        for (name, s) in [("deterministic", &self.training.deterministic), ("bayesian", &self.training.bayesian)] {
            if s.epochs == 0 || s.batch_size == 0 || !(s.learning_rate > 0.0) {
                return Err(Error::Config(format!(
                    "training.{name}: epochs, batch size and learning rate must be positive"
                )));
            }
        }
        if !(self.training.length_scale > 0.0) || self.training.patience == 0 {
            return Err(Error::Config("training: length scale and patience must be positive".into()));
        }
        if self.inference.samples < 2 {
            return Err(Error::Config("inference.samples must be at least 2".into()));
        }
        if !(0.0..90.0).contains(&self.evaluation.cut_deg) {
            return Err(Error::Config("evaluation.cut_deg must be in [0, 90)".into()));
        }
        Ok(())
    }

    pub fn unet(&self, bayesian: bool) -> UNetConfig {
        let a = &self.architecture;
        UNetConfig {
            in_channels: crate::skysim::N_BANDS,
            nside: self.simulation.nside,
            depth: a.depth,
            widths: a.widths.clone(),
            order: a.order,
            bayesian,
            edge_weighting: a.edge_weighting,
        }
    }

    pub fn train(&self, stage: Stage) -> TrainConfig {
        let t = &self.training;
        let s = match stage {
            Stage::Deterministic => &t.deterministic,
            Stage::Bayesian => &t.bayesian,
        };
        TrainConfig {
            stage,
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            learning_rate: s.learning_rate,
            length_scale: t.length_scale,
            selection: t.selection,
            patience: t.patience,
            seed: t.seed,
        }
    }

    pub fn spectrum_lmax(&self) -> usize {
        self.evaluation.lmax.unwrap_or(2 * self.simulation.nside as usize)
    }
}

/// Defaults with their origin, for `--help`.
pub fn describe_defaults() -> String {
    let c = RunConfig::default();
    let s = &c.simulation;
    let t = &c.training;
    let mut out = String::from("Config defaults (TOML sections; omitted keys take these values):\n");
    let mut line = |key: &str, value: String, why: &str| {
        let _ = writeln!(out, "  {key:<36} {value:<28} {why}");
    };
    line("simulation.nside", s.nside.to_string(), "working resolution");
    line("simulation.beam_fwhm_arcmin", s.beam_fwhm_arcmin.to_string(), "common beam for all bands");
    line("simulation.lmax", "3*nside-1".into(), "full band limit of the grid");
    line("simulation.spectrum_file", "built-in plateau".into(), "flat l(l+1)C_l/2pi = 1000 uK^2");
    line(
        "simulation.bands.freq_ghz",
        format!("{:?}", s.bands.iter().map(|b| b.freq_ghz).collect::<Vec<_>>()),
        "band centres",
    );
    line(
        "simulation.bands.noise_sigma",
        format!("{:?}", s.bands.iter().map(|b| b.noise_sigma).collect::<Vec<_>>()),
        "synthetic, lowest near 143 GHz",
    );
    line("simulation.noise_modulation", s.noise_modulation.to_string(), "noise x (1 + a|cos theta|)");
    let f = &s.foreground;
    line("simulation.foreground.amplitude", f.amplitude.to_string(), "uK at the pivot, synthetic");
    line("simulation.foreground.width_deg", f.width_deg.to_string(), "galactic-plane width");
    line("simulation.foreground.spectral_index", f.spectral_index.to_string(), "power law in frequency");
    line("simulation.foreground.pivot_ghz", f.pivot_ghz.to_string(), "normalization frequency");
    line("simulation.foreground.pattern_lmax", f.pattern_lmax.to_string(), "fixed large-scale pattern");
    line("simulation.foreground.pattern_strength", f.pattern_strength.to_string(), "log-amplitude spread");
    line("simulation.foreground.instance_modulation", f.instance_modulation.to_string(), "per-instance 10% modulation");
    line("simulation.foreground.template_file", "none (synthetic)".into(), "9-channel .hmap replacing the template");
    let a = &c.architecture;
    line("architecture.depth", a.depth.to_string(), "encoder levels");
    line("architecture.widths", format!("{:?}", a.widths), "channels per level");
    line("architecture.order", a.order.to_string(), "Chebyshev order K");
    line("architecture.edge_weighting", "gaussian".into(), "kernel on neighbour distance");
    for (name, st) in [("deterministic", &t.deterministic), ("bayesian", &t.bayesian)] {
        line(&format!("training.{name}.epochs"), st.epochs.to_string(), "budget; early stop below");
        line(&format!("training.{name}.batch_size"), st.batch_size.to_string(), "mini-batch size");
        line(&format!("training.{name}.optimizer"), format!("{:?}", st.optimizer).to_lowercase(), "update rule");
        line(&format!("training.{name}.learning_rate"), format!("{:e}", st.learning_rate), "step size");
    }
    line("training.length_scale", format!("{:e}", t.length_scale), "dropout prior length scale");
    line("training.selection.val_weight", t.selection.val_weight.to_string(), "checkpoint selection weight");
    line("training.selection.train_weight", t.selection.train_weight.to_string(), "checkpoint selection weight");
    line("training.patience", t.patience.to_string(), "epochs without improvement");
    line("training.seed", t.seed.to_string(), "master training seed");
    line("inference.samples", c.inference.samples.to_string(), "Monte Carlo passes T");
    line("inference.seed", c.inference.seed.to_string(), "dropout mask seed");
    line("evaluation.cut_deg", c.evaluation.cut_deg.to_string(), "+-30 degree galactic cut");
    line("evaluation.lmax", "2*nside".into(), "spectrum band limit");
    line("evaluation.ilc_masked", c.evaluation.ilc_masked.to_string(), "ILC covariance over full sky");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[training]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml("[simulation.foreground]\ncolour = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.simulation.nside = 16;
        c.architecture.depth = 2;
        c.architecture.widths = vec![16, 32];
        c.training.bayesian.learning_rate = 3e-4;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn reference_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.simulation.nside, 64);
        assert_eq!(c.training.deterministic.batch_size, 10);
        assert_eq!(c.training.bayesian.batch_size, 7);
        assert_eq!(c.training.deterministic.learning_rate, 1e-3);
        assert_eq!(c.training.bayesian.learning_rate, 1e-5);
        assert_eq!(c.training.length_scale, 1e-4);
        assert_eq!(c.evaluation.cut_deg, 30.0);
        assert!(describe_defaults().contains("simulation.beam_fwhm_arcmin"));
    }
}
