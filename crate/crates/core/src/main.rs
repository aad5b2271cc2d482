use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cmbclean::config::{describe_defaults, RunConfig};
use cmbclean::healpix::latitude_mask;
use cmbclean::pipeline;
use cmbclean::skysim::{load_manifest, Split};
use cmbclean::train::Stage;
use cmbclean::Result;

#[derive(Parser)]
#[command(name = "cmbclean", version, about = "CMB recovery on the sphere with a Bayesian graph U-Net")]
#[command(after_help = describe_defaults())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Deterministic,
    Bayesian,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of multi-frequency sky instances.
    #[command(after_help = describe_defaults())]
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage; the bayesian stage needs --init.
    #[command(after_help = describe_defaults())]
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Deterministic checkpoint to start the bayesian stage from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Monte Carlo predictions with uncertainty maps.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Number of stochastic forward passes.
        #[arg(long = "T", default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Internal linear combination baseline.
    Ilc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Estimate the channel covariance outside the cut only.
        #[arg(long)]
        masked: bool,
        #[arg(long, default_value_t = 30.0)]
        cut: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pixel and spectral accuracy of a prediction directory.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        cut: f64,
        #[arg(long)]
        lmax: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean power spectra of truth, CNN and ILC maps as CSV.
    Spectrum {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ilc: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        cut: f64,
        #[arg(long)]
        lmax: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, n, seed, out, force } => {
            let cfg = load_config(config.as_deref())?;
            let m = pipeline::simulate(&cfg, n, seed, &out, force)?;
            println!(
                "wrote {} instances ({} train, {} validation, {} test) to {}",
                m.n_instances,
                m.train.len(),
                m.validation.len(),
                m.test.len(),
                out.display()
            );
        }
        Command::Train { stage, data, config, out, init } => {
            let cfg = load_config(config.as_deref())?;
            let stage = match stage {
                StageArg::Deterministic => Stage::Deterministic,
                StageArg::Bayesian => Stage::Bayesian,
            };
            let outcome = pipeline::train_stage(stage, &data, &cfg, &out, init.as_deref())?;
            println!(
                "{} stage: {} epochs{}, selected epoch {}",
                stage.name(),
                outcome.history.len(),
                if outcome.stopped_early { " (stopped early)" } else { "" },
                outcome.selected_epoch
            );
        }
        Command::Predict { model, data, split, samples, seed, out } => {
            let index = pipeline::predict(&model, &data, split.into(), samples, seed, &out)?;
            println!("predicted {} instances with T = {samples}", index.ids.len());
        }
        Command::Ilc { data, split, masked, cut, out } => {
            let mask =
                if masked { Some(latitude_mask(load_manifest(&data)?.config.resolution()?, cut)?) } else { None };
            let index = pipeline::ilc(&data, split.into(), mask.as_ref(), &out)?;
            println!("cleaned {} instances", index.ids.len());
        }
        Command::Evaluate { pred, data, cut, lmax, out } => {
            let report = pipeline::evaluate(&pred, &data, cut, lmax)?;
            pipeline::write_json(&out, &report)?;
            println!("{}: rmse {:.4} uK, r {:.4}", report.method, report.rmse, report.pearson_r);
        }
        Command::Spectrum { pred, ilc, data, cut, lmax, out } => {
            pipeline::spectrum(&pred, &ilc, &data, cut, lmax)?.write_csv(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
