//! The full workflow through the library API with a TOML config:
//! simulate, train both stages, predict with uncertainty, run the ILC
//! baseline and compare. Pass a config path to override `configs/desk.toml`.

use std::path::PathBuf;

use cmbclean::config::RunConfig;
use cmbclean::pipeline;
use cmbclean::skysim::Split;
use cmbclean::train::{Stage, SELECTED_FILE};

fn main() -> cmbclean::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"));
    let cfg = RunConfig::load(&path)?;
    let root = std::env::temp_dir().join("cmbclean-desk");
    let data = root.join("data");
    let n = 100;
    pipeline::simulate(&cfg, n, 1, &data, true)?;
    pipeline::train_stage(Stage::Deterministic, &data, &cfg, &root.join("det"), None)?;
    let init = root.join("det").join(SELECTED_FILE);
    let out = pipeline::train_stage(Stage::Bayesian, &data, &cfg, &root.join("bayes"), Some(&init))?;
    println!("bayesian stage selected epoch {}", out.selected_epoch);

    let model = root.join("bayes").join(SELECTED_FILE);
    pipeline::predict(&model, &data, Split::Test, cfg.inference.samples, cfg.inference.seed, &root.join("pred"))?;
    pipeline::ilc(&data, Split::Test, None, &root.join("ilc"))?;
    let cut = cfg.evaluation.cut_deg;
    for dir in ["pred", "ilc"] {
        let r = pipeline::evaluate(&root.join(dir), &data, cut, cfg.evaluation.lmax)?;
        println!("{:>4}: rmse {:.2} uK, r {:.4}, calibration {:?}", r.method, r.rmse, r.pearson_r, r.calibration);
    }
    let s = pipeline::spectrum(&root.join("pred"), &root.join("ilc"), &data, cut, cfg.evaluation.lmax)?;
    s.write_csv(&root.join("spectra.csv"))?;
    println!("outputs in {}", root.display());
    Ok(())
}
