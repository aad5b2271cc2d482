//! Foreground cleaning of multi-frequency CMB sky maps with a graph U-Net on
//! the HEALPix sphere, with Monte Carlo dropout uncertainty and an ILC
//! baseline.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod harmonics;
pub mod healpix;
pub mod hmap;
pub mod ilc;
pub mod layers;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod skysim;
pub mod train;
pub mod unet;
pub mod uq;

pub use error::{Error, Result};
