//! Parameter estimation for a degenerate Cahn–Hilliard tumour growth model
//! coupled to a nutrient equation, using POD/DEIM reduced order models inside
//! a projected weighted-gradient optimizer.

pub mod caseio;
pub mod config;
pub mod error;
pub mod fom;
pub mod mesh;
pub mod numfmt;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pod;
pub mod rom;
pub mod runner;
pub mod sparse;

pub use error::{Error, Result};
