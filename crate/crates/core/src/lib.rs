pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod raster;
pub mod seeds;
pub mod synth;
pub mod trainer;
pub mod translator;
pub mod uncertainty;

pub use error::{Error, Result};
