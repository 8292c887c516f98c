//! Disaggregation-regression engine: simulate fine-scale Poisson risk
//! surfaces on synthetic geographies, aggregate them to polygon counts,
//! fit the aggregate-likelihood model by MAP, and evaluate fine-scale
//! predictive performance.

pub mod error;
pub mod fields;
pub mod geometry;
pub mod kv;
pub mod model;
pub mod raster;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
