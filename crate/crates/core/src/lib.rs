//! Longitudinal genetic heritability: GRM construction, AI-REML and REHE estimators,
//! censored meta-analysis of partitioned fits, and the simulation harness around them.

// NaN-rejecting guards read as `!(x > 0.0)`, and dense kernels index several arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aireml;
pub mod cli;
pub mod error;
pub mod grm;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod model;
pub mod rehe;
pub mod seed;
pub mod sim;
pub mod stats;

pub use aireml::{ai_reml_fit, FitResult, RemlOptions};
pub use error::{Error, Result};
pub use grm::{compute_grm, standardize_genotypes, GenotypeMatrix, Grm};
pub use model::{CovarianceStructure, HeritabilityPair, LongitudinalDataset, Subject, VarianceComponents};
pub use rehe::{parametric_bootstrap, rehe_fit, ReheFit};
