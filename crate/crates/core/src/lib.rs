//! Multi-sector factor modelling for portfolio construction.
//!
//! The crate estimates latent factor models jointly across several asset
//! sectors with a projection-penalized PCA, turns each sector fit into a
//! sparse (POET-style) return covariance and a minimum-variance portfolio,
//! and evaluates the approach with a seeded simulation study and a
//! rolling-window backtest.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Return panels are stored assets
//! by periods (`p × T`), factor series periods by factors (`T × K`).

// `!(x > 0.0)` is written on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod covariance;
mod error;
pub mod linalg;
pub mod panel;
pub mod par;
pub mod portfolio;
pub mod ppfm;
pub mod simulation;
pub mod tuning;

pub use error::{Error, ErrorKind, Result};

pub use covariance::{SparseCovariance, ThresholdRule};
pub use panel::{ReturnPanel, SectorMap};
pub use portfolio::PortfolioResult;
pub use ppfm::{FactorFit, MultiFit, PpfmConfig};
