//! Panel econometrics for the elasticity of carbon emissions with respect to
//! forest loss.
//!
//! - [`panel`]: balanced region × year panels and their transforms.
//! - [`ingest`]: CSV loading, pixel-grid aggregation, summary statistics.
//! - [`estimators`]: pooled OLS, two-way FE, dynamic LSDV, difference and
//!   system GMM, heterogeneity interactions, long-run elasticity.
//! - [`diagnostics`]: AR(m), Hansen J, Durbin–Watson, Jarque–Bera, within R².
//! - [`dgp`]: simulated panels and pixel grids with known parameters, and a
//!   Monte Carlo harness.

pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod ingest;
pub mod linalg;
pub mod panel;

pub use error::{Error, Result};
pub use estimators::{
    EstimatorTag, FitResult, GmmOptions, GmmSteps, RegressionSpec, Term,
};
pub use panel::{build_panel, Balanced, Grid, Observation, Panel};
