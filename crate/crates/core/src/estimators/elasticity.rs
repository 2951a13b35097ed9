use serde::{Deserialize, Serialize};

use super::types::FitResult;
use crate::error::{Error, Result};

/// Short-run, persistence and long-run elasticities of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityReport {
    pub short_run: f64,
    pub short_run_se: f64,
    pub persistence: f64,
    pub persistence_se: f64,
    /// `β / (1 - ρ)`.
    pub long_run: f64,
    /// Delta method on the `(β, ρ)` block of the covariance.
    pub long_run_se: f64,
    /// Set when `|ρ| >= 1`; the long-run value is then not a steady-state effect.
    pub stationarity_warning: bool,
}

impl ElasticityReport {
    /// `cov` is the 2×2 covariance of `(β, ρ)` in that order.
    pub fn from_estimates(beta: f64, rho: f64, cov: [[f64; 2]; 2]) -> Result<Self> {
        let gap = 1.0 - rho;
        if gap.abs() <= 1e-8 {
            return Err(Error::UnitRoot(rho));
        }
        let grad = [1.0 / gap, beta / (gap * gap)];
        let var = grad[0] * grad[0] * cov[0][0] + 2.0 * grad[0] * grad[1] * cov[0][1] + grad[1] * grad[1] * cov[1][1];
        Ok(Self {
            short_run: beta,
            short_run_se: cov[0][0].max(0.0).sqrt(),
            persistence: rho,
            persistence_se: cov[1][1].max(0.0).sqrt(),
            long_run: beta / gap,
            long_run_se: var.max(0.0).sqrt(),
            stationarity_warning: rho.abs() >= 1.0,
        })
    }
}

pub fn long_run_elasticity(fit: &FitResult, beta_name: &str, rho_name: &str) -> Result<ElasticityReport> {
    let missing = |n: &str| Error::UnknownVariable(format!("coefficient `{n}`"));
    let b = fit.index_of(beta_name).ok_or_else(|| missing(beta_name))?;
    let r = fit.index_of(rho_name).ok_or_else(|| missing(rho_name))?;
    let cov = [[fit.vcov[b][b], fit.vcov[b][r]], [fit.vcov[r][b], fit.vcov[r][r]]];
    ElasticityReport::from_estimates(fit.coefficients[b].estimate, fit.coefficients[r].estimate, cov)
}
