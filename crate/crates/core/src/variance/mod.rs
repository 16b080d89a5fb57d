//! Sandwich variance estimation for `theta_hat`.

mod adaptive;
mod blockinv;
mod interval;
mod weights;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use adaptive::{
    adaptive_sandwich, adaptive_sandwich_with, check_equivalence, corrected_meat_cov, sandwich, stacked_bread,
    stacked_scores, AdaptiveSandwich,
};
pub use blockinv::{block_lower_triangular_inverse, BlockLowerTriangular};
pub use interval::{confidence_interval, z_quantile};
pub use weights::{product_ratio, weight_products, WeightEval, REPLAY_TOLERANCE};

use crate::error::Result;
use crate::estimators::EstimationResult;
use crate::trajectory::TrajectorySet;

/// Which estimators to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceChoice {
    Sandwich,
    Adaptive,
    #[default]
    Both,
}

impl VarianceChoice {
    pub fn sandwich(self) -> bool {
        matches!(self, VarianceChoice::Sandwich | VarianceChoice::Both)
    }

    pub fn adaptive(self) -> bool {
        matches!(self, VarianceChoice::Adaptive | VarianceChoice::Both)
    }
}

/// Covariance estimates for one estimator, scaled as the variance of
/// `sqrt(n) (theta_hat - theta*)`.
#[derive(Debug, Clone)]
pub struct CovarianceSummary {
    pub cov: DMatrix<f64>,
    /// `sqrt(diag(cov) / n)`.
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
}

impl CovarianceSummary {
    fn new(cov: DMatrix<f64>, theta_hat: &[f64], n_users: usize, alpha: f64) -> Self {
        let se: Vec<f64> = (0..cov.nrows())
            .map(|j| (cov[(j, j)].max(0.0) / n_users as f64).sqrt())
            .collect();
        let ci = theta_hat
            .iter()
            .zip(&se)
            .map(|(&t, &s)| confidence_interval(t, s, alpha))
            .collect();
        Self { cov, se, ci }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub alpha: f64,
    pub sandwich: Option<CovarianceSummary>,
    pub adaptive: Option<CovarianceSummary>,
    /// `||V_{T,t}||_F`, `t = 1..T-1`; empty when the adaptive estimator was skipped.
    pub policy_invariance_norms: Vec<f64>,
    pub stacked_dim: usize,
    /// Relative gap between the stacked and corrected-meat forms.
    pub equivalence_gap: Option<f64>,
}

pub fn variance_report(
    traj: &TrajectorySet,
    est: &EstimationResult,
    choice: VarianceChoice,
    alpha: f64,
) -> Result<VarianceReport> {
    let n = est.blocks.n_users;
    let sandwich = if choice.sandwich() {
        Some(CovarianceSummary::new(sandwich(est)?, &est.theta_hat, n, alpha))
    } else {
        None
    };
    let mut report = VarianceReport {
        alpha,
        sandwich,
        adaptive: None,
        policy_invariance_norms: Vec::new(),
        stacked_dim: est.blocks.stacked_dim(),
        equivalence_gap: None,
    };
    if choice.adaptive() {
        let ad = adaptive_sandwich(traj, est)?;
        report.equivalence_gap = Some(check_equivalence(est, &ad)?);
        report.policy_invariance_norms = ad.invariance_norms;
        report.adaptive = Some(CovarianceSummary::new(ad.cov, &est.theta_hat, n, alpha));
    }
    Ok(report)
}
