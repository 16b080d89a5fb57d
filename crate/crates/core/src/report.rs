//! The `estimate.json` document.
//!
//! Keys:
//!
//! * `n_users`, `horizon_T`, `state_dim`, `psi_scale` (`unscaled` or `per_decision`)
//! * `theta_hat`: `[theta_0 (d_S entries), theta_1]`
//! * `psi_residual_norm`: sup-norm of `(1/n) sum_i psi_i(theta_hat)`
//! * `beta_hats`: one stacked `[beta_0; beta_1]` per decision time `1..T-1`
//! * `variance.alpha`, `variance.stacked_dim`
//! * `variance.sandwich`, `variance.adaptive`: `null` when not requested, else
//!   `cov` (row-major, variance of `sqrt(n) (theta_hat - theta*)`),
//!   `se` (`sqrt(diag(cov) / n)`) and `ci` (`[lo, hi]` per coordinate)
//! * `variance.policy_invariance_norms`: `||V_{T,t}||_F` for `t = 1..T-1`
//! * `variance.equivalence_gap`: relative gap between the stacked and
//!   corrected-meat forms of the adaptive covariance

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimationResult, PsiScale};
use crate::linalg::to_rows;
use crate::trajectory::TrajectorySet;
use crate::variance::{CovarianceSummary, VarianceReport};

pub const ESTIMATE_FILE: &str = "estimate.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDoc {
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci: Vec<[f64; 2]>,
}

impl From<&CovarianceSummary> for CovarianceDoc {
    fn from(s: &CovarianceSummary) -> Self {
        Self {
            cov: to_rows(&s.cov),
            se: s.se.clone(),
            ci: s.ci.iter().map(|&(lo, hi)| [lo, hi]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDoc {
    pub alpha: f64,
    pub stacked_dim: usize,
    pub sandwich: Option<CovarianceDoc>,
    pub adaptive: Option<CovarianceDoc>,
    pub policy_invariance_norms: Vec<f64>,
    pub equivalence_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateDoc {
    pub n_users: usize,
    #[serde(rename = "horizon_T")]
    pub horizon: usize,
    pub state_dim: usize,
    pub psi_scale: PsiScale,
    pub theta_hat: Vec<f64>,
    pub psi_residual_norm: f64,
    pub beta_hats: Vec<Vec<f64>>,
    pub variance: VarianceDoc,
}

impl EstimateDoc {
    pub fn new(traj: &TrajectorySet, est: &EstimationResult, var: &VarianceReport) -> Self {
        Self {
            n_users: traj.n_users,
            horizon: traj.horizon,
            state_dim: traj.state_dim,
            psi_scale: est.scale,
            theta_hat: est.theta_hat.clone(),
            psi_residual_norm: est.psi_residual_norm,
            beta_hats: est.beta_hats.clone(),
            variance: VarianceDoc {
                alpha: var.alpha,
                stacked_dim: var.stacked_dim,
                sandwich: var.sandwich.as_ref().map(CovarianceDoc::from),
                adaptive: var.adaptive.as_ref().map(CovarianceDoc::from),
                policy_invariance_norms: var.policy_invariance_norms.clone(),
                equivalence_gap: var.equivalence_gap,
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ESTIMATE_FILE);
        let text = serde_json::to_string_pretty(self).expect("estimate serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(ESTIMATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))
    }
}
