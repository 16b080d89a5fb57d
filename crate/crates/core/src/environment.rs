//! Reward generation with a delayed dosage effect and serially correlated
//! errors.
//!
//! `R_t = kappa0 + kappa1 * D_t / c_gamma + kappa2 * A_t + eps_t` where
//! `D_t = sum_{t' < t} gamma^{t-1-t'} A_{t'}` and `c_gamma = 1 / (1 - gamma)`.
//! Errors are standard normal with `Corr(eps_t, eps_s) = corr_base^{|t-s|/2}`
//! within a user and independent across users.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default)]
    pub kappa0: f64,
    #[serde(default = "default_kappa1")]
    pub kappa1: f64,
    #[serde(default)]
    pub kappa2: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_corr_base")]
    pub error_corr_base: f64,
}

fn default_kappa1() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.95
}
fn default_corr_base() -> f64 {
    0.5
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kappa0: 0.0,
            kappa1: default_kappa1(),
            kappa2: 0.0,
            gamma: default_gamma(),
            error_corr_base: default_corr_base(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("env.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.error_corr_base > 0.0 && self.error_corr_base < 1.0) {
            return Err(Error::Config(format!(
                "env.error_corr_base must lie in (0, 1), got {}",
                self.error_corr_base
            )));
        }
        for (name, v) in [("kappa0", self.kappa0), ("kappa1", self.kappa1), ("kappa2", self.kappa2)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("env.{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn c_gamma(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }
}

/// Running discounted dosage of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DosageState {
    pub value: f64,
    pub gamma: f64,
}

impl DosageState {
    pub fn new(gamma: f64) -> Self {
        Self { value: 0.0, gamma }
    }

    /// Dosage divided by `c_gamma`; always in `[0, 1]`.
    pub fn normalized(&self) -> f64 {
        self.value * (1.0 - self.gamma)
    }

    pub fn advance(&mut self, action: u8) {
        self.value = dosage_update(self.value, action, self.gamma);
    }
}

pub fn dosage_update(d_prev: f64, a_prev: u8, gamma: f64) -> f64 {
    gamma * d_prev + f64::from(a_prev)
}

pub fn reward(env: &EnvConfig, dosage_norm: f64, action: u8, eps: f64) -> f64 {
    env.kappa0 + env.kappa1 * dosage_norm + env.kappa2 * f64::from(action) + eps
}

/// Stationary AR(1) error process advanced one decision time at a time for
/// all users: `e_1 ~ N(0,1)`, `e_t = a e_{t-1} + sqrt(1-a^2) v_t`.
///
/// Draws are consumed time-major (all users at t=1, then t=2, ...).
#[derive(Debug, Clone)]
pub struct ErrorProcess {
    ar: f64,
    innovation_sd: f64,
    current: Vec<f64>,
    started: bool,
}

impl ErrorProcess {
    /// Process whose lag-k correlation is `corr_base^{k/2}`.
    pub fn new(n_users: usize, corr_base: f64) -> Self {
        Self::with_ar_coefficient(n_users, corr_base.sqrt())
    }

    pub fn with_ar_coefficient(n_users: usize, ar: f64) -> Self {
        assert!((0.0..1.0).contains(&ar), "AR coefficient must lie in [0, 1)");
        Self {
            ar,
            innovation_sd: (1.0 - ar * ar).sqrt(),
            current: vec![0.0; n_users],
            started: false,
        }
    }

    pub fn next_column<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        if self.started {
            for e in &mut self.current {
                let v: f64 = rng.sample(StandardNormal);
                *e = self.ar * *e + self.innovation_sd * v;
            }
        } else {
            for e in &mut self.current {
                *e = rng.sample(StandardNormal);
            }
            self.started = true;
        }
        &self.current
    }
}

/// `n x T` matrix of errors (row = user).
pub fn generate_errors<R: Rng + ?Sized>(stream: &mut R, n: usize, horizon: usize, corr_base: f64) -> DMatrix<f64> {
    generate_with(ErrorProcess::new(n, corr_base), stream, horizon)
}

/// As [`generate_errors`] but parameterized by the AR coefficient directly,
/// which admits the independent case `ar = 0`.
pub fn generate_errors_ar<R: Rng + ?Sized>(stream: &mut R, n: usize, horizon: usize, ar: f64) -> DMatrix<f64> {
    generate_with(ErrorProcess::with_ar_coefficient(n, ar), stream, horizon)
}

fn generate_with<R: Rng + ?Sized>(mut process: ErrorProcess, stream: &mut R, horizon: usize) -> DMatrix<f64> {
    let n = process.current.len();
    let mut out = DMatrix::zeros(n, horizon);
    for t in 0..horizon {
        let col = process.next_column(stream);
        for (i, e) in col.iter().enumerate() {
            out[(i, t)] = *e;
        }
    }
    out
}
