//! Trial configuration and its TOML representation.
//!
//! ```toml
//! n_users = 500
//! horizon_T = 50
//! state_dim = 2
//! master_seed = 42
//!
//! [policy]
//! kind = "boltzmann"      # boltzmann | mirror_descent | constant_uniform
//! rho = 5.0
//! pi_min = 0.1
//! # eta = 0.5             # mirror_descent: scalar or per-time list
//!
//! [env]
//! kappa0 = 0.0
//! kappa1 = 5.0
//! kappa2 = 0.0
//! gamma = 0.95
//! error_corr_base = 0.5
//!
//! [grid]                  # optional, Monte Carlo only
//! kappa1 = [1.0, 5.0]
//! rho = [0.5, 1.0, 5.0]
//! n_users = [50, 100, 500]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environment::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::PolicySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub n_users: usize,
    #[serde(rename = "horizon_T", alias = "horizon_t", alias = "horizon")]
    pub horizon: usize,
    /// Length of the state vector. 1 gives `[1]`, 2 gives `[1, R_{t-1}]`.
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_policy")]
    pub policy: PolicySpec,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_state_dim() -> usize {
    2
}

fn default_policy() -> PolicySpec {
    PolicySpec::boltzmann(1.0, 0.1)
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::Config(format!("n_users must be >= 2, got {}", self.n_users)));
        }
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon_T must be >= 2, got {}", self.horizon)));
        }
        if !(1..=2).contains(&self.state_dim) {
            return Err(Error::Config(format!(
                "state_dim must be 1 ([1]) or 2 ([1, R_(t-1)]), got {}",
                self.state_dim
            )));
        }
        self.policy.validate(self.horizon)?;
        self.env.validate()
    }

    /// Dimension of each policy parameter `beta_t`.
    pub fn beta_dim(&self) -> usize {
        2 * self.state_dim
    }

    /// Dimension of the inferential parameter `theta`.
    pub fn theta_dim(&self) -> usize {
        self.state_dim + 1
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrialConfig = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("trial config serializes")
    }

    /// The same trial with one grid cell's `(kappa1, rho, n)` substituted.
    pub fn for_cell(&self, cell: &CellKey) -> TrialConfig {
        let mut cfg = self.clone();
        cfg.env.kappa1 = cell.kappa1;
        cfg.policy.rho = cell.rho;
        cfg.n_users = cell.n_users;
        cfg
    }
}

/// One Monte Carlo cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub kappa1: f64,
    pub rho: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub kappa1: Vec<f64>,
    pub rho: Vec<f64>,
    pub n_users: Vec<usize>,
}

impl Grid {
    /// Cells in `(kappa1, rho, n)` lexicographic order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::with_capacity(self.kappa1.len() * self.rho.len() * self.n_users.len());
        for &kappa1 in &self.kappa1 {
            for &rho in &self.rho {
                for &n_users in &self.n_users {
                    out.push(CellKey { kappa1, rho, n_users });
                }
            }
        }
        out
    }
}

/// A base trial plus an optional grid of cells to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub base: TrialConfig,
    pub grid: Option<Grid>,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let grid = match table.remove("grid") {
            Some(v) => Some(v.try_into::<Grid>().map_err(|e| Error::parse(origin, e))?),
            None => None,
        };
        let base: TrialConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::parse(origin, e))?;
        base.validate()?;
        let study = StudyConfig { base, grid };
        for cell in study.cells() {
            study.base.for_cell(&cell).validate()?;
        }
        Ok(study)
    }

    /// Loads a config file, or a bundled preset when `spec` names one and no
    /// such file exists.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if let Some(text) = preset(spec) {
                return Self::from_toml_str(text, path);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn cells(&self) -> Vec<CellKey> {
        match &self.grid {
            Some(g) => g.cells(),
            None => vec![CellKey {
                kappa1: self.base.env.kappa1,
                rho: self.base.policy.rho,
                n_users: self.base.n_users,
            }],
        }
    }

    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(&self.base).expect("trial config serializes");
        if let Some(g) = &self.grid {
            table.insert("grid".into(), toml::Value::try_from(g).expect("grid serializes"));
        }
        toml::to_string(&table).expect("study config serializes")
    }
}

pub const TABLE1_GRID: &str = r#"
n_users = 500
horizon_T = 50
state_dim = 2
master_seed = 42

[policy]
kind = "boltzmann"
rho = 1.0
pi_min = 0.1

[env]
kappa0 = 0.0
kappa1 = 1.0
kappa2 = 0.0
gamma = 0.95
error_corr_base = 0.5

[grid]
kappa1 = [1.0, 5.0]
rho = [0.5, 1.0, 5.0]
n_users = [50, 100, 500]
"#;

pub const UNIFORM_CONTROL: &str = r#"
n_users = 500
horizon_T = 50
state_dim = 2
master_seed = 42

[policy]
kind = "constant_uniform"
pi_min = 0.1

[env]
kappa1 = 1.0
"#;

/// Bundled configurations by name.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "paper_table1" => Some(TABLE1_GRID),
        "uniform_control" => Some(UNIFORM_CONTROL),
        _ => None,
    }
}

/// Base config of the bundled Table 1 grid with the given cell substituted.
pub fn table1_cell(kappa1: f64, rho: f64, n_users: usize) -> TrialConfig {
    let study = StudyConfig::from_toml_str(TABLE1_GRID, Path::new("paper_table1")).expect("bundled preset parses");
    study.base.for_cell(&CellKey { kappa1, rho, n_users })
}
