//! Coverage experiments: replicate trials per grid cell, build both
//! confidence intervals for `theta_1` and count how often each covers the
//! ground-truth projection `theta*_1`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CellKey, StudyConfig, TrialConfig};
use crate::error::{Error, Result};
use crate::estimators::fit_theta;
use crate::linalg::max_abs;
use crate::rng::{SeedPlan, ORACLE_REP_BASE};
use crate::simulator::{run_pooled_summary, run_trial};
use crate::variance::{adaptive_sandwich_with, check_equivalence, confidence_interval, sandwich, weight_products};

pub const COVERAGE_CSV: &str = "coverage.csv";
pub const COVERAGE_JSON: &str = "coverage.json";
/// Smallest allowed oracle sample size.
pub const MIN_ORACLE_N: usize = 100_000;
/// Abort fraction above which a cell is flagged unhealthy.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

/// Everything recorded about one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: u32,
    pub theta_hat: Vec<f64>,
    /// Standard errors of `theta_hat_1`.
    pub se_sandwich: f64,
    pub se_adaptive: f64,
    pub covered_sandwich: Option<bool>,
    pub covered_adaptive: Option<bool>,
    pub invariance_norms: Vec<f64>,
    pub equivalence_gap: f64,
    /// Max-abs difference between the two covariance matrices relative to
    /// the largest sandwich entry.
    pub cov_rel_diff: f64,
}

/// Simulates, estimates and builds both intervals for one replication.
/// `theta_star` is needed only for the coverage indicators.
pub fn run_rep(config: &TrialConfig, plan: SeedPlan, theta_star: Option<&[f64]>, alpha: f64) -> Result<RepOutcome> {
    let traj = run_trial(config, plan)?;
    let est = fit_theta(&traj)?;
    let sw = sandwich(&est)?;
    let weights = weight_products(&traj)?;
    let ad = adaptive_sandwich_with(&est, &weights)?;
    let gap = check_equivalence(&est, &ad)?;

    let j = config.state_dim;
    let n = config.n_users as f64;
    let theta1 = est.theta_hat[j];
    let se_sandwich = (sw[(j, j)].max(0.0) / n).sqrt();
    let se_adaptive = (ad.cov[(j, j)].max(0.0) / n).sqrt();
    let covers = |se: f64| {
        theta_star.map(|ts| {
            let (lo, hi) = confidence_interval(theta1, se, alpha);
            lo <= ts[j] && ts[j] <= hi
        })
    };
    let cov_rel_diff = max_abs(&(&ad.cov - &sw)) / max_abs(&sw).max(f64::MIN_POSITIVE);
    Ok(RepOutcome {
        rep: plan.rep_index,
        covered_sandwich: covers(se_sandwich),
        covered_adaptive: covers(se_adaptive),
        theta_hat: est.theta_hat,
        se_sandwich,
        se_adaptive,
        invariance_norms: ad.invariance_norms,
        equivalence_gap: gap,
        cov_rel_diff,
    })
}

/// Aggregate coverage of one `(kappa1, rho, n)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub kappa1: f64,
    pub rho: f64,
    pub n: usize,
    pub reps_requested: usize,
    pub reps_completed: usize,
    pub reps_aborted: usize,
    pub coverage_sandwich: f64,
    pub coverage_adaptive: f64,
    pub mc_se_sandwich: f64,
    pub mc_se_adaptive: f64,
    pub theta_star_1: f64,
    /// False when more than 1% of replications aborted.
    pub healthy: bool,
}

/// Binomial Monte Carlo standard error `sqrt(p (1 - p) / reps)`.
pub fn mc_se(p: f64, reps: usize) -> f64 {
    if reps == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / reps as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: CoverageCell,
    pub outcomes: Vec<RepOutcome>,
    /// `(rep, message)` for each aborted replication.
    pub aborted: Vec<(u32, String)>,
}

impl CellRun {
    /// Mean of each `||V_{T,t}||_F` over completed replications.
    pub fn mean_invariance_norms(&self) -> Vec<f64> {
        mean_profile(self.outcomes.iter().map(|o| o.invariance_norms.as_slice()))
    }
}

pub(crate) fn mean_profile<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        count += 1;
    }
    sum.iter().map(|s| s / count.max(1) as f64).collect()
}

/// Runs replications `first_rep..first_rep + reps` of one cell in parallel.
/// Numerical failures abort a replication; other errors abort the cell.
pub fn run_cell_reps(config: &TrialConfig, first_rep: u32, reps: usize, theta_star: &[f64], alpha: f64) -> Result<CellRun> {
    config.validate()?;
    if theta_star.len() != config.theta_dim() {
        return Err(Error::Usage(format!(
            "theta_star has length {}, expected {}",
            theta_star.len(),
            config.theta_dim()
        )));
    }
    let results: Vec<Result<RepOutcome>> = (0..reps as u32)
        .into_par_iter()
        .map(|r| run_rep(config, SeedPlan::new(config.master_seed, first_rep + r), Some(theta_star), alpha))
        .collect();

    let mut outcomes = Vec::with_capacity(reps);
    let mut aborted = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) if e.is_numerical() => {
                log::debug!("rep {} aborted: {e}", first_rep + r as u32);
                aborted.push((first_rep + r as u32, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let completed = outcomes.len();
    let count = |f: fn(&RepOutcome) -> Option<bool>| outcomes.iter().filter(|o| f(o) == Some(true)).count();
    let p_s = if completed > 0 { count(|o| o.covered_sandwich) as f64 / completed as f64 } else { f64::NAN };
    let p_a = if completed > 0 { count(|o| o.covered_adaptive) as f64 / completed as f64 } else { f64::NAN };
    let cell = CoverageCell {
        kappa1: config.env.kappa1,
        rho: config.policy.rho,
        n: config.n_users,
        reps_requested: reps,
        reps_completed: completed,
        reps_aborted: aborted.len(),
        coverage_sandwich: p_s,
        coverage_adaptive: p_a,
        mc_se_sandwich: mc_se(p_s, completed),
        mc_se_adaptive: mc_se(p_a, completed),
        theta_star_1: theta_star[config.state_dim],
        healthy: (aborted.len() as f64) <= MAX_ABORT_FRACTION * reps as f64,
    };
    if !cell.healthy {
        log::warn!(
            "cell kappa1={} rho={} n={}: {} of {reps} replications aborted",
            cell.kappa1,
            cell.rho,
            cell.n,
            cell.reps_aborted
        );
    }
    Ok(CellRun { cell, outcomes, aborted })
}

/// Replications `0..reps` of one cell.
pub fn run_cell(config: &TrialConfig, reps: usize, theta_star: &[f64], alpha: f64) -> Result<CellRun> {
    run_cell_reps(config, 0, reps, theta_star, alpha)
}

/// Memoized ground-truth projections keyed by everything that determines them.
#[derive(Debug, Default)]
pub struct ThetaStarCache {
    entries: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl ThetaStarCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The key ignores `n_users`: the projection is a population quantity.
    pub fn key(config: &TrialConfig, oracle_n: usize, plan: SeedPlan) -> String {
        let mut c = config.clone();
        c.n_users = oracle_n;
        c.master_seed = plan.master_seed;
        format!("{}|rep={}", c.to_toml_string().replace('\n', ";"), plan.rep_index)
    }

    pub fn get_or_compute(&self, config: &TrialConfig, oracle_n: usize, plan: SeedPlan) -> Result<Vec<f64>> {
        let key = Self::key(config, oracle_n, plan);
        if let Some(v) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = estimate_theta_star(config, oracle_n, plan)?;
        self.entries.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key/value pairs, for writing alongside results.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries.lock().expect("cache lock").clone()
    }
}

/// Default oracle seed plan for a master seed.
pub fn oracle_plan(master_seed: u64) -> SeedPlan {
    SeedPlan::new(master_seed, ORACLE_REP_BASE)
}

/// `theta_hat` from one trial with `oracle_n` users, used as `theta*`.
pub fn estimate_theta_star(config: &TrialConfig, oracle_n: usize, plan: SeedPlan) -> Result<Vec<f64>> {
    if oracle_n < MIN_ORACLE_N {
        return Err(Error::Usage(format!("oracle_n must be at least {MIN_ORACLE_N}, got {oracle_n}")));
    }
    let mut c = config.clone();
    c.n_users = oracle_n;
    Ok(run_pooled_summary(&c, plan)?.theta_hat)
}

/// Options for a grid run.
#[derive(Debug, Clone, Copy)]
pub struct GridOptions {
    pub reps: usize,
    pub oracle_n: usize,
    pub alpha: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            reps: 500,
            oracle_n: MIN_ORACLE_N,
            alpha: 0.05,
        }
    }
}

/// Runs every cell of a study, computing or reusing `theta*` per cell.
/// `progress` is called after each finished cell.
pub fn run_grid<F>(study: &StudyConfig, opts: GridOptions, cache: &ThetaStarCache, mut progress: F) -> Result<Vec<CellRun>>
where
    F: FnMut(&CellKey, &CellRun),
{
    let seed = study.base.master_seed;
    let mut out = Vec::new();
    for key in study.cells() {
        let cfg = study.base.for_cell(&key);
        let theta_star = cache.get_or_compute(&cfg, opts.oracle_n, oracle_plan(seed))?;
        let run = run_cell(&cfg, opts.reps, &theta_star, opts.alpha)?;
        progress(&key, &run);
        out.push(run);
    }
    Ok(out)
}

const TABLE_HEADER: [&str; 9] = [
    "kappa1",
    "rho",
    "n",
    "sandwich_cov",
    "sandwich_se",
    "adaptive_cov",
    "adaptive_se",
    "reps",
    "aborted",
];

fn sorted(cells: &[CoverageCell]) -> Vec<CoverageCell> {
    let mut v = cells.to_vec();
    v.sort_by(|a, b| {
        a.kappa1
            .total_cmp(&b.kappa1)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.n.cmp(&b.n))
    });
    v
}

/// Writes `coverage.csv` and `coverage.json` into `dir`, rows sorted by
/// `(kappa1, rho, n)`. The CSV `reps` column is the completed count.
pub fn emit_table(cells: &[CoverageCell], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = sorted(cells);
    let csv_path = dir.join(COVERAGE_CSV);
    let mut text = TABLE_HEADER.join(",");
    text.push('\n');
    for c in &rows {
        let fields = [
            c.kappa1.to_string(),
            c.rho.to_string(),
            c.n.to_string(),
            c.coverage_sandwich.to_string(),
            c.mc_se_sandwich.to_string(),
            c.coverage_adaptive.to_string(),
            c.mc_se_adaptive.to_string(),
            c.reps_completed.to_string(),
            c.reps_aborted.to_string(),
        ];
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;

    let json_path = dir.join(COVERAGE_JSON);
    let json = serde_json::to_string_pretty(&rows).expect("cells serialize");
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
}

/// Reads a table written by [`emit_table`].
pub fn read_table(dir: &Path) -> Result<Vec<CoverageCell>> {
    let path = dir.join(COVERAGE_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))
}
