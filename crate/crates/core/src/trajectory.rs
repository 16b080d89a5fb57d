//! Trial data: per-user states, actions, rewards and sampling probabilities
//! for every decision time, plus the policy parameter estimates used along
//! the way.
//!
//! On disk a trajectory set is two files in one directory:
//!
//! * `trajectories.csv` with header
//!   `user,t,state_0,..,state_{d-1},action,reward,action_prob` (`t` 1-based);
//! * `betas.json`, a sidecar holding dimensions, the policy spec and the
//!   stacked `beta_hats`.
//!
//! Floats are written with their shortest round-trip representation, so a
//! reload is bit-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{history_prob1, PolicyParams, PolicySpec};

pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const BETAS_FILE: &str = "betas.json";

/// Slack on the exploration-floor check for rounding in `1 - p`.
pub const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub n_users: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub policy: PolicySpec,
    /// `n * T * d_S`, user-major then time.
    pub states: Vec<f64>,
    /// `n * T`, entries 0 or 1.
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    /// Probability of the realized action at sampling time.
    pub action_probs: Vec<f64>,
    /// `beta_hats[k]` is the estimate fit on decision times `1..=k+1` and
    /// used by the policy at decision time `k + 2`.
    pub beta_hats: Vec<PolicyParams>,
}

impl TrajectorySet {
    pub fn empty(n_users: usize, horizon: usize, state_dim: usize, policy: PolicySpec) -> Self {
        Self {
            n_users,
            horizon,
            state_dim,
            policy,
            states: vec![0.0; n_users * horizon * state_dim],
            actions: vec![0; n_users * horizon],
            rewards: vec![0.0; n_users * horizon],
            action_probs: vec![0.0; n_users * horizon],
            beta_hats: Vec::with_capacity(horizon.saturating_sub(1)),
        }
    }

    #[inline]
    pub fn idx(&self, user: usize, t: usize) -> usize {
        user * self.horizon + t
    }

    /// State of `user` at 0-based time index `t`.
    #[inline]
    pub fn state(&self, user: usize, t: usize) -> &[f64] {
        let start = self.idx(user, t) * self.state_dim;
        &self.states[start..start + self.state_dim]
    }

    #[inline]
    pub fn action(&self, user: usize, t: usize) -> u8 {
        self.actions[self.idx(user, t)]
    }

    #[inline]
    pub fn reward(&self, user: usize, t: usize) -> f64 {
        self.rewards[self.idx(user, t)]
    }

    #[inline]
    pub fn action_prob(&self, user: usize, t: usize) -> f64 {
        self.action_probs[self.idx(user, t)]
    }

    pub fn theta_dim(&self) -> usize {
        self.state_dim + 1
    }

    pub fn beta_dim(&self) -> usize {
        2 * self.state_dim
    }

    /// Probability of action 1 the policy assigns at 0-based time `t`,
    /// recomputed from the stored parameter history.
    pub fn replay_prob1(&self, user: usize, t: usize) -> f64 {
        history_prob1(&self.policy, &self.beta_hats[..t], self.state(user, t))
    }

    /// Largest absolute difference between stored and replayed action
    /// probabilities.
    pub fn replay_max_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for i in 0..self.n_users {
            for t in 0..self.horizon {
                let p1 = self.replay_prob1(i, t);
                let p = if self.action(i, t) == 1 { p1 } else { 1.0 - p1 };
                gap = gap.max((p - self.action_prob(i, t)).abs());
            }
        }
        gap
    }

    /// Checks shapes and the stored-data invariants.
    pub fn validate(&self) -> Result<()> {
        let cells = self.n_users * self.horizon;
        if self.states.len() != cells * self.state_dim
            || self.actions.len() != cells
            || self.rewards.len() != cells
            || self.action_probs.len() != cells
        {
            return Err(Error::DataIntegrity("array lengths do not match n_users x horizon".into()));
        }
        if self.beta_hats.len() != self.horizon - 1 {
            return Err(Error::DataIntegrity(format!(
                "expected {} beta_hats, found {}",
                self.horizon - 1,
                self.beta_hats.len()
            )));
        }
        if let Some(b) = self.beta_hats.iter().find(|b| b.state_dim() != self.state_dim || b.beta0.len() != self.state_dim) {
            return Err(Error::DataIntegrity(format!(
                "beta_hat of dimension {} does not match state_dim {}",
                b.state_dim(),
                self.state_dim
            )));
        }
        // `1 - (1 - pi_min)` can land one ulp below the floor.
        let lo = self.policy.pi_min - PROB_TOLERANCE;
        let hi = 1.0 - self.policy.pi_min + PROB_TOLERANCE;
        for i in 0..self.n_users {
            for t in 0..self.horizon {
                let p = self.action_prob(i, t);
                if !(lo..=hi).contains(&p) {
                    return Err(Error::DataIntegrity(format!(
                        "action_prob {p} at user {i}, t {} outside [{lo}, {hi}]",
                        t + 1
                    )));
                }
                if self.action(i, t) > 1 {
                    return Err(Error::DataIntegrity(format!("non-binary action at user {i}, t {}", t + 1)));
                }
                if self.state(i, t)[0] != 1.0 {
                    return Err(Error::DataIntegrity(format!(
                        "state at user {i}, t {} does not start with 1",
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(TRAJECTORY_FILE);
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
        let mut header = vec!["user".to_string(), "t".to_string()];
        header.extend((0..self.state_dim).map(|k| format!("state_{k}")));
        header.extend(["action", "reward", "action_prob"].map(String::from));
        w.write_record(&header).map_err(|e| csv_err(&csv_path, e))?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.n_users {
            for t in 0..self.horizon {
                row.clear();
                row.push(i.to_string());
                row.push((t + 1).to_string());
                row.extend(self.state(i, t).iter().map(|x| x.to_string()));
                row.push(self.action(i, t).to_string());
                row.push(self.reward(i, t).to_string());
                row.push(self.action_prob(i, t).to_string());
                w.write_record(&row).map_err(|e| csv_err(&csv_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;

        let side = Sidecar {
            n_users: self.n_users,
            horizon: self.horizon,
            state_dim: self.state_dim,
            policy: self.policy.clone(),
            beta_hats: self.beta_hats.iter().map(PolicyParams::stacked).collect(),
        };
        let side_path = dir.join(BETAS_FILE);
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        std::fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let side_path = dir.join(BETAS_FILE);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&side_path, e))?;
        side.policy.validate(side.horizon)?;
        let mut traj = TrajectorySet::empty(side.n_users, side.horizon, side.state_dim, side.policy);
        for b in &side.beta_hats {
            if b.len() != traj.beta_dim() {
                return Err(Error::parse(&side_path, format!("beta_hat of length {} (expected {})", b.len(), traj.beta_dim())));
            }
            traj.beta_hats.push(PolicyParams::from_stacked(b));
        }

        let csv_path = dir.join(TRAJECTORY_FILE);
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
        let d = traj.state_dim;
        let expected_cols = 5 + d;
        let mut seen = vec![false; traj.n_users * traj.horizon];
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(&csv_path, e))?;
            if rec.len() != expected_cols {
                return Err(Error::parse(&csv_path, format!("row has {} columns, expected {expected_cols}", rec.len())));
            }
            let field = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|e| Error::parse(&csv_path, format!("{e} in {:?}", &rec[k])))
            };
            let user: usize = rec[0].parse().map_err(|e| Error::parse(&csv_path, e))?;
            let t: usize = rec[1].parse().map_err(|e| Error::parse(&csv_path, e))?;
            if user >= traj.n_users || t == 0 || t > traj.horizon {
                return Err(Error::parse(&csv_path, format!("(user {user}, t {t}) out of range")));
            }
            let at = traj.idx(user, t - 1);
            seen[at] = true;
            for k in 0..d {
                traj.states[at * d + k] = field(2 + k)?;
            }
            traj.actions[at] = rec[2 + d].parse().map_err(|e| Error::parse(&csv_path, e))?;
            traj.rewards[at] = field(3 + d)?;
            traj.action_probs[at] = field(4 + d)?;
        }
        if let Some(miss) = seen.iter().position(|s| !s) {
            return Err(Error::parse(
                &csv_path,
                format!("missing row for user {}, t {}", miss / traj.horizon, miss % traj.horizon + 1),
            ));
        }
        traj.validate()?;
        Ok(traj)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    n_users: usize,
    horizon: usize,
    state_dim: usize,
    policy: PolicySpec,
    beta_hats: Vec<Vec<f64>>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(PathBuf::from(path), io),
            other => Error::parse(path, format!("{other:?}")),
        }
    } else {
        Error::parse(path, e)
    }
}
