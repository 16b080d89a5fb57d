//! Radon-Nikodym weights `W_t(beta, beta') = pi_t(A_t, S_t; beta) / pi_t(A_t, S_t; beta')`
//! and their gradients at `beta = beta' = beta_hat`.
//!
//! At the evaluation point every ratio is exactly 1, so the gradient of the
//! product `W_{2:t}` is the sum of the per-time terms
//! `grad pi_u(A_u, S_u; beta_hat) / pi_hat_u(A_u, S_u)` for `u = 2..t`.

use crate::error::{Error, Result};
use crate::policy::{history_prob1, history_prob_grad, PolicyParams};
use crate::trajectory::{TrajectorySet, PROB_TOLERANCE};

/// Largest tolerated gap between a stored action probability and its replay.
pub const REPLAY_TOLERANCE: f64 = 1e-12;

/// Sparse per-user, per-time weight-gradient terms.
#[derive(Debug, Clone)]
pub struct WeightEval {
    pub n_users: usize,
    pub horizon: usize,
    pub n_betas: usize,
    pub beta_dim: usize,
    /// `offsets[i * T + t]..offsets[i * T + t + 1]` indexes the terms of
    /// user `i` at 0-based time `t`.
    offsets: Vec<usize>,
    term_block: Vec<usize>,
    term_grad: Vec<f64>,
}

impl WeightEval {
    /// Calls `f(block, grad_over_pi)` for every nonzero term of user `i` at
    /// 0-based time `t`. `block` is 0-based (`block k` is `beta_{k+1}`).
    #[inline]
    pub fn for_each_term<F: FnMut(usize, &[f64])>(&self, user: usize, t: usize, mut f: F) {
        let at = user * self.horizon + t;
        let q = self.beta_dim;
        for k in self.offsets[at]..self.offsets[at + 1] {
            f(self.term_block[k], &self.term_grad[k * q..(k + 1) * q]);
        }
    }

    /// `W_t(beta_hat, beta_hat)`; identically one.
    pub fn ratio_at_estimate(&self, _user: usize, _t: usize) -> f64 {
        1.0
    }

    /// Dense gradient of `W_{2:t}(beta, beta_hat)` at `beta_hat` for user `i`,
    /// `t` a 1-based decision time. Layout: `n_betas` blocks of `beta_dim`.
    pub fn product_gradient(&self, user: usize, t: usize) -> Vec<f64> {
        let q = self.beta_dim;
        let mut out = vec![0.0; self.n_betas * q];
        for tau in 1..t.min(self.horizon) {
            self.for_each_term(user, tau, |s, g| {
                for (o, v) in out[s * q..(s + 1) * q].iter_mut().zip(g) {
                    *o += v;
                }
            });
        }
        out
    }

    /// True when every gradient term is zero.
    pub fn is_zero(&self) -> bool {
        self.term_grad.iter().all(|&g| g == 0.0)
    }
}

/// Evaluates weight gradients for every user and decision time, checking
/// the stored action probabilities against the floor and their replay.
pub fn weight_products(traj: &TrajectorySet) -> Result<WeightEval> {
    let n = traj.n_users;
    let horizon = traj.horizon;
    let q = traj.beta_dim();
    let spec = &traj.policy;
    let floor = spec.pi_min;
    let mut offsets = Vec::with_capacity(n * horizon + 1);
    offsets.push(0);
    let mut term_block = Vec::new();
    let mut term_grad = Vec::new();

    for i in 0..n {
        for t in 0..horizon {
            let stored = traj.action_prob(i, t);
            if !(stored >= floor - PROB_TOLERANCE) {
                return Err(Error::DataIntegrity(format!(
                    "action_prob {stored} below pi_min {floor} at user {i}, t {}",
                    t + 1
                )));
            }
            let history: &[PolicyParams] = &traj.beta_hats[..t];
            let state = traj.state(i, t);
            let action = traj.action(i, t);
            let p1 = history_prob1(spec, history, state);
            let replay = if action == 1 { p1 } else { 1.0 - p1 };
            if (replay - stored).abs() > REPLAY_TOLERANCE {
                return Err(Error::DataIntegrity(format!(
                    "stored action_prob {stored} differs from replayed {replay} at user {i}, t {}",
                    t + 1
                )));
            }
            let inv = 1.0 / stored;
            history_prob_grad(spec, history, state, action, |s, g| {
                term_block.push(s);
                term_grad.extend(g.iter().map(|v| v * inv));
            });
            offsets.push(term_block.len());
        }
    }
    debug_assert_eq!(term_grad.len(), term_block.len() * q);

    Ok(WeightEval {
        n_users: n,
        horizon,
        n_betas: traj.beta_hats.len(),
        beta_dim: q,
        offsets,
        term_block,
        term_grad,
    })
}

/// `W_{2:t}(beta, beta_hat)` for user `i` with an arbitrary parameter
/// history `betas` in place of the estimates (`t` 1-based).
pub fn product_ratio(traj: &TrajectorySet, user: usize, t: usize, betas: &[PolicyParams]) -> f64 {
    let mut w = 1.0;
    for tau in 1..t {
        let s = traj.state(user, tau);
        let a = traj.action(user, tau);
        let p1 = history_prob1(&traj.policy, &betas[..tau], s);
        let p = if a == 1 { p1 } else { 1.0 - p1 };
        w *= p / traj.action_prob(user, tau);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::table1_cell;
    use crate::policy::PolicySpec;
    use crate::rng::SeedPlan;
    use crate::simulator::run_trial;

    fn small(policy: PolicySpec) -> TrajectorySet {
        let mut cfg = table1_cell(1.0, 1.0, 30);
        cfg.horizon = 6;
        cfg.policy = policy;
        run_trial(&cfg, SeedPlan::new(11, 0)).unwrap()
    }

    #[test]
    fn ratios_at_estimate_are_one() {
        let traj = small(PolicySpec::boltzmann(1.0, 0.1));
        for i in 0..traj.n_users {
            for t in 1..=traj.horizon {
                assert_eq!(product_ratio(&traj, i, t, &traj.beta_hats), 1.0);
            }
        }
    }

    #[test]
    fn constant_uniform_has_zero_gradients() {
        let traj = small(PolicySpec::constant_uniform(0.1));
        assert!(weight_products(&traj).unwrap().is_zero());
    }

    fn fd_check(traj: &TrajectorySet) {
        let w = weight_products(traj).unwrap();
        let q = traj.beta_dim();
        let h = 1e-6;
        for i in 0..5 {
            let grad = w.product_gradient(i, traj.horizon);
            for s in 0..traj.beta_hats.len() {
                for j in 0..q {
                    let mut up = traj.beta_hats.clone();
                    let mut dn = traj.beta_hats.clone();
                    let mut v = up[s].stacked();
                    v[j] += h;
                    up[s] = PolicyParams::from_stacked(&v);
                    v[j] -= 2.0 * h;
                    dn[s] = PolicyParams::from_stacked(&v);
                    let fd = (product_ratio(traj, i, traj.horizon, &up)
                        - product_ratio(traj, i, traj.horizon, &dn))
                        / (2.0 * h);
                    assert!((fd - grad[s * q + j]).abs() < 1e-6, "block {s} coord {j}: fd {fd} vs {}", grad[s * q + j]);
                }
            }
        }
    }

    #[test]
    fn boltzmann_gradient_matches_finite_difference() {
        fd_check(&small(PolicySpec::boltzmann(1.0, 0.1)));
    }

    #[test]
    fn mirror_descent_gradient_matches_finite_difference() {
        fd_check(&small(PolicySpec::mirror_descent(vec![0.2], 0.1)));
    }

    #[test]
    fn corrupt_probability_is_rejected() {
        let mut traj = small(PolicySpec::boltzmann(1.0, 0.1));
        traj.action_probs[3] = 0.05;
        assert!(matches!(weight_products(&traj), Err(Error::DataIntegrity(_))));
        let mut traj = small(PolicySpec::boltzmann(1.0, 0.1));
        traj.action_probs[3] += 1e-6;
        assert!(matches!(weight_products(&traj), Err(Error::DataIntegrity(_))));
    }

    #[test]
    fn ratios_average_to_one_near_the_estimate() {
        let mut cfg = table1_cell(5.0, 2.0, 2000);
        cfg.horizon = 10;
        let traj = run_trial(&cfg, SeedPlan::new(17, 0)).unwrap();
        let shifted: Vec<PolicyParams> = traj
            .beta_hats
            .iter()
            .map(|b| PolicyParams::from_stacked(&b.stacked().iter().map(|v| v + 0.05).collect::<Vec<_>>()))
            .collect();
        let w: Vec<f64> = (0..traj.n_users).map(|i| product_ratio(&traj, i, traj.horizon, &shifted)).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(sd > 0.0);
        assert!((mean - 1.0).abs() <= 4.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
    }
}
