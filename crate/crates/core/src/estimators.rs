//! Least-squares estimating functions and their Z-estimators.
//!
//! Inferential function for one user's full trajectory:
//! `psi(H_T; theta) = c * sum_t (R_t - theta_0' S_t - theta_1 A_t) [S_t; A_t]`
//! with `c = 1` by default or `1/T` under [`PsiScale::PerDecision`].
//!
//! Policy-parameter function for the history through decision time `t`:
//! `phi_t(H_t; beta) = sum_{t' <= t} (R_t' - beta_0' S_t' - A_t' beta_1' S_t') [S_t'; A_t' S_t']`.
//!
//! Both are linear in their parameter, so roots come from normal equations
//! and Jacobians are parameter-free.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::NormalEquations;
use crate::policy::PolicyParams;
use crate::trajectory::TrajectorySet;

/// Constant multiplying `psi`. It cancels in `theta_hat` and in both
/// sandwich variance estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiScale {
    #[default]
    Unscaled,
    PerDecision,
}

impl PsiScale {
    pub fn factor(self, horizon: usize) -> f64 {
        match self {
            PsiScale::Unscaled => 1.0,
            PsiScale::PerDecision => 1.0 / horizon as f64,
        }
    }
}

/// `[S; A]`.
#[inline]
pub fn inference_regressor(state: &[f64], action: u8, out: &mut [f64]) {
    let d = state.len();
    out[..d].copy_from_slice(state);
    out[d] = f64::from(action);
}

/// `[S; A S]`.
#[inline]
pub fn policy_regressor(state: &[f64], action: u8, out: &mut [f64]) {
    let d = state.len();
    out[..d].copy_from_slice(state);
    let a = f64::from(action);
    for (o, s) in out[d..].iter_mut().zip(state) {
        *o = a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `psi` for one user at `theta`.
pub fn psi(traj: &TrajectorySet, user: usize, theta: &[f64], scale: PsiScale) -> Vec<f64> {
    let p = traj.theta_dim();
    assert_eq!(theta.len(), p, "theta has wrong length");
    let c = scale.factor(traj.horizon);
    let mut x = vec![0.0; p];
    let mut out = vec![0.0; p];
    for t in 0..traj.horizon {
        inference_regressor(traj.state(user, t), traj.action(user, t), &mut x);
        let resid = traj.reward(user, t) - dot(&x, theta);
        for (o, xj) in out.iter_mut().zip(&x) {
            *o += resid * xj;
        }
    }
    out.iter_mut().for_each(|o| *o *= c);
    out
}

/// `phi_t` for one user at `beta` (`t` is a 1-based decision time).
pub fn phi_t(traj: &TrajectorySet, user: usize, t: usize, beta: &[f64]) -> Vec<f64> {
    let q = traj.beta_dim();
    assert_eq!(beta.len(), q, "beta has wrong length");
    assert!(t >= 1 && t <= traj.horizon, "t outside 1..=T");
    let mut x = vec![0.0; q];
    let mut out = vec![0.0; q];
    for tau in 0..t {
        policy_regressor(traj.state(user, tau), traj.action(user, tau), &mut x);
        let resid = traj.reward(user, tau) - dot(&x, beta);
        for (o, xj) in out.iter_mut().zip(&x) {
            *o += resid * xj;
        }
    }
    out
}

/// `(1/n) sum_i d psi / d theta`, i.e. `-(c/n) sum_i sum_t [S;A][S;A]'`.
pub fn jacobian_psi_theta(traj: &TrajectorySet, scale: PsiScale) -> DMatrix<f64> {
    let p = traj.theta_dim();
    let mut ne = NormalEquations::new(p);
    let mut x = vec![0.0; p];
    for i in 0..traj.n_users {
        for t in 0..traj.horizon {
            inference_regressor(traj.state(i, t), traj.action(i, t), &mut x);
            ne.add(&x, 0.0);
        }
    }
    ne.gram() * (-scale.factor(traj.horizon) / traj.n_users as f64)
}

/// `(1/n) sum_i d phi_t / d beta` for a 1-based decision time `t`.
pub fn jacobian_phi_beta(traj: &TrajectorySet, t: usize) -> DMatrix<f64> {
    let q = traj.beta_dim();
    let mut ne = NormalEquations::new(q);
    let mut x = vec![0.0; q];
    for i in 0..traj.n_users {
        for tau in 0..t {
            policy_regressor(traj.state(i, tau), traj.action(i, tau), &mut x);
            ne.add(&x, 0.0);
        }
    }
    ne.gram() * (-1.0 / traj.n_users as f64)
}

/// Per-user estimating-function values at the estimates, plus the
/// diagonal Jacobian blocks, cached for the variance estimators.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub n_users: usize,
    pub theta_dim: usize,
    pub beta_dim: usize,
    /// Number of policy parameters, `T - 1`.
    pub n_betas: usize,
    /// `n x d_theta`: `psi(H_T^(i); theta_hat)`.
    pub psi: Vec<f64>,
    /// `n x (T-1) x d_beta`: `phi_t(H_t^(i); beta_hat_t)`.
    pub phi: Vec<f64>,
    /// `Psi_dot`.
    pub psi_dot: DMatrix<f64>,
    /// `Phi_dot_t` for `t = 1..T-1`.
    pub phi_dot: Vec<DMatrix<f64>>,
}

impl JacobianBlocks {
    pub fn psi_of(&self, user: usize) -> &[f64] {
        &self.psi[user * self.theta_dim..(user + 1) * self.theta_dim]
    }

    /// `phi` of `user` for the 0-based parameter index `k` (`beta_hat_{k+1}`).
    pub fn phi_of(&self, user: usize, k: usize) -> &[f64] {
        let start = (user * self.n_betas + k) * self.beta_dim;
        &self.phi[start..start + self.beta_dim]
    }

    /// Length of the stacked `[phi_1; ...; phi_{T-1}; psi]`.
    pub fn stacked_dim(&self) -> usize {
        self.n_betas * self.beta_dim + self.theta_dim
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    pub beta_hats: Vec<Vec<f64>>,
    /// Sup-norm of `(1/n) sum_i psi(H^(i); theta_hat)`.
    pub psi_residual_norm: f64,
    pub scale: PsiScale,
    pub blocks: JacobianBlocks,
}

pub fn fit_theta(traj: &TrajectorySet) -> Result<EstimationResult> {
    fit_theta_scaled(traj, PsiScale::Unscaled)
}

/// Solves `(1/n) sum_i psi(H_T^(i); theta) = 0` and caches per-user scores.
pub fn fit_theta_scaled(traj: &TrajectorySet, scale: PsiScale) -> Result<EstimationResult> {
    let n = traj.n_users;
    let horizon = traj.horizon;
    let p = traj.theta_dim();
    let q = traj.beta_dim();
    let n_betas = traj.beta_hats.len();
    if n_betas + 1 != horizon {
        return Err(Error::DataIntegrity(format!(
            "trajectory has {n_betas} beta_hats for horizon {horizon}"
        )));
    }

    // Pooled in time-major order, matching the simulator's streaming fit.
    let mut pooled = NormalEquations::new(p);
    let mut x = vec![0.0; p];
    for t in 0..horizon {
        for i in 0..n {
            inference_regressor(traj.state(i, t), traj.action(i, t), &mut x);
            pooled.add(&x, traj.reward(i, t));
        }
    }
    let theta = pooled
        .solve()
        .map_err(|condition| Error::DegenerateDesign { t: horizon, condition })?;
    let theta_hat: Vec<f64> = theta.iter().copied().collect();
    let c = scale.factor(horizon);

    let betas: Vec<Vec<f64>> = traj.beta_hats.iter().map(PolicyParams::stacked).collect();
    let mut psi_vals = vec![0.0; n * p];
    let mut phi_vals = vec![0.0; n * n_betas * q];
    let mut psi_gram = DMatrix::<f64>::zeros(p, p);
    let mut phi_gram: Vec<DMatrix<f64>> = vec![DMatrix::zeros(q, q); n_betas];

    let mut xp = vec![0.0; q];
    let mut user_gram = DMatrix::<f64>::zeros(q, q);
    let mut user_rhs = DVector::<f64>::zeros(q);
    for i in 0..n {
        user_gram.fill(0.0);
        user_rhs.fill(0.0);
        let psi_i = &mut psi_vals[i * p..(i + 1) * p];
        for t in 0..horizon {
            let s = traj.state(i, t);
            let a = traj.action(i, t);
            let r = traj.reward(i, t);

            inference_regressor(s, a, &mut x);
            let resid = r - dot(&x, &theta_hat);
            for j in 0..p {
                psi_i[j] += c * resid * x[j];
                for k in 0..p {
                    psi_gram[(j, k)] += x[j] * x[k];
                }
            }

            policy_regressor(s, a, &mut xp);
            for j in 0..q {
                if xp[j] == 0.0 {
                    continue;
                }
                user_rhs[j] += xp[j] * r;
                for k in 0..q {
                    user_gram[(j, k)] += xp[j] * xp[k];
                }
            }
            if t < n_betas {
                // phi_{t+1}(beta) = rhs - gram * beta over times 1..=t+1.
                let b = &betas[t];
                let out = &mut phi_vals[(i * n_betas + t) * q..(i * n_betas + t + 1) * q];
                for j in 0..q {
                    let mut v = user_rhs[j];
                    for k in 0..q {
                        v -= user_gram[(j, k)] * b[k];
                    }
                    out[j] = v;
                }
                phi_gram[t] += &user_gram;
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let psi_dot = psi_gram * (-c * inv_n);
    let phi_dot: Vec<DMatrix<f64>> = phi_gram.into_iter().map(|g| g * (-inv_n)).collect();
    let mut mean_psi = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            mean_psi[j] += psi_vals[i * p + j] * inv_n;
        }
    }
    let psi_residual_norm = mean_psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(EstimationResult {
        theta_hat,
        beta_hats: betas,
        psi_residual_norm,
        scale,
        blocks: JacobianBlocks {
            n_users: n,
            theta_dim: p,
            beta_dim: q,
            n_betas,
            psi: psi_vals,
            phi: phi_vals,
            psi_dot,
            phi_dot,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;

    fn one_step(s: [f64; 2], a: u8, r: f64) -> TrajectorySet {
        let mut traj = TrajectorySet::empty(1, 1, 2, PolicySpec::boltzmann(1.0, 0.1));
        traj.states.copy_from_slice(&s);
        traj.actions[0] = a;
        traj.rewards[0] = r;
        traj.action_probs[0] = 0.5;
        traj
    }

    #[test]
    fn psi_direct_substitution() {
        let traj = one_step([1.0, 0.0], 1, 2.0);
        assert_eq!(psi(&traj, 0, &[0.0, 0.0, 0.0], PsiScale::Unscaled), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn phi_direct_substitution() {
        let traj = one_step([1.0, 0.5], 1, 2.0);
        assert_eq!(phi_t(&traj, 0, 1, &[0.0; 4]), vec![2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn psi_jacobian_single_outer_product() {
        let traj = one_step([1.0, 0.0], 1, 2.0);
        let j = jacobian_psi_theta(&traj, PsiScale::Unscaled);
        let expect = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0]);
        assert_eq!(j, expect);
    }

    #[test]
    fn psi_vanishes_on_exact_linear_data() {
        let theta = [0.5, -0.25, 1.5];
        let mut traj = TrajectorySet::empty(1, 4, 2, PolicySpec::boltzmann(1.0, 0.1));
        for t in 0..4 {
            let s = [1.0, t as f64 * 0.3 - 0.2];
            let a = (t % 2) as u8;
            traj.states[2 * t..2 * t + 2].copy_from_slice(&s);
            traj.actions[t] = a;
            traj.rewards[t] = theta[0] + theta[1] * s[1] + theta[2] * f64::from(a);
        }
        for v in psi(&traj, 0, &theta, PsiScale::Unscaled) {
            assert!(v.abs() < 1e-14);
        }
        let beta = [theta[0], theta[1], theta[2], 0.0];
        for v in phi_t(&traj, 0, 4, &beta) {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn per_decision_scale_divides_by_horizon() {
        let mut traj = TrajectorySet::empty(1, 2, 2, PolicySpec::boltzmann(1.0, 0.1));
        traj.states = vec![1.0, 0.0, 1.0, 1.0];
        traj.actions = vec![1, 0];
        traj.rewards = vec![1.0, 3.0];
        let a = psi(&traj, 0, &[0.1, 0.2, 0.3], PsiScale::Unscaled);
        let b = psi(&traj, 0, &[0.1, 0.2, 0.3], PsiScale::PerDecision);
        for (x, y) in a.iter().zip(&b) {
            assert!((x / 2.0 - y).abs() < 1e-15);
        }
    }

    use proptest::prelude::*;

    use crate::config::table1_cell;
    use crate::rng::SeedPlan;
    use crate::simulator::{fit_policy_params, run_trial};

    fn simulated(n: usize, horizon: usize, seed: u64) -> TrajectorySet {
        let mut cfg = table1_cell(5.0, 1.0, n);
        cfg.horizon = horizon;
        run_trial(&cfg, SeedPlan::new(seed, 0)).unwrap()
    }

    fn mean_psi(traj: &TrajectorySet, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; theta.len()];
        for i in 0..traj.n_users {
            for (o, v) in out.iter_mut().zip(psi(traj, i, theta, PsiScale::Unscaled)) {
                *o += v / traj.n_users as f64;
            }
        }
        out
    }

    fn mean_phi(traj: &TrajectorySet, t: usize, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; beta.len()];
        for i in 0..traj.n_users {
            for (o, v) in out.iter_mut().zip(phi_t(traj, i, t, beta)) {
                *o += v / traj.n_users as f64;
            }
        }
        out
    }

    fn central_difference(f: impl Fn(&[f64]) -> Vec<f64>, at: &[f64], h: f64) -> DMatrix<f64> {
        let m = f(at).len();
        let mut jac = DMatrix::zeros(m, at.len());
        for k in 0..at.len() {
            let (mut up, mut down) = (at.to_vec(), at.to_vec());
            up[k] += h;
            down[k] -= h;
            for (r, (a, b)) in f(&up).iter().zip(f(&down)).enumerate() {
                jac[(r, k)] = (a - b) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let traj = simulated(30, 6, 11);
        let theta = [0.3, -0.2, 0.5];
        let fd = central_difference(|th| mean_psi(&traj, th), &theta, 1e-6);
        assert!((fd - jacobian_psi_theta(&traj, PsiScale::Unscaled)).amax() < 1e-6);
        let beta = [0.1, 0.4, -0.3, 0.2];
        for t in [1, 3, 6] {
            let fd = central_difference(|b| mean_phi(&traj, t, b), &beta, 1e-6);
            assert!((fd - jacobian_phi_beta(&traj, t)).amax() < 1e-6);
        }
    }

    /// Least squares through an SVD of the stacked design, independent of
    /// the normal-equation accumulator.
    fn svd_least_squares(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
        let y = DVector::from_column_slice(y);
        x.svd(true, true).solve(&y, 1e-14).unwrap().iter().copied().collect()
    }

    #[test]
    fn theta_hat_matches_svd_least_squares() {
        let traj = simulated(40, 8, 2);
        let est = fit_theta(&traj).unwrap();
        let (mut rows, mut y) = (Vec::new(), Vec::new());
        for i in 0..traj.n_users {
            for t in 0..traj.horizon {
                let mut x = vec![0.0; 3];
                inference_regressor(traj.state(i, t), traj.action(i, t), &mut x);
                rows.push(x);
                y.push(traj.reward(i, t));
            }
        }
        for (a, b) in est.theta_hat.iter().zip(svd_least_squares(&rows, &y)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn policy_fit_matches_svd_least_squares() {
        let traj = simulated(20, 12, 4);
        let beta = fit_policy_params(&traj, 10).unwrap().stacked();
        let (mut rows, mut y) = (Vec::new(), Vec::new());
        for i in 0..traj.n_users {
            for t in 0..10 {
                let mut x = vec![0.0; 4];
                policy_regressor(traj.state(i, t), traj.action(i, t), &mut x);
                rows.push(x);
                y.push(traj.reward(i, t));
            }
        }
        for (a, b) in beta.iter().zip(svd_least_squares(&rows, &y)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn permute_users(traj: &TrajectorySet, order: &[usize]) -> TrajectorySet {
        let mut out = traj.clone();
        let (h, d) = (traj.horizon, traj.state_dim);
        for (new, &old) in order.iter().enumerate() {
            out.states[new * h * d..(new + 1) * h * d].copy_from_slice(&traj.states[old * h * d..(old + 1) * h * d]);
            out.actions[new * h..(new + 1) * h].copy_from_slice(&traj.actions[old * h..(old + 1) * h]);
            out.rewards[new * h..(new + 1) * h].copy_from_slice(&traj.rewards[old * h..(old + 1) * h]);
            out.action_probs[new * h..(new + 1) * h].copy_from_slice(&traj.action_probs[old * h..(old + 1) * h]);
        }
        out
    }

    #[test]
    fn estimates_do_not_depend_on_user_order() {
        let traj = simulated(25, 6, 8);
        let order: Vec<usize> = (0..25).rev().collect();
        let a = fit_theta(&traj).unwrap();
        let b = fit_theta(&permute_users(&traj, &order)).unwrap();
        for (x, y) in a.theta_hat.iter().zip(&b.theta_hat) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((&a.blocks.psi_dot - &b.blocks.psi_dot).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psi_is_affine_in_theta(
            seed in 0u64..1000,
            t1 in prop::array::uniform3(-2.0f64..2.0),
            t2 in prop::array::uniform3(-2.0f64..2.0),
            w in 0.0f64..1.0,
        ) {
            let traj = simulated(16, 4, seed);
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            let (p1, p2) = (psi(&traj, 1, &t1, PsiScale::Unscaled), psi(&traj, 1, &t2, PsiScale::Unscaled));
            let pm = psi(&traj, 1, &mix, PsiScale::Unscaled);
            for j in 0..3 {
                prop_assert!((pm[j] - (w * p1[j] + (1.0 - w) * p2[j])).abs() < 1e-9);
            }
        }

        #[test]
        fn jacobians_are_negative_semidefinite(seed in 0u64..1000, t in 1usize..=5) {
            let traj = simulated(16, 5, seed);
            let jp = jacobian_psi_theta(&traj, PsiScale::Unscaled);
            prop_assert!(jp.symmetric_eigenvalues().iter().all(|&e| e <= 1e-12));
            let jb = jacobian_phi_beta(&traj, t);
            prop_assert!(jb.symmetric_eigenvalues().iter().all(|&e| e <= 1e-12));
        }
    }
}
