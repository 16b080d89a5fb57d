//! Standard and adaptive sandwich estimators.
//!
//! The adaptive estimator stacks the policy estimating functions with the
//! inferential one, `[phi_1; W_{2:2} phi_2; ...; W_{2:T-1} phi_{T-1}; W_{2:T} psi]`,
//! and differentiates the stack at the estimates. The resulting bread is
//! block lower-triangular:
//!
//! * diagonal blocks `Phi_dot_t` and `Psi_dot`;
//! * below the diagonal, `(1/n) sum_i phi_t,i (dW_{2:t}/d beta_s)'` for `s < t`;
//! * last block row `V_s = (1/n) sum_i psi_i (dW_{2:T}/d beta_s)'` then `Psi_dot`.
//!
//! The variance of `theta_hat` is the lower-right block of
//! `B^-1 Sigma B^-T` with `Sigma` the empirical second moment of the stack.

use nalgebra::DMatrix;

use super::blockinv::{block_lower_triangular_inverse, BlockLowerTriangular};
use super::weights::{weight_products, WeightEval};
use crate::error::{Error, Result};
use crate::estimators::{EstimationResult, JacobianBlocks};
use crate::linalg::{checked_inverse, max_abs, symmetrize};

/// `Psi_dot^-1 Sigma_psi Psi_dot^-T` with `Sigma_psi = (1/n) sum_i psi_i psi_i'`.
pub fn sandwich(est: &EstimationResult) -> Result<DMatrix<f64>> {
    let b = &est.blocks;
    let bread_inv = checked_inverse(&b.psi_dot).map_err(|condition| Error::SingularBread { condition })?;
    let meat = psi_meat(b);
    Ok(symmetrize(&(&bread_inv * meat * bread_inv.transpose())))
}

fn psi_meat(b: &JacobianBlocks) -> DMatrix<f64> {
    let p = b.theta_dim;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..b.n_users {
        let psi = b.psi_of(i);
        for j in 0..p {
            for k in 0..p {
                meat[(j, k)] += psi[j] * psi[k];
            }
        }
    }
    meat / b.n_users as f64
}

#[derive(Debug, Clone)]
pub struct AdaptiveSandwich {
    /// Variance of `sqrt(n) (theta_hat - theta*)`.
    pub cov: DMatrix<f64>,
    /// `sum_t d_t + d_theta`.
    pub stacked_dim: usize,
    /// `||V_{T,t}||_F` for `t = 1..T-1`.
    pub invariance_norms: Vec<f64>,
    /// `M_t`, the lower-left `d_theta x d_beta` blocks of the inverse bread.
    pub m_blocks: Vec<DMatrix<f64>>,
    pub bread: BlockLowerTriangular,
}

/// Assembles the stacked bread from cached scores and weight gradients.
pub fn stacked_bread(est: &EstimationResult, weights: &WeightEval) -> BlockLowerTriangular {
    let b = &est.blocks;
    let (n, p, q, k_count) = (b.n_users, b.theta_dim, b.beta_dim, b.n_betas);
    let mut sizes = vec![q; k_count];
    sizes.push(p);
    let mut bread = BlockLowerTriangular::zeros(&sizes);

    let mut cum = vec![0.0; k_count * q];
    let mut live = vec![false; k_count];
    for i in 0..n {
        cum.fill(0.0);
        live.fill(false);
        let add_time = |t: usize, cum: &mut [f64], live: &mut [bool]| {
            weights.for_each_term(i, t, |s, g| {
                live[s] = true;
                for (c, v) in cum[s * q..(s + 1) * q].iter_mut().zip(g) {
                    *c += v;
                }
            });
        };
        for k in 0..k_count {
            // Row k holds phi_{k+1}, weighted by W_{2:k+1}: 0-based times 1..=k.
            if k >= 1 {
                add_time(k, &mut cum, &mut live);
            }
            let phi = b.phi_of(i, k);
            for s in (0..k).filter(|&s| live[s]) {
                outer_add(bread.block_mut(k, s), phi, &cum[s * q..(s + 1) * q]);
            }
        }
        add_time(k_count, &mut cum, &mut live);
        let psi = b.psi_of(i);
        for s in (0..k_count).filter(|&s| live[s]) {
            outer_add(bread.block_mut(k_count, s), psi, &cum[s * q..(s + 1) * q]);
        }
    }

    let inv_n = 1.0 / n as f64;
    for k in 0..=k_count {
        for s in 0..k {
            *bread.block_mut(k, s) *= inv_n;
        }
    }
    for (k, d) in b.phi_dot.iter().enumerate() {
        bread.set_block(k, k, d.clone());
    }
    bread.set_block(k_count, k_count, b.psi_dot.clone());
    bread
}

#[inline]
fn outer_add(m: &mut DMatrix<f64>, a: &[f64], b: &[f64]) {
    for (c, &bc) in b.iter().enumerate() {
        if bc == 0.0 {
            continue;
        }
        for (r, &ar) in a.iter().enumerate() {
            m[(r, c)] += ar * bc;
        }
    }
}

/// `n x D` matrix whose row `i` is `[phi_1,i; ...; phi_{T-1},i; psi_i]'`.
pub fn stacked_scores(b: &JacobianBlocks) -> DMatrix<f64> {
    let d = b.stacked_dim();
    let q = b.beta_dim;
    DMatrix::from_fn(b.n_users, d, |i, c| {
        let k = c / q;
        if k < b.n_betas {
            b.phi_of(i, k)[c % q]
        } else {
            b.psi_of(i)[c - b.n_betas * q]
        }
    })
}

pub fn adaptive_sandwich(traj: &crate::trajectory::TrajectorySet, est: &EstimationResult) -> Result<AdaptiveSandwich> {
    let weights = weight_products(traj)?;
    adaptive_sandwich_with(est, &weights)
}

/// Adaptive sandwich from precomputed weight gradients.
pub fn adaptive_sandwich_with(est: &EstimationResult, weights: &WeightEval) -> Result<AdaptiveSandwich> {
    let b = &est.blocks;
    let (p, q, k_count) = (b.theta_dim, b.beta_dim, b.n_betas);
    let bread = stacked_bread(est, weights);
    let inv = block_lower_triangular_inverse(&bread).map_err(|e| match e {
        Error::SingularBlock { block, condition } if block < k_count => Error::SingularPolicyBread { t: block + 1, condition },
        Error::SingularBlock { condition, .. } => Error::SingularBread { condition },
        other => other,
    })?;

    // Last block row of the inverse: [M_1, ..., M_{T-1}, Psi_dot^-1].
    let d = b.stacked_dim();
    let mut last = DMatrix::zeros(p, d);
    let mut m_blocks = Vec::with_capacity(k_count);
    for s in 0..k_count {
        let m = inv.block(k_count, s).clone();
        last.view_mut((0, s * q), (p, q)).copy_from(&m);
        m_blocks.push(m);
    }
    last.view_mut((0, k_count * q), (p, p)).copy_from(inv.block(k_count, k_count));

    let z = stacked_scores(b);
    let sigma = z.tr_mul(&z) / b.n_users as f64;
    let cov = symmetrize(&(&last * sigma * last.transpose()));

    let invariance_norms = (0..k_count).map(|s| bread.block(k_count, s).norm()).collect();
    Ok(AdaptiveSandwich {
        cov,
        stacked_dim: d,
        invariance_norms,
        m_blocks,
        bread,
    })
}

/// Adaptive variance through the corrected-meat form
/// `Psi_dot^-1 M_adapt Psi_dot^-T`, `M_adapt = (1/n) sum_i (psi_i + Psi_dot sum_t M_t phi_t,i)^2`.
pub fn corrected_meat_cov(est: &EstimationResult, m_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let b = &est.blocks;
    let p = b.theta_dim;
    let bread_inv = checked_inverse(&b.psi_dot).map_err(|condition| Error::SingularBread { condition })?;
    let mut meat = DMatrix::zeros(p, p);
    let mut corr = nalgebra::DVector::zeros(p);
    for i in 0..b.n_users {
        corr.fill(0.0);
        for (k, m) in m_blocks.iter().enumerate() {
            corr.gemv(1.0, m, &nalgebra::DVector::from_column_slice(b.phi_of(i, k)), 1.0);
        }
        let y = nalgebra::DVector::from_column_slice(b.psi_of(i)) + &b.psi_dot * &corr;
        meat.ger(1.0, &y, &y, 1.0);
    }
    meat /= b.n_users as f64;
    Ok(symmetrize(&(&bread_inv * meat * bread_inv.transpose())))
}

/// Max-abs gap between the stacked and corrected-meat constructions,
/// relative to the largest entry of the stacked one.
pub fn check_equivalence(est: &EstimationResult, adaptive: &AdaptiveSandwich) -> Result<f64> {
    let alt = corrected_meat_cov(est, &adaptive.m_blocks)?;
    let scale = max_abs(&adaptive.cov).max(f64::MIN_POSITIVE);
    Ok(max_abs(&(&alt - &adaptive.cov)) / scale)
}
