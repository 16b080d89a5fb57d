//! Desk-scale checks of the limit theory: a weighted Bernstein tail bound,
//! normality of the standardized estimate, the policy-invariance profile
//! and a weighted law of large numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::config::TrialConfig;
use crate::error::{Error, Result};
use crate::montecarlo::{mean_profile, oracle_plan, run_rep, RepOutcome};
use crate::policy::PolicyParams;
use crate::rng::SeedPlan;
use crate::simulator::{run_pooled_summary, run_trial, run_trial_fixed_policy};
use crate::trajectory::TrajectorySet;
use crate::variance::product_ratio;

/// Longest horizon for which action sequences are enumerated.
pub const MAX_ENUMERATION_HORIZON: usize = 20;

/// A function of one user's trajectory, used as the test functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundedFunctional {
    Zero,
    Constant { value: f64 },
    /// `clip(R_T, lo, hi)`.
    ClippedFinalReward { lo: f64, hi: f64 },
    /// `R_T` itself; unbounded, so rejected by the Bernstein check.
    FinalReward,
}

impl BoundedFunctional {
    /// Parses `zero`, `one`, `constant:C`, `clip:LO:HI` or `reward`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad number {s:?} in functional {text:?}")))
        };
        match parts.as_slice() {
            ["zero"] => Ok(Self::Zero),
            ["one"] => Ok(Self::Constant { value: 1.0 }),
            ["constant", c] => Ok(Self::Constant { value: num(c)? }),
            ["clip", lo, hi] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if !(lo < hi) {
                    return Err(Error::Usage(format!("clip bounds must satisfy lo < hi in {text:?}")));
                }
                Ok(Self::ClippedFinalReward { lo, hi })
            }
            ["reward"] => Ok(Self::FinalReward),
            _ => Err(Error::Usage(format!("unknown functional {text:?}"))),
        }
    }

    /// `||f||_inf`, or `None` when unbounded.
    pub fn sup_norm(&self) -> Option<f64> {
        match *self {
            Self::Zero => Some(0.0),
            Self::Constant { value } => Some(value.abs()),
            Self::ClippedFinalReward { lo, hi } => Some(lo.abs().max(hi.abs())),
            Self::FinalReward => None,
        }
    }

    pub fn eval(&self, traj: &TrajectorySet, user: usize) -> f64 {
        let r = traj.reward(user, traj.horizon - 1);
        match *self {
            Self::Zero => 0.0,
            Self::Constant { value } => value,
            Self::ClippedFinalReward { lo, hi } => r.clamp(lo, hi),
            Self::FinalReward => r,
        }
    }

    /// `(E f, E f^2)` when the final reward is `mu + Z`, `Z ~ N(0, 1)`.
    fn normal_moments(&self, mu: f64) -> (f64, f64) {
        match *self {
            Self::Zero => (0.0, 0.0),
            Self::Constant { value } => (value, value * value),
            Self::FinalReward => (mu, mu * mu + 1.0),
            Self::ClippedFinalReward { lo, hi } => {
                let n = Normal::standard();
                let (a, b) = (lo - mu, hi - mu);
                let (ca, cb) = (n.cdf(a), n.cdf(b));
                let (pa, pb) = (n.pdf(a), n.pdf(b));
                let mid = cb - ca;
                let m1 = lo * ca + hi * (1.0 - cb) + mu * mid + (pa - pb);
                let m2 = lo * lo * ca
                    + hi * hi * (1.0 - cb)
                    + mu * mu * mid
                    + 2.0 * mu * (pa - pb)
                    + (mid + a * pa - b * pb);
                (m1, m2)
            }
        }
    }
}

/// `E[rho_hat_{2:T} f]` and `E*[rho*_{2:T} f^2]`.
///
/// Inverse-probability products integrate each action out with weight one,
/// so both equal sums over all action sequences `a_{2:T}` of the potential
/// outcome moments, with `A_1` averaged at probability one half. Neither
/// depends on the policy.
pub fn weighted_moments(config: &TrialConfig, f: &BoundedFunctional) -> Result<(f64, f64)> {
    let horizon = config.horizon;
    if horizon > MAX_ENUMERATION_HORIZON {
        return Err(Error::Usage(format!(
            "exact moments enumerate 2^T action sequences; T must be at most {MAX_ENUMERATION_HORIZON}"
        )));
    }
    let env = &config.env;
    let (mut m1, mut m2) = (0.0, 0.0);
    for seq in 0u64..(1u64 << horizon) {
        let action = |t: usize| ((seq >> t) & 1) as u8;
        let mut dosage = 0.0;
        for t in 0..horizon - 1 {
            dosage = crate::environment::dosage_update(dosage, action(t), env.gamma);
        }
        let a_last = action(horizon - 1);
        let mu = env.kappa0 + env.kappa1 * dosage / env.c_gamma() + env.kappa2 * f64::from(a_last);
        let (e1, e2) = f.normal_moments(mu);
        m1 += 0.5 * e1;
        m2 += 0.5 * e2;
    }
    Ok((m1, m2))
}

/// Right-hand side of the weighted Bernstein inequality.
pub fn bernstein_bound(x: f64, pi_min: f64, horizon: usize, second_moment: f64, sup_norm: f64, n: usize) -> f64 {
    let rate = pi_min.powi(horizon as i32 - 1) / 4.0;
    let denom = second_moment + x * sup_norm / (n as f64).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    2.0 * (-rate * x * x / denom).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRow {
    pub x: f64,
    pub empirical_tail: f64,
    pub bound: f64,
    pub mc_se: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BernsteinReport {
    pub functional: BoundedFunctional,
    pub n: usize,
    pub horizon: usize,
    pub reps: usize,
    pub reps_aborted: usize,
    pub center: f64,
    pub second_moment: f64,
    pub sup_norm: f64,
    pub rows: Vec<TailRow>,
    pub violations: usize,
    pub passed: bool,
}

/// A tail probability violates the bound when it exceeds it by more than
/// four binomial standard errors.
pub fn is_violation(p_hat: f64, bound: f64, reps: usize) -> bool {
    let se = (p_hat * (1.0 - p_hat) / reps as f64).sqrt();
    p_hat - bound.min(1.0) > 4.0 * se
}

/// Default tail thresholds: multiples of the spread of the statistic,
/// reaching far enough out that the bound drops below one.
pub fn default_x_grid(second_moment: f64) -> Vec<f64> {
    let s = second_moment.sqrt().max(1.0);
    (-2..=10).map(|k| 2f64.powi(k) * s).collect()
}

/// Empirical tails of `|n^{-1/2} sum_i (rho_hat_i f_i - E[rho_hat f])|`
/// against the weighted Bernstein bound.
pub fn bernstein_check(
    config: &TrialConfig,
    f: &BoundedFunctional,
    reps: usize,
    x_grid: Option<&[f64]>,
) -> Result<BernsteinReport> {
    config.validate()?;
    let sup = f
        .sup_norm()
        .ok_or_else(|| Error::Usage("the Bernstein check needs a bounded functional".into()))?;
    let (center, second) = weighted_moments(config, f)?;
    let grid = x_grid.map_or_else(|| default_x_grid(second), <[f64]>::to_vec);
    let n = config.n_users;

    let stats: Vec<Result<f64>> = (0..reps as u32)
        .into_par_iter()
        .map(|r| {
            let traj = run_trial(config, SeedPlan::new(config.master_seed, r))?;
            let mut sum = 0.0;
            for i in 0..n {
                let mut rho = 1.0;
                for t in 1..traj.horizon {
                    rho /= traj.action_prob(i, t);
                }
                sum += rho * f.eval(&traj, i) - center;
            }
            Ok((sum / (n as f64).sqrt()).abs())
        })
        .collect();
    let mut values = Vec::with_capacity(reps);
    let mut aborted = 0;
    for s in stats {
        match s {
            Ok(v) => values.push(v),
            Err(e) if e.is_numerical() => aborted += 1,
            Err(e) => return Err(e),
        }
    }
    let completed = values.len();
    let rows: Vec<TailRow> = grid
        .iter()
        .map(|&x| {
            let hits = values.iter().filter(|&&v| v >= x).count();
            let p = hits as f64 / completed.max(1) as f64;
            let bound = bernstein_bound(x, config.policy.pi_min, config.horizon, second, sup, n);
            TailRow {
                x,
                empirical_tail: p,
                bound,
                mc_se: (p * (1.0 - p) / completed.max(1) as f64).sqrt(),
                violation: is_violation(p, bound, completed.max(1)),
            }
        })
        .collect();
    let violations = rows.iter().filter(|r| r.violation).count();
    Ok(BernsteinReport {
        functional: *f,
        n,
        horizon: config.horizon,
        reps: completed,
        reps_aborted: aborted,
        center,
        second_moment: second,
        sup_norm: sup,
        rows,
        violations,
        passed: violations == 0 && completed > 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltReport {
    pub reps: usize,
    pub reps_aborted: usize,
    pub mean: f64,
    pub variance: f64,
    pub ks: f64,
    /// `1.63 / sqrt(reps)`, the 1% critical value.
    pub ks_threshold: f64,
    pub variance_in_band: bool,
    pub insufficient: bool,
    pub passed: bool,
}

/// Kolmogorov-Smirnov distance of a sample to the standard normal.
pub fn ks_standard_normal(sample: &[f64]) -> f64 {
    let mut z = sample.to_vec();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let normal = Normal::standard();
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = normal.cdf(v);
            ((i + 1) as f64 / n - c).max(c - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Summarizes standardized values `z_r = (theta_hat_1 - theta*_1) / se_adaptive`.
pub fn clt_summary(z: &[f64], aborted: usize) -> CltReport {
    let reps = z.len();
    let insufficient = reps < 2;
    let mean = z.iter().sum::<f64>() / reps.max(1) as f64;
    let variance = if insufficient {
        f64::NAN
    } else {
        z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64
    };
    let ks = if reps == 0 { f64::NAN } else { ks_standard_normal(z) };
    let ks_threshold = 1.63 / (reps.max(1) as f64).sqrt();
    CltReport {
        reps,
        reps_aborted: aborted,
        mean,
        variance,
        ks,
        ks_threshold,
        variance_in_band: (variance - 1.0).abs() <= 0.15,
        insufficient,
        passed: !insufficient && ks <= ks_threshold,
    }
}

/// Runs `reps` replications and tests normality of the standardized estimate.
pub fn clt_check(config: &TrialConfig, reps: usize, theta_star: &[f64]) -> Result<CltReport> {
    let outcomes = run_reps(config, reps, None)?;
    let j = config.state_dim;
    let z: Vec<f64> = outcomes
        .0
        .iter()
        .map(|o| (o.theta_hat[j] - theta_star[j]) / o.se_adaptive)
        .collect();
    Ok(clt_summary(&z, outcomes.1))
}

/// Replications `0..reps` with numerical failures counted, not propagated.
fn run_reps(config: &TrialConfig, reps: usize, theta_star: Option<&[f64]>) -> Result<(Vec<RepOutcome>, usize)> {
    config.validate()?;
    let results: Vec<Result<RepOutcome>> = (0..reps as u32)
        .into_par_iter()
        .map(|r| run_rep(config, SeedPlan::new(config.master_seed, r), theta_star, 0.05))
        .collect();
    let mut out = Vec::with_capacity(reps);
    let mut aborted = 0;
    for r in results {
        match r {
            Ok(o) => out.push(o),
            Err(e) if e.is_numerical() => aborted += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, aborted))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceProfile {
    pub kappa1: f64,
    pub rho: f64,
    pub n: usize,
    pub policy: String,
    pub reps: usize,
    /// Mean `||V_{T,t}||_F` for `t = 1..T-1`.
    pub mean_norms: Vec<f64>,
}

/// Mean policy-invariance norms over `reps` replications of one trial.
pub fn invariance_profile(config: &TrialConfig, reps: usize) -> Result<InvarianceProfile> {
    let (outcomes, _) = run_reps(config, reps, None)?;
    Ok(InvarianceProfile {
        kappa1: config.env.kappa1,
        rho: config.policy.rho,
        n: config.n_users,
        policy: config.policy.kind_name().to_string(),
        reps: outcomes.len(),
        mean_norms: mean_profile(outcomes.iter().map(|o| o.invariance_norms.as_slice())),
    })
}

/// Profiles for each config in turn.
pub fn invariance_scan(configs: &[TrialConfig], reps: usize) -> Result<Vec<InvarianceProfile>> {
    configs.iter().map(|c| invariance_profile(c, reps)).collect()
}

/// True when `a` exceeds `b` in every coordinate.
pub fn strictly_dominates(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x > y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WllnReport {
    pub n: usize,
    pub target_n: usize,
    pub weighted_mean: f64,
    pub weighted_se: f64,
    pub target_mean: f64,
    pub target_se: f64,
    /// Difference in combined standard errors.
    pub z: f64,
    pub passed: bool,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Weighted mean `(1/n) sum_i W_{2:T}(beta*, beta_hat) f_i` of
/// `f = sum_t R_t` (the intercept coordinate of `psi` at `theta = 0`)
/// against its mean under the target policies, estimated from a trial of
/// `target_n` users run at `beta*`. `beta*` comes from a pooled run with
/// `oracle_n` users.
pub fn wlln_check(config: &TrialConfig, oracle_n: usize, target_n: usize) -> Result<WllnReport> {
    config.validate()?;
    let mut oc = config.clone();
    oc.n_users = oracle_n;
    let beta_star: Vec<PolicyParams> = run_pooled_summary(&oc, oracle_plan(config.master_seed))?.beta_hats;

    let traj = run_trial(config, SeedPlan::new(config.master_seed, 0))?;
    let f = |t: &TrajectorySet, i: usize| (0..t.horizon).map(|s| t.reward(i, s)).sum::<f64>();
    let weighted: Vec<f64> = (0..traj.n_users)
        .map(|i| product_ratio(&traj, i, traj.horizon, &beta_star) * f(&traj, i))
        .collect();
    let (wm, wse) = mean_se(&weighted);

    let mut tc = config.clone();
    tc.n_users = target_n;
    let target = run_trial_fixed_policy(&tc, SeedPlan::new(config.master_seed, 1), &beta_star)?;
    let plain: Vec<f64> = (0..target.n_users).map(|i| f(&target, i)).collect();
    let (tm, tse) = mean_se(&plain);
    let z = (wm - tm) / (wse * wse + tse * tse).sqrt();
    Ok(WllnReport {
        n: config.n_users,
        target_n,
        weighted_mean: wm,
        weighted_se: wse,
        target_mean: tm,
        target_se: tse,
        z,
        passed: z.abs() <= 4.0,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::config::table1_cell;

    fn short(horizon: usize, n: usize) -> TrialConfig {
        let mut c = table1_cell(1.0, 1.0, n);
        c.horizon = horizon;
        c
    }

    #[test]
    fn parse_functionals() {
        assert_eq!(BoundedFunctional::parse("zero").unwrap(), BoundedFunctional::Zero);
        assert_eq!(
            BoundedFunctional::parse("clip:-3:3").unwrap(),
            BoundedFunctional::ClippedFinalReward { lo: -3.0, hi: 3.0 }
        );
        assert!(BoundedFunctional::parse("clip:3:-3").is_err());
        assert!(BoundedFunctional::parse("nonsense").is_err());
    }

    #[test]
    fn clipped_moments_match_monte_carlo() {
        let f = BoundedFunctional::ClippedFinalReward { lo: -1.0, hi: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = 0.7;
        let draws = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (mu + z).clamp(-1.0, 2.0);
            s1 += v;
            s2 += v * v;
        }
        let (m1, m2) = f.normal_moments(mu);
        assert!((s1 / draws as f64 - m1).abs() < 4.0 * 1.5 / (draws as f64).sqrt());
        assert!((s2 / draws as f64 - m2).abs() < 4.0 * 2.5 / (draws as f64).sqrt());
    }

    #[test]
    fn constant_functional_moments_count_sequences() {
        let cfg = short(5, 10);
        let (m1, m2) = weighted_moments(&cfg, &BoundedFunctional::Constant { value: 1.0 }).unwrap();
        assert_eq!(m1, 16.0);
        assert_eq!(m2, 16.0);
    }

    #[test]
    fn weighted_mean_is_unbiased_for_enumerated_center() {
        let mut cfg = short(4, 400);
        cfg.policy.rho = 2.0;
        let f = BoundedFunctional::ClippedFinalReward { lo: -3.0, hi: 3.0 };
        let (center, _) = weighted_moments(&cfg, &f).unwrap();
        let mut per_user = Vec::new();
        for r in 0..20 {
            let traj = run_trial(&cfg, SeedPlan::new(5, r)).unwrap();
            for i in 0..traj.n_users {
                let rho: f64 = (1..traj.horizon).map(|t| 1.0 / traj.action_prob(i, t)).product();
                per_user.push(rho * f.eval(&traj, i));
            }
        }
        let (m, se) = mean_se(&per_user);
        assert!((m - center).abs() < 4.0 * se, "{m} vs {center} (se {se})");
    }

    #[test]
    fn zero_functional_has_no_tail() {
        let rep = bernstein_check(&short(5, 50), &BoundedFunctional::Zero, 20, Some(&[0.1, 1.0])).unwrap();
        assert!(rep.rows.iter().all(|r| r.empirical_tail == 0.0));
        assert!(rep.passed);
    }

    #[test]
    fn unbounded_functional_is_rejected() {
        let r = bernstein_check(&short(5, 50), &BoundedFunctional::FinalReward, 5, None);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn violation_rule() {
        assert!(!is_violation(0.0, 0.0, 100));
        assert!(is_violation(0.5, 0.1, 2000));
        assert!(!is_violation(0.5, 3.0, 10));
    }

    #[test]
    fn ks_of_normal_quantiles_is_small() {
        let n = Normal::standard();
        let z: Vec<f64> = (0..1000).map(|i| n.inverse_cdf((i as f64 + 0.5) / 1000.0)).collect();
        assert!(ks_standard_normal(&z) <= 0.5 / 1000.0 + 1e-9);
        let shifted: Vec<f64> = z.iter().map(|v| v + 1.0).collect();
        assert!(ks_standard_normal(&shifted) > 0.3);
    }

    #[test]
    fn single_rep_is_insufficient() {
        let r = clt_summary(&[0.3], 0);
        assert!(r.insufficient && !r.passed);
    }

    #[test]
    fn uniform_policy_profile_is_zero() {
        let mut cfg = short(8, 40);
        cfg.policy = crate::policy::PolicySpec::constant_uniform(0.1);
        let p = invariance_profile(&cfg, 4).unwrap();
        assert_eq!(p.mean_norms.len(), 7);
        assert!(p.mean_norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dominance() {
        assert!(strictly_dominates(&[2.0, 3.0], &[1.0, 2.9]));
        assert!(!strictly_dominates(&[2.0, 3.0], &[2.0, 2.9]));
    }
}
