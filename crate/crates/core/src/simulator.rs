//! One pooled adaptive trial.
//!
//! At decision time 1 every user is treated with probability 0.5. After the
//! rewards of decision time `t` are observed, `beta_hat_t` is refit by least
//! squares on all users' data through `t`, and the policy at `t + 1` uses
//! it. Users are processed in index order within each time, and each
//! replication draws from its own [`SeedPlan`] streams:
//!
//! * `init`: one baseline outcome `R_0 = kappa0 + e_0` per user, which forms
//!   the first state `[1, R_0]`;
//! * `actions`: one uniform per user and time;
//! * `errors`: the reward noise, time-major.

use rand_distr::{Distribution, StandardNormal};

use crate::config::TrialConfig;
use crate::environment::{reward, DosageState, ErrorProcess};
use crate::error::{Error, Result};
use crate::estimators::{inference_regressor, policy_regressor};
use crate::linalg::NormalEquations;
use crate::policy::{history_prob1, sample_action, PolicyParams};
use crate::rng::{SeedPlan, StreamLabel};
use crate::trajectory::TrajectorySet;

/// Receives each `(user, time)` observation as the trial unfolds.
trait Recorder {
    fn record(&mut self, user: usize, t: usize, state: &[f64], action: u8, reward: f64, prob: f64);
}

/// Where the policy parameters come from.
#[derive(Debug, Clone, Copy)]
enum PolicySource<'a> {
    /// Refit from the pooled history at every time.
    Adaptive,
    /// Pre-specified parameters `beta_1, ..., beta_{T-1}` (target policies).
    Fixed(&'a [PolicyParams]),
}

fn fill_state(state: &mut [f64], prev_reward: f64) {
    state[0] = 1.0;
    if state.len() > 1 {
        state[1] = prev_reward;
    }
}

fn simulate<R: Recorder>(config: &TrialConfig, plan: SeedPlan, source: PolicySource<'_>, rec: &mut R) -> Result<Vec<PolicyParams>> {
    config.validate()?;
    let n = config.n_users;
    let horizon = config.horizon;
    let d = config.state_dim;
    let env = &config.env;
    let spec = &config.policy;
    if let PolicySource::Fixed(b) = source {
        if b.len() < horizon - 1 || b.iter().any(|p| p.state_dim() != d) {
            return Err(Error::Usage(format!(
                "fixed policy needs {} parameter vectors of state dimension {d}",
                horizon - 1
            )));
        }
    }

    let mut error_rng = plan.stream(StreamLabel::Errors);
    let mut action_rng = plan.stream(StreamLabel::Actions);
    let mut init_rng = plan.stream(StreamLabel::Init);

    let mut errors = ErrorProcess::new(n, env.error_corr_base);
    let mut prev_reward: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut init_rng);
            env.kappa0 + e
        })
        .collect();
    let mut dosage = vec![DosageState::new(env.gamma); n];
    let mut pooled = NormalEquations::new(2 * d);
    let mut betas: Vec<PolicyParams> = Vec::with_capacity(horizon - 1);
    let mut probs = vec![0.0; n];
    let mut actions = vec![0u8; n];
    let mut state = vec![0.0; d];
    let mut x = vec![0.0; 2 * d];

    for t in 0..horizon {
        let history: &[PolicyParams] = match source {
            PolicySource::Adaptive => &betas,
            PolicySource::Fixed(b) => &b[..t],
        };
        for (i, p) in probs.iter_mut().enumerate() {
            fill_state(&mut state, prev_reward[i]);
            *p = history_prob1(spec, history, &state);
        }
        for (a, &p) in actions.iter_mut().zip(&probs) {
            *a = sample_action(&mut action_rng, p);
        }
        let eps = errors.next_column(&mut error_rng);
        for i in 0..n {
            fill_state(&mut state, prev_reward[i]);
            let a = actions[i];
            let r = reward(env, dosage[i].normalized(), a, eps[i]);
            let p = if a == 1 { probs[i] } else { 1.0 - probs[i] };
            rec.record(i, t, &state, a, r, p);
            policy_regressor(&state, a, &mut x);
            pooled.add(&x, r);
            dosage[i].advance(a);
            prev_reward[i] = r;
        }
        if t + 1 < horizon {
            match source {
                PolicySource::Adaptive => {
                    let beta = pooled
                        .solve()
                        .map_err(|condition| Error::DegenerateDesign { t: t + 1, condition })?;
                    betas.push(PolicyParams::from_stacked(beta.as_slice()));
                }
                PolicySource::Fixed(b) => betas.push(b[t].clone()),
            }
        }
    }
    Ok(betas)
}

struct FullRecorder<'a>(&'a mut TrajectorySet);

impl Recorder for FullRecorder<'_> {
    fn record(&mut self, user: usize, t: usize, state: &[f64], action: u8, reward: f64, prob: f64) {
        let traj = &mut *self.0;
        let at = traj.idx(user, t);
        let d = traj.state_dim;
        traj.states[at * d..(at + 1) * d].copy_from_slice(state);
        traj.actions[at] = action;
        traj.rewards[at] = reward;
        traj.action_probs[at] = prob;
    }
}

/// Pooled inferential normal equations only; memory independent of `n * T`.
struct SummaryRecorder {
    pooled: NormalEquations,
    x: Vec<f64>,
}

impl Recorder for SummaryRecorder {
    fn record(&mut self, _user: usize, _t: usize, state: &[f64], action: u8, reward: f64, _prob: f64) {
        inference_regressor(state, action, &mut self.x);
        self.pooled.add(&self.x, reward);
    }
}

/// Runs one pooled adaptive trial.
pub fn run_trial(config: &TrialConfig, plan: SeedPlan) -> Result<TrajectorySet> {
    let mut traj = TrajectorySet::empty(config.n_users, config.horizon, config.state_dim, config.policy.clone());
    let betas = simulate(config, plan, PolicySource::Adaptive, &mut FullRecorder(&mut traj))?;
    traj.beta_hats = betas;
    Ok(traj)
}

/// Runs a trial whose policies use pre-specified parameters instead of
/// pooled refits. The stored `beta_hats` are those parameters.
pub fn run_trial_fixed_policy(config: &TrialConfig, plan: SeedPlan, betas: &[PolicyParams]) -> Result<TrajectorySet> {
    let mut traj = TrajectorySet::empty(config.n_users, config.horizon, config.state_dim, config.policy.clone());
    let used = simulate(config, plan, PolicySource::Fixed(betas), &mut FullRecorder(&mut traj))?;
    traj.beta_hats = used;
    Ok(traj)
}

/// Point estimates from a trial whose per-user data is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSummary {
    pub theta_hat: Vec<f64>,
    pub beta_hats: Vec<PolicyParams>,
}

/// Runs an adaptive trial keeping only pooled sufficient statistics, for
/// large-n oracle runs. Draws and estimates match [`run_trial`] exactly.
pub fn run_pooled_summary(config: &TrialConfig, plan: SeedPlan) -> Result<PooledSummary> {
    let dim = config.theta_dim();
    let mut rec = SummaryRecorder {
        pooled: NormalEquations::new(dim),
        x: vec![0.0; dim],
    };
    let beta_hats = simulate(config, plan, PolicySource::Adaptive, &mut rec)?;
    let theta = rec
        .pooled
        .solve()
        .map_err(|condition| Error::DegenerateDesign { t: config.horizon, condition })?;
    Ok(PooledSummary {
        theta_hat: theta.iter().copied().collect(),
        beta_hats,
    })
}

/// Least-squares policy parameter fit on decision times `1..=t` of a stored
/// trajectory set (the root of the pooled policy estimating equation).
pub fn fit_policy_params(traj: &TrajectorySet, t: usize) -> Result<PolicyParams> {
    if t == 0 || t > traj.horizon {
        return Err(Error::Usage(format!("fit time {t} outside 1..={}", traj.horizon)));
    }
    let d = traj.state_dim;
    let mut ne = NormalEquations::new(2 * d);
    let mut x = vec![0.0; 2 * d];
    for tau in 0..t {
        for i in 0..traj.n_users {
            policy_regressor(traj.state(i, tau), traj.action(i, tau), &mut x);
            ne.add(&x, traj.reward(i, tau));
        }
    }
    let beta = ne.solve().map_err(|condition| Error::DegenerateDesign { t, condition })?;
    Ok(PolicyParams::from_stacked(beta.as_slice()))
}
