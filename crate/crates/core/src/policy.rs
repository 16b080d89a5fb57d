//! Stochastic policy classes for binary actions.
//!
//! Three kinds are supported:
//!
//! * `boltzmann`: `pi_t(1, s; beta) = clip(expit(rho * beta_1' s))`.
//! * `mirror_descent`: `pi_t(1, s) = clip(pi_{t-1}(1, s) + eta_t / 2 * beta_1' s)`,
//!   where the previous probability is evaluated at the same state and the
//!   recursion starts from the fixed first-time probability 0.5.
//! * `constant_uniform`: probability 0.5 regardless of parameters.
//!
//! `clip(x) = min(max(x, pi_min), 1 - pi_min)`. Parameters are the stacked
//! vector `[beta_0; beta_1]` of length `2 * d_S`; only `beta_1` enters the
//! probability for every kind.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability of action 1 at the first decision time.
pub const FIRST_TIME_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Boltzmann,
    MirrorDescent,
    ConstantUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Softmax steepness (Boltzmann only).
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_pi_min")]
    pub pi_min: f64,
    /// Learning rates (mirror descent only). A single entry is used at every
    /// decision time; otherwise entry `t - 1` is the rate for decision time `t`.
    #[serde(default, deserialize_with = "scalar_or_seq")]
    pub eta: Vec<f64>,
}

fn default_rho() -> f64 {
    1.0
}

fn default_pi_min() -> f64 {
    0.1
}

fn scalar_or_seq<'de, D>(de: D) -> std::result::Result<Vec<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

impl PolicySpec {
    pub fn boltzmann(rho: f64, pi_min: f64) -> Self {
        Self {
            kind: PolicyKind::Boltzmann,
            rho,
            pi_min,
            eta: Vec::new(),
        }
    }

    pub fn mirror_descent(eta: Vec<f64>, pi_min: f64) -> Self {
        Self {
            kind: PolicyKind::MirrorDescent,
            rho: 0.0,
            pi_min,
            eta,
        }
    }

    pub fn constant_uniform(pi_min: f64) -> Self {
        Self {
            kind: PolicyKind::ConstantUniform,
            rho: 0.0,
            pi_min,
            eta: Vec::new(),
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.pi_min > 0.0 && self.pi_min < 0.5) {
            return Err(Error::Config(format!(
                "policy.pi_min must lie in (0, 0.5), got {}",
                self.pi_min
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "policy.rho must be finite and >= 0, got {}",
                self.rho
            )));
        }
        if self.kind == PolicyKind::MirrorDescent {
            if self.eta.is_empty() {
                return Err(Error::Config(
                    "policy.eta is required for mirror_descent".into(),
                ));
            }
            if self.eta.len() != 1 && self.eta.len() < horizon {
                return Err(Error::Config(format!(
                    "policy.eta must have 1 or at least {horizon} entries, got {}",
                    self.eta.len()
                )));
            }
            if let Some(bad) = self.eta.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
                return Err(Error::Config(format!("policy.eta entries must be > 0, got {bad}")));
            }
        }
        Ok(())
    }

    /// Learning rate for decision time `t` (1-based).
    pub fn eta_at(&self, t: usize) -> f64 {
        match self.eta.len() {
            0 => 0.0,
            1 => self.eta[0],
            _ => self.eta[(t - 1).min(self.eta.len() - 1)],
        }
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.max(self.pi_min).min(1.0 - self.pi_min)
    }

    /// Whether `x` lies strictly inside the unclipped region. Boundary points
    /// count as saturated.
    fn interior(&self, x: f64) -> bool {
        x > self.pi_min && x < 1.0 - self.pi_min
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            PolicyKind::Boltzmann => "boltzmann",
            PolicyKind::MirrorDescent => "mirror_descent",
            PolicyKind::ConstantUniform => "constant_uniform",
        }
    }

    /// True when the policy's probabilities cannot depend on its parameters.
    pub fn is_parameter_free(&self) -> bool {
        match self.kind {
            PolicyKind::ConstantUniform => true,
            PolicyKind::Boltzmann => self.rho == 0.0,
            PolicyKind::MirrorDescent => false,
        }
    }
}

/// Stacked policy parameters `[beta_0; beta_1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(state_dim: usize) -> Self {
        Self {
            beta0: vec![0.0; state_dim],
            beta1: vec![0.0; state_dim],
        }
    }

    /// Splits a stacked vector of even length.
    pub fn from_stacked(v: &[f64]) -> Self {
        assert!(v.len().is_multiple_of(2), "stacked policy parameter must have even length");
        let d = v.len() / 2;
        Self {
            beta0: v[..d].to_vec(),
            beta1: v[d..].to_vec(),
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.beta0.clone();
        v.extend_from_slice(&self.beta1);
        v
    }

    pub fn state_dim(&self) -> usize {
        self.beta1.len()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_state(params: &PolicyParams, state: &[f64]) -> Result<()> {
    if params.beta1.len() != state.len() || params.beta0.len() != state.len() {
        return Err(Error::Usage(format!(
            "state has length {} but policy parameters expect {}",
            state.len(),
            params.beta1.len()
        )));
    }
    Ok(())
}

/// Probability of action 1 at decision time `t` (1-based, `t >= 2`) from the
/// parameter `beta_{t-1}`.
///
/// `prev_prob` is required for mirror descent and is the previous decision
/// time's probability of action 1 evaluated at this same state.
pub fn prob_action1(
    spec: &PolicySpec,
    t: usize,
    params: &PolicyParams,
    state: &[f64],
    prev_prob: Option<f64>,
) -> Result<f64> {
    check_state(params, state)?;
    match spec.kind {
        PolicyKind::ConstantUniform => Ok(0.5),
        PolicyKind::Boltzmann => Ok(spec.clip(expit(spec.rho * dot(&params.beta1, state)))),
        PolicyKind::MirrorDescent => {
            let prev = prev_prob.ok_or_else(|| {
                Error::Usage("mirror_descent probabilities require prev_prob".into())
            })?;
            Ok(spec.clip(prev + 0.5 * spec.eta_at(t) * dot(&params.beta1, state)))
        }
    }
}

/// Probability of taking `action` (0 or 1).
pub fn prob_action(
    spec: &PolicySpec,
    t: usize,
    params: &PolicyParams,
    state: &[f64],
    prev_prob: Option<f64>,
    action: u8,
) -> Result<f64> {
    let p1 = prob_action1(spec, t, params, state, prev_prob)?;
    Ok(if action == 1 { p1 } else { 1.0 - p1 })
}

/// Gradient of `pi_t(action, state; beta_{t-1})` with respect to the stacked
/// `[beta_0; beta_1]` of the most recent parameter, holding `prev_prob`
/// fixed. Zero in the clip-saturated region.
pub fn prob_grad(
    spec: &PolicySpec,
    t: usize,
    params: &PolicyParams,
    state: &[f64],
    prev_prob: Option<f64>,
    action: u8,
) -> Result<Vec<f64>> {
    check_state(params, state)?;
    let d = state.len();
    let mut grad = vec![0.0; 2 * d];
    let coef = match spec.kind {
        PolicyKind::ConstantUniform => 0.0,
        PolicyKind::Boltzmann => {
            let p = expit(spec.rho * dot(&params.beta1, state));
            if spec.interior(p) {
                spec.rho * p * (1.0 - p)
            } else {
                0.0
            }
        }
        PolicyKind::MirrorDescent => {
            let prev = prev_prob.ok_or_else(|| {
                Error::Usage("mirror_descent gradients require prev_prob".into())
            })?;
            let eta = spec.eta_at(t);
            if spec.interior(prev + 0.5 * eta * dot(&params.beta1, state)) {
                0.5 * eta
            } else {
                0.0
            }
        }
    };
    let sign = if action == 1 { 1.0 } else { -1.0 };
    if coef != 0.0 {
        for (g, s) in grad[d..].iter_mut().zip(state) {
            *g = sign * coef * s;
        }
    }
    Ok(grad)
}

/// Bernoulli draw with success probability `prob1`.
pub fn sample_action<R: Rng + ?Sized>(stream: &mut R, prob1: f64) -> u8 {
    u8::from(stream.random::<f64>() < prob1)
}

/// Per-state Lipschitz constant of `pi_t(1, s; .)` in `beta_{t-1,1}`:
/// `rho * ||s|| / 4` for Boltzmann and `eta_t * ||s|| / 2` for mirror descent.
pub fn lipschitz_bound(spec: &PolicySpec, t: usize, state: &[f64]) -> f64 {
    let norm = dot(state, state).sqrt();
    match spec.kind {
        PolicyKind::Boltzmann => 0.25 * spec.rho * norm,
        PolicyKind::MirrorDescent => 0.5 * spec.eta_at(t) * norm,
        PolicyKind::ConstantUniform => 0.0,
    }
}

/// Probability of action 1 at decision time `betas.len() + 1` given the
/// full parameter history `beta_1, ..., beta_{t-1}`. With no history this is
/// the first-time probability.
pub fn history_prob1(spec: &PolicySpec, betas: &[PolicyParams], state: &[f64]) -> f64 {
    let Some(last) = betas.last() else {
        return FIRST_TIME_PROB;
    };
    match spec.kind {
        PolicyKind::ConstantUniform => 0.5,
        PolicyKind::Boltzmann => spec.clip(expit(spec.rho * dot(&last.beta1, state))),
        PolicyKind::MirrorDescent => {
            let mut q = FIRST_TIME_PROB;
            for (k, b) in betas.iter().enumerate() {
                q = spec.clip(q + 0.5 * spec.eta_at(k + 2) * dot(&b.beta1, state));
            }
            q
        }
    }
}

/// Gradient of `pi_t(action, state; beta_{1:t-1})` with respect to every
/// parameter block it depends on, `t = betas.len() + 1`.
///
/// Calls `sink(s, grad)` for each block index `s` (0-based, so block `s`
/// is `beta_{s+1}`) with a nonzero gradient of length `2 * d_S`. Boltzmann
/// policies touch only the last block; mirror descent chains through the
/// whole recursion.
pub fn history_prob_grad<F>(spec: &PolicySpec, betas: &[PolicyParams], state: &[f64], action: u8, mut sink: F)
where
    F: FnMut(usize, &[f64]),
{
    let Some(last) = betas.last() else {
        return;
    };
    let d = state.len();
    let sign = if action == 1 { 1.0 } else { -1.0 };
    match spec.kind {
        PolicyKind::ConstantUniform => {}
        PolicyKind::Boltzmann => {
            let p = expit(spec.rho * dot(&last.beta1, state));
            if spec.rho != 0.0 && spec.interior(p) {
                let c = sign * spec.rho * p * (1.0 - p);
                let mut g = vec![0.0; 2 * d];
                for (gj, sj) in g[d..].iter_mut().zip(state) {
                    *gj = c * sj;
                }
                sink(betas.len() - 1, &g);
            }
        }
        PolicyKind::MirrorDescent => {
            // Walk the recursion forward; a saturated step zeroes all
            // sensitivity to earlier blocks.
            let mut q = FIRST_TIME_PROB;
            let mut live_from = 0usize;
            let mut coefs = vec![0.0; betas.len()];
            for (k, b) in betas.iter().enumerate() {
                let eta = spec.eta_at(k + 2);
                let raw = q + 0.5 * eta * dot(&b.beta1, state);
                if spec.interior(raw) {
                    coefs[k] = 0.5 * eta;
                } else {
                    live_from = k + 1;
                }
                q = spec.clip(raw);
            }
            let mut g = vec![0.0; 2 * d];
            for (k, &c) in coefs.iter().enumerate().skip(live_from) {
                if c == 0.0 {
                    continue;
                }
                for (gj, sj) in g[d..].iter_mut().zip(state) {
                    *gj = sign * c * sj;
                }
                sink(k, &g);
            }
        }
    }
}
