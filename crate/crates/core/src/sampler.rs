//! Flow integration with temperature-controlled velocity sampling.
//!
//! At each step the predicted Gaussian is sampled as `v = mu + tau * sigma * eps`
//! and the state advances along the sampled velocity with a fixed-grid solver.
//! tau = 0 recovers the deterministic mean-field ODE; the temperature schedule
//! maps a candidate count N to the tau that keeps the expected maximum
//! deviation of N draws bounded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};
use crate::linalg;
use crate::net::{ConditionSet, NetParams, VelocityDistribution};
use crate::rng as rng_util;

pub const DEFAULT_TAU0: f64 = 0.01;
pub const DEFAULT_TAU_MAX: f64 = 0.08;
pub const DEFAULT_NUM_STEPS: usize = 16;

const LN_2PI: f64 = 1.8378770664093454835606594728112353;

/// Candidate-count-indexed temperature: `min(tau_max, tau0 * sqrt(2 ln(N+1)))`.
/// Grows like the expected maximum of N Gaussian draws, so more candidates
/// explore wider without any one of them becoming implausible. Requires
/// tau0 > 0 and tau_max > 0.
pub fn temperature(n: u64, tau0: f64, tau_max: f64) -> f64 {
    // Add in floating point so n = u64::MAX cannot overflow; exact for all
    // n below 2^53, which is far past the point where the cap takes over.
    let tau = tau0 * (2.0 * (n as f64 + 1.0).ln()).sqrt();
    tau.min(tau_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
    Rk4,
}

impl std::str::FromStr for Solver {
    type Err = DfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            "rk4" => Ok(Solver::Rk4),
            other => Err(DfmError::InputDomain(format!(
                "unknown solver {other:?}; expected euler, midpoint, or rk4"
            ))),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Midpoint => "midpoint",
            Solver::Rk4 => "rk4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub solver: Solver,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: DEFAULT_NUM_STEPS, solver: Solver::Rk4, tau: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(DfmError::InputDomain("num_steps must be >= 1".into()));
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(DfmError::InputDomain(format!("tau must be finite and >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One sampled trajectory with everything needed to replay it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// (t, x) pairs, from (0, x0) to (1, final state).
    pub states: Vec<(f64, Vec<f64>)>,
    /// Effective per-step velocity (increment / dt); equals the sampled
    /// stage velocity for euler.
    pub sampled_velocities: Vec<Vec<f64>>,
    /// The eps drawn for each step (zeros when tau = 0).
    pub noise_draws: Vec<Vec<f64>>,
    /// Sum over steps of the log-density of the sampled velocity under the
    /// predicted Gaussian at the step's starting state.
    pub cum_log_confidence: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.states.last().expect("trajectory has at least the initial state").1
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self)
            .map_err(|e| DfmError::Validation(format!("trajectory not serializable: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DfmError::Validation(format!("bad trajectory json: {e}")))
    }
}

/// Apply the temperature-scaled perturbation to a predicted distribution
/// with a given eps, returning the velocity and its log-density under the
/// prediction. Both live sampling and replay go through this one function,
/// which is what makes replay bit-exact.
pub fn velocity_from_eps(dist: &VelocityDistribution, tau: f64, eps: &[f64]) -> (Vec<f64>, f64) {
    let d = dist.mu.len();
    let sigma = dist.sigma();
    let v: Vec<f64> = (0..d).map(|i| dist.mu[i] + tau * sigma * eps[i]).collect();
    let sigma2 = dist.log_var.exp();
    let r = linalg::sq_norm(&linalg::sub(&v, &dist.mu));
    let log_density = -0.5 * d as f64 * LN_2PI - 0.5 * d as f64 * dist.log_var - r / (2.0 * sigma2);
    (v, log_density)
}

/// Draw a velocity from the predicted Gaussian at temperature tau. At tau = 0
/// the rng is untouched and eps is all zeros, so deterministic generation is
/// literally rng-independent.
pub fn sample_velocity<R: Rng>(
    dist: &VelocityDistribution,
    tau: f64,
    r: &mut R,
) -> (Vec<f64>, Vec<f64>, f64) {
    let d = dist.mu.len();
    let eps = stream_eps(r, d, tau);
    let (v, log_density) = velocity_from_eps(dist, tau, &eps);
    (v, eps, log_density)
}

/// Draw the per-step noise vector from a live stream. tau = 0 short-circuits
/// to zeros without touching the generator, so deterministic runs leave the
/// stream untouched. Guided search draws its branch noise through this same
/// function to stay stream-compatible with plain integration.
pub(crate) fn stream_eps<R: Rng>(r: &mut R, d: usize, tau: f64) -> Vec<f64> {
    if tau == 0.0 {
        vec![0.0; d]
    } else {
        rng_util::standard_normal_vec(r, d)
    }
}

enum NoiseSource<'a, R: Rng> {
    Stream(&'a mut R),
    Recorded(&'a [Vec<f64>]),
}

impl<R: Rng> NoiseSource<'_, R> {
    fn next_eps(&mut self, step: usize, d: usize, tau: f64) -> Result<Vec<f64>> {
        match self {
            NoiseSource::Stream(r) => Ok(stream_eps(*r, d, tau)),
            NoiseSource::Recorded(draws) => {
                let eps = draws.get(step).ok_or_else(|| {
                    DfmError::InputDomain(format!("recorded noise has no draw for step {step}"))
                })?;
                if eps.len() != d {
                    return Err(DfmError::InputDomain(format!(
                        "recorded draw {step} has length {}, expected {d}",
                        eps.len()
                    )));
                }
                if !linalg::all_finite(eps) {
                    return Err(DfmError::InputDomain(format!("recorded draw {step} is non-finite")));
                }
                Ok(eps.clone())
            }
        }
    }
}

fn eval_stage(
    params: &NetParams,
    x: &[f64],
    t: f64,
    cond: ConditionSet,
    tau: f64,
    eps: &[f64],
    step: usize,
) -> Result<Vec<f64>> {
    if !linalg::all_finite(x) {
        return Err(DfmError::TrajectoryDiverged {
            step,
            detail: "non-finite state entering a solver stage".into(),
        });
    }
    let dist = params.forward(x, t, cond)?;
    Ok(velocity_from_eps(&dist, tau, eps).0)
}

/// Result of advancing one grid step.
pub struct StepOutcome {
    pub x_next: Vec<f64>,
    /// Effective velocity, increment / dt.
    pub velocity: Vec<f64>,
    /// Log-density of the stage-1 sampled velocity under the prediction at
    /// the step's starting state.
    pub log_density: f64,
}

/// Advance one step of the sampled flow from state x at grid index k of n.
/// This is the single code path for live sampling, replay, and guided
/// branching, so all three stay bit-compatible.
pub fn advance_step(
    params: &NetParams,
    x: &[f64],
    k: usize,
    n: usize,
    solver: Solver,
    tau: f64,
    eps: &[f64],
    cond: ConditionSet,
) -> Result<StepOutcome> {
    let d = x.len();
    let dt = 1.0 / n as f64;
    let t0 = k as f64 / n as f64;
    let t_mid = (k as f64 + 0.5) / n as f64;
    let t1 = (k + 1) as f64 / n as f64;

    let dist0 = params.forward(x, t0, cond)?;
    let (k1, log_density) = velocity_from_eps(&dist0, tau, eps);

    let inc = match solver {
        Solver::Euler => linalg::scale(&k1, dt),
        Solver::Midpoint => {
            let mut xm = x.to_vec();
            linalg::axpy(&mut xm, 0.5 * dt, &k1);
            let k2 = eval_stage(params, &xm, t_mid, cond, tau, eps, k)?;
            linalg::scale(&k2, dt)
        }
        Solver::Rk4 => {
            let mut xa = x.to_vec();
            linalg::axpy(&mut xa, 0.5 * dt, &k1);
            let k2 = eval_stage(params, &xa, t_mid, cond, tau, eps, k)?;
            let mut xb = x.to_vec();
            linalg::axpy(&mut xb, 0.5 * dt, &k2);
            let k3 = eval_stage(params, &xb, t_mid, cond, tau, eps, k)?;
            let mut xc = x.to_vec();
            linalg::axpy(&mut xc, dt, &k3);
            let k4 = eval_stage(params, &xc, t1, cond, tau, eps, k)?;
            let combo: Vec<f64> = (0..d)
                .map(|i| (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
                .collect();
            linalg::scale(&combo, dt)
        }
    };
    let mut x_next = x.to_vec();
    linalg::axpy(&mut x_next, 1.0, &inc);
    if !linalg::all_finite(&x_next) {
        return Err(DfmError::TrajectoryDiverged {
            step: k,
            detail: format!("state became non-finite after the step update (tau = {tau})"),
        });
    }
    Ok(StepOutcome { x_next, velocity: linalg::scale(&inc, 1.0 / dt), log_density })
}

/// Deterministic mean-field completion: run the remaining steps of the grid
/// at tau = 0 from the state reached after `start_step` steps. Consumes no
/// randomness; used to preview where an intermediate latent lands at t = 1.
pub fn complete_mean_field(
    params: &NetParams,
    x: &[f64],
    start_step: usize,
    n: usize,
    solver: Solver,
    cond: ConditionSet,
) -> Result<Vec<f64>> {
    let zeros = vec![0.0; x.len()];
    let mut state = x.to_vec();
    for k in start_step..n {
        state = advance_step(params, &state, k, n, solver, 0.0, &zeros, cond)?.x_next;
    }
    Ok(state)
}

fn integrate_impl<R: Rng>(
    params: &NetParams,
    x0: &[f64],
    cond: ConditionSet,
    cfg: &SamplerConfig,
    mut noise: NoiseSource<R>,
) -> Result<Trajectory> {
    cfg.validate()?;
    let d = params.sizes.d;
    if x0.len() != d {
        return Err(DfmError::InputDomain(format!(
            "x0 has length {}, network expects d = {d}",
            x0.len()
        )));
    }
    if !linalg::all_finite(x0) {
        return Err(DfmError::InputDomain("x0 is non-finite".into()));
    }
    let n = cfg.num_steps;
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(n + 1);
    states.push((0.0, x.clone()));
    let mut velocities = Vec::with_capacity(n);
    let mut noise_draws = Vec::with_capacity(n);
    let mut cum_log_confidence = 0.0;

    for k in 0..n {
        let eps = noise.next_eps(k, d, cfg.tau)?;
        let out = advance_step(params, &x, k, n, cfg.solver, cfg.tau, &eps, cond)?;
        cum_log_confidence += out.log_density;
        x = out.x_next;
        velocities.push(out.velocity);
        noise_draws.push(eps);
        states.push(((k + 1) as f64 / n as f64, x.clone()));
    }
    Ok(Trajectory { states, sampled_velocities: velocities, noise_draws, cum_log_confidence })
}

/// Integrate the sampled flow from x0 at t=0 to t=1. Multi-stage solvers draw
/// one eps per step and reuse it at every stage of that step.
pub fn integrate<R: Rng>(
    params: &NetParams,
    x0: &[f64],
    cond: ConditionSet,
    cfg: &SamplerConfig,
    r: &mut R,
) -> Result<Trajectory> {
    integrate_impl(params, x0, cond, cfg, NoiseSource::Stream::<R>(r))
}

/// Re-run an integration with previously recorded noise draws. Produces a
/// bit-identical trajectory because it shares every arithmetic path with
/// [`integrate`].
pub fn integrate_recorded(
    params: &NetParams,
    x0: &[f64],
    cond: ConditionSet,
    cfg: &SamplerConfig,
    noise_draws: &[Vec<f64>],
) -> Result<Trajectory> {
    if noise_draws.len() != cfg.num_steps {
        return Err(DfmError::InputDomain(format!(
            "{} recorded draws for {} steps",
            noise_draws.len(),
            cfg.num_steps
        )));
    }
    integrate_impl::<rand_chacha::ChaCha8Rng>(params, x0, cond, cfg, NoiseSource::Recorded(noise_draws))
}

/// Draw x0 ~ N(0, I) from the stream, then integrate. The stream is consumed
/// in a fixed order: x0 first, then one eps per step.
pub fn generate_trajectory<R: Rng>(
    params: &NetParams,
    cond: ConditionSet,
    cfg: &SamplerConfig,
    r: &mut R,
) -> Result<Trajectory> {
    let x0 = rng_util::standard_normal_vec(r, params.sizes.d);
    integrate(params, &x0, cond, cfg, r)
}

/// Final sample only; see [`generate_trajectory`].
pub fn generate<R: Rng>(
    params: &NetParams,
    cond: ConditionSet,
    cfg: &SamplerConfig,
    r: &mut R,
) -> Result<Vec<f64>> {
    Ok(generate_trajectory(params, cond, cfg, r)?.final_state().to_vec())
}
