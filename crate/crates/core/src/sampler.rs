//! Stochastic-gradient Hamiltonian Monte Carlo over model parameters.
//!
//! Each posterior sample is the endpoint of an independent chain driven
//! by minibatch log-posterior gradients, with an AMSGrad-style diagonal
//! mass: the second-moment accumulator is ratcheted through a running
//! max, so the preconditioner only ever grows and can be frozen once the
//! chain has found the posterior's scale. A constant mass leaves the
//! stationary distribution untouched; freezing it is what makes the
//! later samples honest draws.
//!
//! The same step function serves three regimes: posterior sampling for
//! the ensemble (full injected noise), MAP-style pretraining (noise
//! scaled down, heavy friction), and deterministic optimization in tests
//! (temperature zero).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Real};
use crate::surrogate::{ParameterVector, PriorSpec, Surrogate};

/// Step-size schedule, evaluated pointwise by [`step_size`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    /// Oscillates between 0 and `gamma0` with period `2 * cycle_len`,
    /// starting at 0.
    CosineCycle { gamma0: f64, cycle_len: u64 },
    /// Half-cosine ramp from `gamma0` down to 0 across one ensemble
    /// update; zero afterwards.
    OtfDecay { gamma0: f64, steps_per_update: u64 },
    /// Geometric interpolation from `gamma0` to `gamma_end` over
    /// `horizon` steps; constant at `gamma_end` afterwards.
    ExpDecay { gamma0: f64, gamma_end: f64, horizon: u64 },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            ScheduleSpec::CosineCycle { gamma0, cycle_len } => {
                if !(gamma0 >= 0.0) || !gamma0.is_finite() {
                    return bad(format!("cosine-cycle gamma0 must be >= 0, got {gamma0}"));
                }
                if cycle_len == 0 {
                    return bad("cosine-cycle cycle_len must be >= 1".into());
                }
            }
            ScheduleSpec::OtfDecay { gamma0, steps_per_update } => {
                if !(gamma0 >= 0.0) || !gamma0.is_finite() {
                    return bad(format!("otf-decay gamma0 must be >= 0, got {gamma0}"));
                }
                if steps_per_update == 0 {
                    return bad("otf-decay steps_per_update must be >= 1".into());
                }
            }
            ScheduleSpec::ExpDecay { gamma0, gamma_end, horizon } => {
                if !(gamma0 > 0.0) || !(gamma_end > 0.0) {
                    return bad("exp-decay needs gamma0 > 0 and gamma_end > 0".into());
                }
                if horizon == 0 {
                    return bad("exp-decay horizon must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// Step size at (schedule-local) step `i`.
pub fn step_size<T: Real>(schedule: &ScheduleSpec, i: u64) -> T {
    let pi = std::f64::consts::PI;
    let gamma = match *schedule {
        ScheduleSpec::CosineCycle { gamma0, cycle_len } => {
            let phase = pi + i as f64 * pi / cycle_len as f64;
            gamma0 / 2.0 * (phase.cos() + 1.0)
        }
        ScheduleSpec::OtfDecay { gamma0, steps_per_update } => {
            if i >= steps_per_update {
                0.0
            } else {
                gamma0 / 2.0 * ((i as f64 * pi / steps_per_update as f64).cos() + 1.0)
            }
        }
        ScheduleSpec::ExpDecay { gamma0, gamma_end, horizon } => {
            if i >= horizon {
                gamma_end
            } else {
                let t = i as f64 / horizon as f64;
                (gamma0.ln() + t * (gamma_end.ln() - gamma0.ln())).exp()
            }
        }
    };
    T::from_f64(gamma)
}

/// Dynamics constants shared by every step of a chain.
#[derive(Debug, Clone)]
pub struct SghmcParams<T> {
    pub friction: T,
    /// Second-moment decay of the adaptive mass.
    pub beta2: T,
    pub eps_mass: T,
    /// Multiplier on the injected noise standard deviation.
    pub noise_scale: T,
}

impl<T: Real> Default for SghmcParams<T> {
    fn default() -> Self {
        Self {
            friction: T::from_f64(0.05),
            beta2: T::from_f64(0.999),
            eps_mass: T::from_f64(1e-8),
            noise_scale: T::one(),
        }
    }
}

impl<T: Real> SghmcParams<T> {
    /// MAP-style pretraining: overdamped, injected noise scaled by 0.1.
    pub fn pretrain() -> Self {
        Self {
            friction: T::one(),
            noise_scale: T::from_f64(0.1),
            ..Self::default()
        }
    }
}

/// One SGHMC chain: parameters, momentum, and the adaptive-mass
/// accumulators, plus a private rng stream.
#[derive(Debug, Clone)]
pub struct ChainState<T> {
    pub theta: ParameterVector<T>,
    pub momentum: Vec<T>,
    /// Second-moment accumulator (elementwise >= 0).
    pub v: Vec<T>,
    /// Running max of `v` (elementwise >= v); the mass is built from this.
    pub v_hat: Vec<T>,
    /// False until the first adaptive step seeds the accumulators.
    pub mass_ready: bool,
    /// While true, accumulators stay fixed and the mass is constant.
    pub mass_frozen: bool,
    pub step_count: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> ChainState<T> {
    pub fn new(theta: ParameterVector<T>, seed: u64) -> Self {
        let n = theta.len();
        Self {
            theta,
            momentum: vec![T::zero(); n],
            v: vec![T::zero(); n],
            v_hat: vec![T::zero(); n],
            mass_ready: false,
            mass_frozen: false,
            step_count: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Diagonal mass entry `i`: sqrt of the ratcheted accumulator, or
    /// identity while the accumulators are still unseeded.
    #[inline]
    fn mass(&self, i: usize, eps: T) -> T {
        if self.mass_ready {
            self.v_hat[i].sqrt() + eps
        } else {
            T::one()
        }
    }
}

/// One discretized underdamped-Langevin update in parameter space.
///
/// The gradient closure receives the current parameters and the chain's
/// rng (for minibatch draws) and must return an unbiased estimate of the
/// log-posterior gradient. Mass adaptation happens first (unless frozen),
/// then the momentum and position updates with the mass constant within
/// the step. Deterministic given the chain's rng state.
pub fn sghmc_step<T, F>(
    chain: &mut ChainState<T>,
    grad_fn: &mut F,
    gamma: T,
    temperature: T,
    params: &SghmcParams<T>,
) -> Result<()>
where
    T: Real,
    F: FnMut(&ParameterVector<T>, &mut ChaCha8Rng) -> Result<Vec<T>>,
{
    let grad = grad_fn(&chain.theta, &mut chain.rng)?;
    if grad.len() != chain.theta.len() {
        return Err(Error::Config(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            chain.theta.len()
        )));
    }
    if !all_finite(&grad) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at chain step {}",
            chain.step_count
        )));
    }

    if !chain.mass_frozen {
        if !chain.mass_ready {
            // Warm start: seed both accumulators with the first gradient's
            // square instead of decaying up from zero.
            for ((v, vh), &g) in chain.v.iter_mut().zip(&mut chain.v_hat).zip(&grad) {
                *v = g * g;
                *vh = *v;
            }
            chain.mass_ready = true;
        } else {
            let b2 = params.beta2;
            for ((v, vh), &g) in chain.v.iter_mut().zip(&mut chain.v_hat).zip(&grad) {
                *v = b2 * *v + (T::one() - b2) * g * g;
                if *v > *vh {
                    *vh = *v;
                }
            }
        }
    }

    let damp = T::one() - params.friction * gamma;
    let noise_base = T::two() * params.friction * gamma * temperature;
    for i in 0..grad.len() {
        let m = chain.mass(i, params.eps_mass);
        let xi = T::standard_normal(&mut chain.rng);
        let std = params.noise_scale * (noise_base * m).sqrt();
        chain.momentum[i] = damp * chain.momentum[i] + gamma * grad[i] + std * xi;
        chain.theta[i] += gamma * chain.momentum[i] / m;
    }
    chain.step_count += 1;
    Ok(())
}

/// Advance a chain `n_steps` steps under `schedule` (indexed locally from
/// 0), adapting the mass for the first `adapt_until` steps and keeping it
/// frozen afterwards.
pub fn run_chain<T, F>(
    chain: &mut ChainState<T>,
    mut grad_fn: F,
    schedule: &ScheduleSpec,
    n_steps: u64,
    adapt_until: u64,
    temperature: T,
    params: &SghmcParams<T>,
) -> Result<()>
where
    T: Real,
    F: FnMut(&ParameterVector<T>, &mut ChaCha8Rng) -> Result<Vec<T>>,
{
    schedule.validate()?;
    for i in 0..n_steps {
        chain.mass_frozen = i >= adapt_until;
        let gamma = step_size::<T>(schedule, i);
        sghmc_step(chain, &mut grad_fn, gamma, temperature, params)?;
    }
    Ok(())
}

/// The posterior ensemble: one chain per Monte-Carlo sample.
#[derive(Debug, Clone)]
pub struct EnsembleState<T> {
    pub chains: Vec<ChainState<T>>,
}

impl<T: Real> EnsembleState<T> {
    /// All chains start at the same parameters; their noise streams are
    /// seeded `base_seed, base_seed+1, ...`.
    pub fn from_center(theta0: &ParameterVector<T>, k: usize, base_seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ensemble needs at least one chain".into()));
        }
        let chains = (0..k)
            .map(|i| ChainState::new(theta0.clone(), base_seed + i as u64))
            .collect();
        Ok(Self { chains })
    }

    pub fn from_chains(chains: Vec<ChainState<T>>) -> Result<Self> {
        if chains.is_empty() {
            return Err(Error::Config("ensemble needs at least one chain".into()));
        }
        let n = chains[0].theta.len();
        if chains.iter().any(|c| c.theta.len() != n) {
            return Err(Error::Config("ensemble chains disagree on parameter count".into()));
        }
        Ok(Self { chains })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.chains.len()
    }

    pub fn thetas(&self) -> Vec<&ParameterVector<T>> {
        self.chains.iter().map(|c| &c.theta).collect()
    }
}

/// Settings for one ensemble refresh after an intervention.
#[derive(Debug, Clone)]
pub struct UpdateOpts {
    pub n_steps: u64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Adapt the mass during this update (first update of a run only).
    pub adapt_mass: bool,
}

impl Default for UpdateOpts {
    fn default() -> Self {
        Self { n_steps: 2000, batch_size: 5, temperature: 1.0, adapt_mass: false }
    }
}

/// Refresh every chain with `opts.n_steps` SGHMC steps of priority-drawn
/// minibatches. Chains run independently (and in parallel); one diverged
/// chain fails the whole update.
pub fn update_ensemble<T: Real>(
    ensemble: &mut EnsembleState<T>,
    surrogate: &Surrogate<T>,
    dataset: &Dataset<T>,
    prior: &PriorSpec<T>,
    schedule: &ScheduleSpec,
    opts: &UpdateOpts,
    params: &SghmcParams<T>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("ensemble update needs a non-empty dataset".into()));
    }
    schedule.validate()?;
    let temperature = T::from_f64(opts.temperature);
    let adapt_until = if opts.adapt_mass { opts.n_steps } else { 0 };
    ensemble
        .chains
        .par_iter_mut()
        .map(|chain| {
            run_chain(
                chain,
                |theta: &ParameterVector<T>, rng: &mut ChaCha8Rng| {
                    let batch = dataset.draw_minibatch(opts.batch_size, rng)?;
                    surrogate.grad_log_posterior_minibatch(theta, dataset, &batch, prior)
                },
                schedule,
                opts.n_steps,
                adapt_until,
                temperature,
                params,
            )
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

/// MAP-style pretraining: a single chain with damped noise and uniform
/// minibatches; the mass adapts for the first 90% of the budget and is
/// frozen for the rest. Returns the final parameters.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_map<T: Real>(
    surrogate: &Surrogate<T>,
    theta_init: ParameterVector<T>,
    dataset: &Dataset<T>,
    prior: &PriorSpec<T>,
    schedule: &ScheduleSpec,
    n_steps: u64,
    batch_size: usize,
    seed: u64,
    params: &SghmcParams<T>,
) -> Result<ParameterVector<T>> {
    if n_steps == 0 {
        return Ok(theta_init);
    }
    if dataset.is_empty() {
        return Err(Error::Config("pretraining needs a non-empty dataset".into()));
    }
    let mut chain = ChainState::new(theta_init, seed);
    let adapt_until = n_steps * 9 / 10;
    run_chain(
        &mut chain,
        |theta: &ParameterVector<T>, rng: &mut ChaCha8Rng| {
            let batch = dataset.draw_uniform_minibatch(batch_size, rng)?;
            surrogate.grad_log_posterior_minibatch(theta, dataset, &batch, prior)
        },
        schedule,
        n_steps,
        adapt_until,
        T::one(),
        params,
    )?;
    Ok(chain.theta)
}
