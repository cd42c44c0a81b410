//! MD drivers: velocity Verlet and a BAOAB Langevin thermostat.
//!
//! Reduced units throughout: k_B = 1, and masses default to 1 in the
//! toy systems. The state caches the forces belonging to its current
//! positions, so each step costs exactly one new force evaluation.
//!
//! Planar systems (2D flag on the configuration) keep their out-of-plane
//! coordinates inert: kicks, drifts, and thermostat noise apply to the
//! active axes only, so z positions and velocities stay bitwise fixed.

use rand::Rng;

use crate::data::{AtomicConfiguration, Dim};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Positions, velocities, and the cached forces for those positions.
#[derive(Debug, Clone)]
pub struct MdState<T> {
    pub config: AtomicConfiguration<T>,
    pub velocities: Vec<[T; 3]>,
    pub masses: Vec<T>,
    /// Forces evaluated at `config` positions.
    pub forces: Vec<[T; 3]>,
    pub time: T,
    pub step: u64,
}

impl<T: Real> MdState<T> {
    pub fn new(
        config: AtomicConfiguration<T>,
        velocities: Vec<[T; 3]>,
        masses: Vec<T>,
        forces: Vec<[T; 3]>,
    ) -> Result<Self> {
        let n = config.n_atoms();
        if velocities.len() != n || masses.len() != n || forces.len() != n {
            return Err(Error::Config(format!(
                "state shapes disagree: {n} atoms, {} velocities, {} masses, {} forces",
                velocities.len(),
                masses.len(),
                forces.len()
            )));
        }
        if masses.iter().any(|m| !(*m > T::zero()) || !m.as_f64().is_finite()) {
            return Err(Error::Config("masses must be positive and finite".into()));
        }
        for row in velocities.iter().chain(forces.iter()) {
            if row.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(Error::Config("velocities and forces must be finite".into()));
            }
        }
        if config.dim() == Dim::Two
            && velocities.iter().any(|v| v[2] != T::zero())
        {
            return Err(Error::Config(
                "planar state needs zero out-of-plane velocities".into(),
            ));
        }
        Ok(Self { config, velocities, masses, forces, time: T::zero(), step: 0 })
    }

    fn active_axes(&self) -> usize {
        match self.config.dim() {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    /// 2 KE / dof with k_B = 1 and dof = (spatial dim) * (atom count).
    pub fn instantaneous_temperature(&self) -> T {
        let axes = self.active_axes();
        let mut twice_ke = T::zero();
        for (v, &m) in self.velocities.iter().zip(&self.masses) {
            for &vc in v.iter().take(axes) {
                twice_ke += m * vc * vc;
            }
        }
        twice_ke / T::from_usize(axes * self.config.n_atoms())
    }

    pub fn kinetic_energy(&self) -> T {
        T::half()
            * T::from_usize(self.active_axes() * self.config.n_atoms())
            * self.instantaneous_temperature()
    }
}

fn checked_forces<T: Real>(forces: Vec<[T; 3]>, n: usize, step: u64) -> Result<Vec<[T; 3]>> {
    if forces.len() != n {
        return Err(Error::Config(format!(
            "force provider returned {} rows for {n} atoms",
            forces.len()
        )));
    }
    for row in &forces {
        if row.iter().any(|f| !f.as_f64().is_finite()) {
            return Err(Error::Numeric(format!("non-finite force at MD step {step}")));
        }
    }
    Ok(forces)
}

fn half_kick<T: Real>(state: &mut MdState<T>, dt: T, axes: usize) {
    let half_dt = T::half() * dt;
    for i in 0..state.velocities.len() {
        for c in 0..axes {
            state.velocities[i][c] += half_dt * state.forces[i][c] / state.masses[i];
        }
    }
}

fn drift<T: Real>(state: &mut MdState<T>, dt: T, axes: usize) -> Result<()> {
    let mut positions = state.config.positions().to_vec();
    for (p, v) in positions.iter_mut().zip(&state.velocities) {
        for c in 0..axes {
            p[c] += dt * v[c];
        }
    }
    state.config.set_positions(positions)
}

/// One NVE step: half kick (cached forces), drift, fresh forces,
/// half kick.
pub fn velocity_verlet_step<T, F>(state: &mut MdState<T>, force_fn: &mut F, dt: T) -> Result<()>
where
    T: Real,
    F: FnMut(&AtomicConfiguration<T>) -> Result<Vec<[T; 3]>>,
{
    if !(dt > T::zero()) {
        return Err(Error::Config(format!("dt must be > 0, got {}", dt.as_f64())));
    }
    let axes = state.active_axes();
    half_kick(state, dt, axes);
    drift(state, dt, axes)?;
    state.forces = checked_forces(force_fn(&state.config)?, state.config.n_atoms(), state.step)?;
    half_kick(state, dt, axes);
    state.time += dt;
    state.step += 1;
    Ok(())
}

/// One BAOAB step: half kick, half drift, Ornstein-Uhlenbeck velocity
/// refresh, half drift, fresh forces, half kick. With friction = 0 and
/// temperature = 0 the O-step is the identity and the update reduces
/// exactly to velocity Verlet.
pub fn langevin_step<T, F, R>(
    state: &mut MdState<T>,
    force_fn: &mut F,
    dt: T,
    friction: T,
    temperature: T,
    rng: &mut R,
) -> Result<()>
where
    T: Real,
    F: FnMut(&AtomicConfiguration<T>) -> Result<Vec<[T; 3]>>,
    R: Rng + ?Sized,
{
    if !(dt > T::zero()) {
        return Err(Error::Config(format!("dt must be > 0, got {}", dt.as_f64())));
    }
    if !(friction >= T::zero()) || !(temperature >= T::zero()) {
        return Err(Error::Config(
            "friction and temperature must be >= 0".into(),
        ));
    }
    if friction == T::zero() {
        // The velocity refresh is the identity; take the plain NVE path
        // so the reduction is exact, not merely to rounding.
        return velocity_verlet_step(state, force_fn, dt);
    }
    let axes = state.active_axes();
    let half_dt = T::half() * dt;
    let c1 = (-friction * dt).exp();
    let c2 = (T::one() - c1 * c1).sqrt();

    half_kick(state, dt, axes);
    drift(state, half_dt, axes)?;
    for i in 0..state.velocities.len() {
        let thermal = (temperature / state.masses[i]).sqrt();
        for c in 0..axes {
            let xi = T::standard_normal(rng);
            state.velocities[i][c] = c1 * state.velocities[i][c] + c2 * thermal * xi;
        }
    }
    drift(state, half_dt, axes)?;
    state.forces = checked_forces(force_fn(&state.config)?, state.config.n_atoms(), state.step)?;
    half_kick(state, dt, axes);
    state.time += dt;
    state.step += 1;
    Ok(())
}

/// Thermal velocities at `temperature`, independent per active axis; the
/// center-of-mass drift is left in on purpose (toy systems are small and
/// the thermostat handles it).
pub fn maxwell_boltzmann_velocities<T: Real, R: Rng + ?Sized>(
    masses: &[T],
    temperature: T,
    dim: Dim,
    rng: &mut R,
) -> Result<Vec<[T; 3]>> {
    if !(temperature >= T::zero()) {
        return Err(Error::Config(format!(
            "temperature must be >= 0, got {}",
            temperature.as_f64()
        )));
    }
    let axes = match dim {
        Dim::Two => 2,
        Dim::Three => 3,
    };
    Ok(masses
        .iter()
        .map(|&m| {
            let scale = (temperature / m).sqrt();
            let mut v = [T::zero(); 3];
            for slot in v.iter_mut().take(axes) {
                *slot = scale * T::standard_normal(rng);
            }
            v
        })
        .collect())
}
