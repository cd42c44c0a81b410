//! Aggregation of per-member predictions into one predictive normal.
//!
//! Each ensemble member emits a mean and a variance; the aggregate is a
//! normal fitted to the uniform mixture of the member normals, so its
//! variance is the population variance of the member means (disagreement)
//! plus the mean of the member variances. Energies and every force
//! component aggregate the same way.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::surrogate::{ParameterVector, PredictiveOutput, Surrogate};

/// Member outputs plus their two-moment aggregate for one configuration.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction<T> {
    pub member_energies: Vec<T>,
    /// Fixed per-member energy noise scale shared by all members.
    pub member_sigma_energy: T,
    /// `[member][atom]` force means.
    pub member_forces: Vec<Vec<[T; 3]>>,
    /// `[member][atom]` isotropic force noise scales.
    pub member_force_sigmas: Vec<Vec<T>>,
    pub energy: T,
    /// Predictive energy standard deviation (disagreement + noise).
    pub sigma_energy: T,
    pub forces: Vec<[T; 3]>,
    /// Per-atom, per-component predictive force standard deviations.
    pub force_sigmas: Vec<[T; 3]>,
}

impl<T: Real> EnsemblePrediction<T> {
    #[inline]
    pub fn k(&self) -> usize {
        self.member_energies.len()
    }
}

fn mean_and_population_variance<T: Real>(values: impl Iterator<Item = T> + Clone, k: usize) -> (T, T) {
    let kf = T::from_usize(k);
    let mean = values.clone().fold(T::zero(), |s, v| s + v) / kf;
    let var = values.fold(T::zero(), |s, v| s + (v - mean) * (v - mean)) / kf;
    (mean, var)
}

/// Fit one normal to the member predictions. `sigma_energy` is the fixed
/// per-member energy noise scale.
pub fn aggregate<T: Real>(
    members: &[PredictiveOutput<T>],
    sigma_energy: T,
) -> Result<EnsemblePrediction<T>> {
    let k = members.len();
    if k == 0 {
        return Err(Error::Config("ensemble aggregation needs at least one member".into()));
    }
    let n_atoms = members[0].forces.len();
    if members.iter().any(|m| m.forces.len() != n_atoms || m.sigma.len() != n_atoms) {
        return Err(Error::Config("ensemble members disagree on atom count".into()));
    }

    let (energy, disagreement) = mean_and_population_variance(members.iter().map(|m| m.energy), k);
    let sigma_energy_total = (disagreement + sigma_energy * sigma_energy).sqrt();

    let kf = T::from_usize(k);
    let mut forces = vec![[T::zero(); 3]; n_atoms];
    let mut force_sigmas = vec![[T::zero(); 3]; n_atoms];
    for i in 0..n_atoms {
        // The member noise is isotropic per atom; only the disagreement
        // term differs across components.
        let noise = members
            .iter()
            .fold(T::zero(), |s, m| s + m.sigma[i] * m.sigma[i])
            / kf;
        for c in 0..3 {
            let (mean, var) = mean_and_population_variance(members.iter().map(|m| m.forces[i][c]), k);
            forces[i][c] = mean;
            force_sigmas[i][c] = (var + noise).sqrt();
        }
    }

    Ok(EnsemblePrediction {
        member_energies: members.iter().map(|m| m.energy).collect(),
        member_sigma_energy: sigma_energy,
        member_forces: members.iter().map(|m| m.forces.clone()).collect(),
        member_force_sigmas: members.iter().map(|m| m.sigma.clone()).collect(),
        energy,
        sigma_energy: sigma_energy_total,
        forces,
        force_sigmas,
    })
}

/// Evaluate every member on one configuration and aggregate.
pub fn ensemble_predict<T: Real>(
    surrogate: &Surrogate<T>,
    thetas: &[&ParameterVector<T>],
    config: &crate::data::AtomicConfiguration<T>,
) -> Result<EnsemblePrediction<T>> {
    let members = thetas
        .iter()
        .map(|theta| surrogate.predict(theta, config))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&members, surrogate.sigma_energy())
}

/// Log density of `truth` under the aggregated normal.
pub fn predictive_log_likelihood<T: Real>(mean: T, variance: T, truth: T) -> Result<T> {
    if !(variance > T::zero()) {
        return Err(Error::Numeric(format!(
            "predictive log-likelihood needs positive variance, got {}",
            variance.as_f64()
        )));
    }
    let two_pi = T::from_f64(2.0 * std::f64::consts::PI);
    let d = truth - mean;
    Ok(-T::half() * (two_pi * variance).ln() - d * d / (T::two() * variance))
}
