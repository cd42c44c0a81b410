//! Reference calculators with closed-form energies and exact forces.
//!
//! These stand in for the expensive electronic-structure call in a real
//! deployment: a Lennard-Jones cluster, a deliberately biased variant of
//! it (shifted equilibrium distance, the classic small-basis artifact), a
//! quartic double-well in a dimer bond length, and the Mueller-Brown
//! surface for a single particle in the plane. Every successful
//! evaluation bumps an atomic counter; all efficiency claims downstream
//! are stated in oracle-call counts.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{AtomicConfiguration, Dim};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::surrogate::EPS_DIST;

fn default_epsilon() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    1.0
}
fn default_bias() -> f64 {
    1.03
}
fn default_scale() -> f64 {
    1.0
}

/// Which analytic surface to evaluate, with its physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OracleSpec {
    LjCluster {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Lennard-Jones with the length scale stretched by `bias`, so its
    /// equilibrium distances are wrong by exactly that factor.
    LjClusterBiased {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_bias")]
        bias: f64,
    },
    /// Quartic double well in the bond length of a two-atom system:
    /// zero at both well minima, `barrier` at the midpoint.
    DoubleWellDimer { barrier: f64, r_low: f64, r_high: f64 },
    /// Standard four-Gaussian surface for one particle in the plane,
    /// optionally rescaled in energy.
    MuellerBrown2d {
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        match *self {
            OracleSpec::LjCluster { epsilon, sigma } => {
                if !(epsilon > 0.0 && sigma > 0.0) {
                    return bad("lj-cluster needs epsilon > 0 and sigma > 0");
                }
            }
            OracleSpec::LjClusterBiased { epsilon, sigma, bias } => {
                if !(epsilon > 0.0 && sigma > 0.0 && bias > 0.0) {
                    return bad("lj-cluster-biased needs positive epsilon, sigma, bias");
                }
            }
            OracleSpec::DoubleWellDimer { barrier, r_low, r_high } => {
                if !(barrier > 0.0) {
                    return bad("double-well-dimer needs barrier > 0");
                }
                if !(r_low > 0.0 && r_high > r_low) {
                    return bad("double-well-dimer needs 0 < r_low < r_high");
                }
            }
            OracleSpec::MuellerBrown2d { scale } => {
                if !(scale > 0.0) || !scale.is_finite() {
                    return bad("mueller-brown-2d needs scale > 0");
                }
            }
        }
        Ok(())
    }
}

/// An oracle plus its call meter.
#[derive(Debug)]
pub struct Oracle {
    spec: OracleSpec,
    calls: AtomicU64,
}

/// Mueller-Brown constants: amplitudes, quadratic-form coefficients, and
/// Gaussian centers.
const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_AX: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_B: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_C: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

impl Oracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, calls: AtomicU64::new(0) })
    }

    #[inline]
    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// Number of successful evaluations so far.
    #[inline]
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Restore the call meter when resuming a run from a checkpoint.
    pub fn set_calls(&self, n: u64) {
        self.calls.store(n, Ordering::Relaxed);
    }

    /// Exact energy and forces for `config`.
    pub fn evaluate<T: Real>(
        &self,
        config: &AtomicConfiguration<T>,
    ) -> Result<(T, Vec<[T; 3]>)> {
        let out = match self.spec {
            OracleSpec::LjCluster { epsilon, sigma } => {
                lj_cluster(config, epsilon, sigma)?
            }
            OracleSpec::LjClusterBiased { epsilon, sigma, bias } => {
                lj_cluster(config, epsilon, bias * sigma)?
            }
            OracleSpec::DoubleWellDimer { barrier, r_low, r_high } => {
                double_well_dimer(config, barrier, r_low, r_high)?
            }
            OracleSpec::MuellerBrown2d { scale } => mueller_brown(config, scale)?,
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Max component deviation between analytic forces and a central
    /// finite difference of the energy with displacement `h`. Only the
    /// configuration's active axes are probed.
    pub fn verify_forces_fd<T: Real>(
        &self,
        config: &AtomicConfiguration<T>,
        h: T,
    ) -> Result<T> {
        if !(h > T::zero()) {
            return Err(Error::Config("finite-difference step must be positive".into()));
        }
        let (_, forces) = self.evaluate(config)?;
        let mut worst = T::zero();
        for atom in 0..config.n_atoms() {
            for axis in 0..config.dim().n_axes() {
                let displaced = |sign: T| -> Result<T> {
                    let mut pos = config.positions().to_vec();
                    pos[atom][axis] += sign * h;
                    let c = AtomicConfiguration::new(
                        pos,
                        config.species().to_vec(),
                        config.dim(),
                    )?;
                    Ok(self.evaluate(&c)?.0)
                };
                let fd = -(displaced(T::one())? - displaced(-T::one())?) / (T::two() * h);
                let dev = (fd - forces[atom][axis]).abs();
                if dev > worst {
                    worst = dev;
                }
            }
        }
        Ok(worst)
    }
}

fn pair_geometry<T: Real>(
    positions: &[[T; 3]],
    i: usize,
    j: usize,
) -> Result<(T, [T; 3])> {
    let mut d = [T::zero(); 3];
    let mut r_sq = T::zero();
    for axis in 0..3 {
        d[axis] = positions[i][axis] - positions[j][axis];
        r_sq += d[axis] * d[axis];
    }
    let r = r_sq.sqrt();
    if r < T::from_f64(EPS_DIST) {
        return Err(Error::Oracle(format!("atoms {i} and {j} are coincident (r = {r})")));
    }
    Ok((r, d))
}

fn lj_cluster<T: Real>(
    config: &AtomicConfiguration<T>,
    epsilon: f64,
    sigma: f64,
) -> Result<(T, Vec<[T; 3]>)> {
    let eps = T::from_f64(epsilon);
    let sig = T::from_f64(sigma);
    let n = config.n_atoms();
    let positions = config.positions();
    let four = T::two() * T::two();
    let six = T::from_f64(6.0);
    let twelve = T::from_f64(12.0);

    let mut energy = T::zero();
    let mut forces = vec![[T::zero(); 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (r, d) = pair_geometry(positions, i, j)?;
            let sr = sig / r;
            let sr6 = sr.powi(6);
            let sr12 = sr6 * sr6;
            energy += four * eps * (sr12 - sr6);
            // dE/dr = 4 eps (-12 sr^12 + 6 sr^6)/r; force on i is -dE/dr * u.
            let de_dr = four * eps * (six * sr6 - twelve * sr12) / r;
            for axis in 0..3 {
                let f = -de_dr * d[axis] / r;
                forces[i][axis] += f;
                forces[j][axis] -= f;
            }
        }
    }
    Ok((energy, forces))
}

fn double_well_dimer<T: Real>(
    config: &AtomicConfiguration<T>,
    barrier: f64,
    r_low: f64,
    r_high: f64,
) -> Result<(T, Vec<[T; 3]>)> {
    if config.n_atoms() != 2 {
        return Err(Error::Oracle(format!(
            "double-well-dimer needs exactly 2 atoms, got {}",
            config.n_atoms()
        )));
    }
    let h = T::from_f64(barrier);
    let center = T::from_f64(0.5 * (r_low + r_high));
    let half_gap = T::from_f64(0.5 * (r_high - r_low));
    let w_sq = half_gap * half_gap;

    let positions = config.positions();
    let (r, d) = pair_geometry(positions, 0, 1)?;
    // E = h (x^2 - w^2)^2 / w^4 with x = r - center: zero at both minima,
    // h at the midpoint.
    let x = r - center;
    let q = x * x - w_sq;
    let energy = h * q * q / (w_sq * w_sq);
    let de_dr = T::from_f64(4.0) * h * x * q / (w_sq * w_sq);
    let mut forces = vec![[T::zero(); 3]; 2];
    for axis in 0..3 {
        let f = -de_dr * d[axis] / r;
        forces[0][axis] = f;
        forces[1][axis] = -f;
    }
    Ok((energy, forces))
}

fn mueller_brown<T: Real>(
    config: &AtomicConfiguration<T>,
    scale: f64,
) -> Result<(T, Vec<[T; 3]>)> {
    if config.n_atoms() != 1 || config.dim() != Dim::Two {
        return Err(Error::Oracle(
            "mueller-brown-2d needs exactly 1 atom in a planar configuration".into(),
        ));
    }
    let p = config.positions()[0];
    let (x, y) = (p[0], p[1]);
    let s = T::from_f64(scale);
    let mut energy = T::zero();
    let mut gx = T::zero();
    let mut gy = T::zero();
    for k in 0..4 {
        let dx = x - T::from_f64(MB_X0[k]);
        let dy = y - T::from_f64(MB_Y0[k]);
        let (a, b, c) = (T::from_f64(MB_AX[k]), T::from_f64(MB_B[k]), T::from_f64(MB_C[k]));
        let e = T::from_f64(MB_A[k]) * (a * dx * dx + b * dx * dy + c * dy * dy).exp();
        energy += e;
        gx += e * (T::two() * a * dx + b * dy);
        gy += e * (b * dx + T::two() * c * dy);
    }
    Ok((s * energy, vec![[-s * gx, -s * gy, T::zero()]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dimer(r: f64) -> AtomicConfiguration<f64> {
        AtomicConfiguration::new(
            vec![[0.0; 3], [r, 0.0, 0.0]],
            vec![0, 0],
            Dim::Three,
        )
        .unwrap()
    }

    fn random_cluster(n: usize, seed: u64) -> AtomicConfiguration<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Spread atoms out to keep pair distances comfortably nonsingular.
        let positions = (0..n)
            .map(|i| {
                [
                    1.7 * i as f64 + 0.3 * rng.gen::<f64>(),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                ]
            })
            .collect();
        AtomicConfiguration::new(positions, vec![0; n], Dim::Three).unwrap()
    }

    #[test]
    fn lj_dimer_minimum_energy_and_zero_force() {
        let oracle =
            Oracle::new(OracleSpec::LjCluster { epsilon: 0.7, sigma: 1.1 }).unwrap();
        let r_min = 2f64.powf(1.0 / 6.0) * 1.1;
        let (e, f) = oracle.evaluate(&dimer(r_min)).unwrap();
        assert!((e - (-0.7)).abs() < 1e-12);
        for atom in &f {
            for c in atom {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_forces_match_fd_on_random_clusters() {
        let oracle = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        for seed in 0..5 {
            let config = random_cluster(5, seed);
            let (_, forces) = oracle.evaluate(&config).unwrap();
            let scale = forces
                .iter()
                .flat_map(|f| f.iter())
                .fold(0.0f64, |m, &c| m.max(c.abs()))
                .max(1.0);
            let dev = oracle.verify_forces_fd(&config, 1e-5).unwrap();
            assert!(dev / scale < 1e-8, "seed {seed}: rel dev {}", dev / scale);
        }
    }

    #[test]
    fn biased_minimum_shifted_by_bias_factor() {
        let unbiased = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        let biased = Oracle::new(OracleSpec::LjClusterBiased {
            epsilon: 1.0,
            sigma: 1.0,
            bias: 1.03,
        })
        .unwrap();
        let r_min = 2f64.powf(1.0 / 6.0);
        let (_, f0) = unbiased.evaluate(&dimer(r_min)).unwrap();
        let (_, f1) = biased.evaluate(&dimer(1.03 * r_min)).unwrap();
        assert!(f0[0][0].abs() < 1e-12);
        assert!(f1[0][0].abs() < 1e-12);
        // At the unbiased minimum the biased oracle still pulls outward.
        let (_, f_mix) = biased.evaluate(&dimer(r_min)).unwrap();
        assert!(f_mix[0][0] < -1e-3);
    }

    #[test]
    fn fd_deviation_scales_quadratically_in_h() {
        let oracle = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        let config = dimer(1.4);
        let small = oracle.verify_forces_fd(&config, 1e-3).unwrap();
        let large = oracle.verify_forces_fd(&config, 0.1).unwrap();
        let ratio = large / small;
        // h grows 100x, so an O(h^2) truncation error grows ~1e4.
        assert!(ratio > 1e3 && ratio < 1e5, "ratio {ratio}");
        assert!(oracle.verify_forces_fd(&config, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn fd_deviation_tiny_at_equilibrium() {
        let oracle = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        let dev = oracle
            .verify_forces_fd(&dimer(2f64.powf(1.0 / 6.0)), 1e-6)
            .unwrap();
        assert!(dev < 1e-9, "{dev}");
    }

    #[test]
    fn energies_invariant_forces_sum_to_zero() {
        let oracle = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        let config = random_cluster(6, 42);
        let (e0, forces) = oracle.evaluate(&config).unwrap();

        let mut net = [0.0; 3];
        for f in &forces {
            for c in 0..3 {
                net[c] += f[c];
            }
        }
        for c in net {
            assert!(c.abs() < 1e-12);
        }

        let angle: f64 = 1.3;
        let (sin, cos) = angle.sin_cos();
        let moved: Vec<[f64; 3]> = config
            .positions()
            .iter()
            .map(|p| {
                [
                    cos * p[0] - sin * p[2] + 4.0,
                    p[1] - 2.0,
                    sin * p[0] + cos * p[2] + 1.0,
                ]
            })
            .collect();
        let rotated =
            AtomicConfiguration::new(moved, config.species().to_vec(), Dim::Three).unwrap();
        let (e1, _) = oracle.evaluate(&rotated).unwrap();
        assert!((e0 - e1).abs() < 1e-10);
    }

    #[test]
    fn double_well_minima_and_barrier_are_exact() {
        let oracle = Oracle::new(OracleSpec::DoubleWellDimer {
            barrier: 1.0,
            r_low: 1.25,
            r_high: 1.75,
        })
        .unwrap();
        for r in [1.25, 1.75] {
            let (e, f) = oracle.evaluate(&dimer(r)).unwrap();
            assert!(e.abs() < 1e-14);
            assert!(f[0][0].abs() < 1e-14);
        }
        let (barrier, f_mid) = oracle.evaluate(&dimer(1.5)).unwrap();
        assert!((barrier - 1.0).abs() < 1e-14);
        assert!(f_mid[0][0].abs() < 1e-14);
        assert!(oracle.verify_forces_fd(&dimer(1.37), 1e-6).unwrap() < 1e-7);
        assert!(oracle.evaluate(&random_cluster(3, 1)).is_err());
    }

    #[test]
    fn mueller_brown_matches_frozen_references() {
        let oracle = Oracle::new(OracleSpec::MuellerBrown2d { scale: 1.0 }).unwrap();
        let at = |x: f64, y: f64| {
            AtomicConfiguration::new(vec![[x, y, 0.0]], vec![0], Dim::Two).unwrap()
        };
        let (e_origin, _) = oracle.evaluate(&at(0.0, 0.0)).unwrap();
        assert!((e_origin - (-48.401274173183881)).abs() < 1e-10);
        let (e_basin, _) = oracle.evaluate(&at(-0.5, 1.5)).unwrap();
        assert!((e_basin - (-145.27271669314961)).abs() < 1e-10);

        // Global minimum: forces vanish, energy at the frozen depth.
        let (e_min, f_min) = oracle
            .evaluate(&at(-0.5582236346330243, 1.4417258418046687))
            .unwrap();
        assert!((e_min - (-146.69951720995401)).abs() < 1e-9);
        assert!(f_min[0][0].abs() < 1e-8 && f_min[0][1].abs() < 1e-8);
        assert_eq!(f_min[0][2], 0.0);

        assert!(oracle.verify_forces_fd(&at(0.1, 0.3), 1e-6).unwrap() < 2e-5);

        let halved = Oracle::new(OracleSpec::MuellerBrown2d { scale: 0.01 }).unwrap();
        let (e_scaled, _) = halved.evaluate(&at(0.0, 0.0)).unwrap();
        assert!((e_scaled - 0.01 * e_origin).abs() < 1e-12);

        // Wrong shape for this surface.
        assert!(oracle.evaluate(&random_cluster(2, 3)).is_err());
    }

    #[test]
    fn call_counter_counts_successful_evaluations() {
        let oracle = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
        assert_eq!(oracle.calls(), 0);
        oracle.evaluate(&dimer(1.2)).unwrap();
        oracle.evaluate(&dimer(1.3)).unwrap();
        assert_eq!(oracle.calls(), 2);
        let coincident = AtomicConfiguration::new(
            vec![[0.0; 3], [0.0, 0.0, 1e-9]],
            vec![0, 0],
            Dim::Three,
        )
        .unwrap();
        assert!(oracle.evaluate(&coincident).is_err());
        assert_eq!(oracle.calls(), 2);
        oracle.set_calls(7);
        assert_eq!(oracle.calls(), 7);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Oracle::new(OracleSpec::LjCluster { epsilon: 0.0, sigma: 1.0 }).is_err());
        assert!(Oracle::new(OracleSpec::DoubleWellDimer {
            barrier: 1.0,
            r_low: 2.0,
            r_high: 1.0
        })
        .is_err());
        assert!(Oracle::new(OracleSpec::MuellerBrown2d { scale: -1.0 }).is_err());
    }

    #[test]
    fn spec_round_trips_through_serde() {
        let spec = OracleSpec::LjClusterBiased { epsilon: 0.5, sigma: 1.2, bias: 1.03 };
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("lj-cluster-biased"));
        let back: OracleSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
