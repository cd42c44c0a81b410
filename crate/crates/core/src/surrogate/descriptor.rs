//! Rotation/translation/reflection-invariant per-atom descriptors.
//!
//! Each atom sees a radial Gaussian-basis expansion of its pairwise
//! distances, accumulated into one block per neighbor species and tapered
//! by a cosine cutoff envelope so energies and forces are smooth at the
//! cutoff. Pair geometry and basis derivatives are cached because every
//! downstream gradient (forces, likelihood) re-walks the pair list.

use serde::{Deserialize, Serialize};

use crate::data::AtomicConfiguration;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Two atoms closer than this are a singular descriptor input.
pub const EPS_DIST: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub n_species: usize,
    pub n_basis: usize,
    pub cutoff: f64,
}

impl DescriptorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_species == 0 {
            return Err(Error::Config("n_species must be at least 1".into()));
        }
        if self.n_basis < 2 {
            return Err(Error::Config("n_basis must be at least 2".into()));
        }
        if !(self.cutoff > 0.0) || !self.cutoff.is_finite() {
            return Err(Error::Config("cutoff must be positive and finite".into()));
        }
        Ok(())
    }

    /// Descriptor length: one basis block per neighbor species.
    #[inline]
    pub fn dim(&self) -> usize {
        self.n_species * self.n_basis
    }
}

/// Precomputed basis centers/width at the working precision.
#[derive(Debug, Clone)]
pub struct Descriptor<T> {
    spec: DescriptorSpec,
    centers: Vec<T>,
    inv_width_sq: T,
    cutoff: T,
}

/// Geometry and basis derivatives for one within-cutoff pair `i < j`.
#[derive(Debug, Clone)]
pub struct PairCache<T> {
    pub i: usize,
    pub j: usize,
    pub r: T,
    /// Unit vector from j to i: (r_i - r_j)/r.
    pub u: [T; 3],
    /// d phi_k / d r at this distance, for every basis function k.
    pub dphi: Vec<T>,
}

/// Featurization output: per-atom descriptor rows plus the pair caches
/// needed by force and parameter gradients.
#[derive(Debug, Clone)]
pub struct Features<T> {
    pub descriptors: Vec<Vec<T>>,
    pub pairs: Vec<PairCache<T>>,
}

impl<T: Real> Descriptor<T> {
    pub fn new(spec: DescriptorSpec) -> Result<Self> {
        spec.validate()?;
        // Centers equally spaced on [0, cutoff]; width equals the spacing.
        let spacing = spec.cutoff / (spec.n_basis - 1) as f64;
        let centers = (0..spec.n_basis)
            .map(|k| T::from_f64(k as f64 * spacing))
            .collect();
        Ok(Self {
            centers,
            inv_width_sq: T::from_f64(1.0 / (spacing * spacing)),
            cutoff: T::from_f64(spec.cutoff),
            spec,
        })
    }

    #[inline]
    pub fn spec(&self) -> &DescriptorSpec {
        &self.spec
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Basis value and derivative at distance `r`:
    /// phi_k(r) = exp(-(r-mu_k)^2/(2 l^2)) * fc(r) with the cosine taper
    /// fc(r) = (cos(pi r / rc) + 1)/2, which vanishes smoothly at rc.
    fn basis(&self, r: T, phi: &mut [T], dphi: &mut [T]) {
        let pi = T::from_f64(std::f64::consts::PI);
        let x = pi * r / self.cutoff;
        let fc = T::half() * (x.cos() + T::one());
        let dfc = -T::half() * pi / self.cutoff * x.sin();
        for (k, &mu) in self.centers.iter().enumerate() {
            let d = r - mu;
            let gauss = (-T::half() * d * d * self.inv_width_sq).exp();
            let dgauss = -d * self.inv_width_sq * gauss;
            phi[k] = gauss * fc;
            dphi[k] = dgauss * fc + gauss * dfc;
        }
    }

    pub fn featurize(&self, config: &AtomicConfiguration<T>) -> Result<Features<T>> {
        let n = config.n_atoms();
        let positions = config.positions();
        let species = config.species();
        for (idx, &z) in species.iter().enumerate() {
            if z as usize >= self.spec.n_species {
                return Err(Error::Config(format!(
                    "atom {idx} has species code {z}, architecture supports 0..{}",
                    self.spec.n_species
                )));
            }
        }

        let nb = self.spec.n_basis;
        let mut descriptors = vec![vec![T::zero(); self.dim()]; n];
        let mut pairs = Vec::new();
        let mut phi = vec![T::zero(); nb];
        let mut dphi = vec![T::zero(); nb];

        for i in 0..n {
            for j in (i + 1)..n {
                let mut dvec = [T::zero(); 3];
                let mut r_sq = T::zero();
                for axis in 0..3 {
                    let d = positions[i][axis] - positions[j][axis];
                    dvec[axis] = d;
                    r_sq += d * d;
                }
                let r = r_sq.sqrt();
                if r < T::from_f64(EPS_DIST) {
                    return Err(Error::Numeric(format!(
                        "atoms {i} and {j} are coincident (r = {r})"
                    )));
                }
                if r >= self.cutoff {
                    continue;
                }
                self.basis(r, &mut phi, &mut dphi);
                let block_i = species[j] as usize * nb;
                let block_j = species[i] as usize * nb;
                for k in 0..nb {
                    descriptors[i][block_i + k] += phi[k];
                    descriptors[j][block_j + k] += phi[k];
                }
                let inv_r = T::one() / r;
                pairs.push(PairCache {
                    i,
                    j,
                    r,
                    u: [dvec[0] * inv_r, dvec[1] * inv_r, dvec[2] * inv_r],
                    dphi: dphi.clone(),
                });
            }
        }
        Ok(Features { descriptors, pairs })
    }
}
