//! Neural interatomic potential with a per-atom uncertainty head.
//!
//! The model maps each atom's invariant descriptor row through a shared
//! trunk to a per-atom energy and a per-atom force noise scale
//! `sigma_i = exp(s_i)`. Total energy is the sum over atoms; forces are
//! exact analytic derivatives through the descriptor pair list, so energy
//! and force predictions are always consistent.
//!
//! The likelihood of a labeled sample is Gaussian: one energy factor with
//! a fixed width supplied at construction, and one isotropic factor per
//! atomic force vector with the learned width. Its parameter gradient is
//! assembled from the layout's tangent/reverse passes; the force-residual
//! terms enter through a descriptor-space direction built on the pair
//! list, mirroring how the forces themselves are assembled.

mod descriptor;
mod mlp;

pub use descriptor::{Descriptor, DescriptorSpec, Features, PairCache, EPS_DIST};
pub use mlp::{LayerEntry, Layout, Part};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AtomicConfiguration, Dataset, LabeledSample, WeightedBatch};
use crate::error::{Error, Result};
use crate::scalar::Real;

use mlp::{AtomFwd, AtomTan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub n_species: usize,
    pub n_basis: usize,
    pub cutoff: f64,
    pub trunk_widths: Vec<usize>,
    pub sigma_head_widths: Vec<usize>,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            n_species: 1,
            n_basis: 16,
            cutoff: 3.0,
            trunk_widths: vec![32, 32],
            sigma_head_widths: vec![16, 8],
        }
    }
}

/// Flat model parameters. Interpretation of the entries is fixed by the
/// owning model's [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T>(Vec<T>);

impl<T: Real> ParameterVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for ParameterVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for ParameterVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// Prior over the flat parameter vector.
///
/// `Transfer` recentres on a pretrained parameter vector with width
/// `sigma_tl`, except for noise-head entries whose centres are forced to
/// zero: the pretrained noise head reflects the old data distribution and
/// is deliberately not carried over.
#[derive(Debug, Clone)]
pub enum PriorSpec<T> {
    MeanField,
    Transfer { center: ParameterVector<T>, sigma_tl: T },
}

/// Model output for one configuration.
#[derive(Debug, Clone)]
pub struct PredictiveOutput<T> {
    pub energy: T,
    pub forces: Vec<[T; 3]>,
    /// Per-atom force noise scale, always positive.
    pub sigma: Vec<T>,
}

#[derive(Debug)]
pub struct Surrogate<T> {
    arch: ArchitectureSpec,
    descriptor: Descriptor<T>,
    layout: Layout,
    sigma_energy: T,
}

/// Full forward state for one configuration, kept for gradient passes.
struct Evaluation<T> {
    features: Features<T>,
    fwd: Vec<AtomFwd<T>>,
    energy: T,
    forces: Vec<[T; 3]>,
    sigma: Vec<T>,
}

impl<T: Real> Surrogate<T> {
    /// `sigma_energy` is the fixed width of the energy likelihood factor.
    pub fn new(arch: ArchitectureSpec, sigma_energy: T) -> Result<Self> {
        if !(sigma_energy > T::zero()) || !sigma_energy.is_finite() {
            return Err(Error::Config(format!(
                "energy noise width must be positive and finite, got {sigma_energy}"
            )));
        }
        let descriptor = Descriptor::new(DescriptorSpec {
            n_species: arch.n_species,
            n_basis: arch.n_basis,
            cutoff: arch.cutoff,
        })?;
        let layout = Layout::new(descriptor.dim(), &arch.trunk_widths, &arch.sigma_head_widths)?;
        Ok(Self { arch, descriptor, layout, sigma_energy })
    }

    #[inline]
    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    #[inline]
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    #[inline]
    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    #[inline]
    pub fn sigma_energy(&self) -> T {
        self.sigma_energy
    }

    pub fn init_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector<T> {
        ParameterVector(mlp::init_parameters(&self.layout, rng))
    }

    pub fn featurize(&self, config: &AtomicConfiguration<T>) -> Result<Features<T>> {
        self.descriptor.featurize(config)
    }

    fn check_theta(&self, theta: &ParameterVector<T>) -> Result<()> {
        if theta.len() != self.layout.n_params {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                theta.len(),
                self.layout.n_params
            )));
        }
        Ok(())
    }

    fn evaluate(&self, theta: &[T], config: &AtomicConfiguration<T>) -> Result<Evaluation<T>> {
        let features = self.descriptor.featurize(config)?;
        let n = config.n_atoms();
        let species = config.species();
        let nb = self.arch.n_basis;

        let mut fwd = Vec::with_capacity(n);
        let mut input_grads = Vec::with_capacity(n);
        let mut energy = T::zero();
        let mut sigma = Vec::with_capacity(n);
        for row in &features.descriptors {
            let f = self.layout.forward(theta, row);
            energy += f.e;
            sigma.push(f.s.exp());
            input_grads.push(self.layout.input_grad(theta, &f));
            fwd.push(f);
        }

        // dE/dr via the pair list; forces are the negative.
        let mut de_dr = vec![[T::zero(); 3]; n];
        for pair in &features.pairs {
            let (i, j) = (pair.i, pair.j);
            let bi = species[j] as usize * nb;
            let bj = species[i] as usize * nb;
            let gi = &input_grads[i][bi..bi + nb];
            let gj = &input_grads[j][bj..bj + nb];
            let mut c = T::zero();
            for k in 0..nb {
                c += (gi[k] + gj[k]) * pair.dphi[k];
            }
            for axis in 0..3 {
                let step = c * pair.u[axis];
                de_dr[i][axis] += step;
                de_dr[j][axis] -= step;
            }
        }
        let forces = de_dr
            .into_iter()
            .map(|g| [-g[0], -g[1], -g[2]])
            .collect();

        Ok(Evaluation { features, fwd, energy, forces, sigma })
    }

    pub fn predict(
        &self,
        theta: &ParameterVector<T>,
        config: &AtomicConfiguration<T>,
    ) -> Result<PredictiveOutput<T>> {
        self.check_theta(theta)?;
        let ev = self.evaluate(theta, config)?;
        Ok(PredictiveOutput { energy: ev.energy, forces: ev.forces, sigma: ev.sigma })
    }

    /// Log density of the sample's labels under the model, and its
    /// gradient with respect to the parameters.
    ///
    /// Planar configurations contribute only their active force components
    /// to the normalization, keeping the noise head unbiased when one axis
    /// carries identically zero residuals.
    pub fn log_likelihood(
        &self,
        theta: &ParameterVector<T>,
        sample: &LabeledSample<T>,
    ) -> Result<(T, Vec<T>)> {
        self.check_theta(theta)?;
        let config = &sample.config;
        let n = config.n_atoms();
        let ev = self.evaluate(theta, config)?;
        let n_axes = T::from_usize(config.dim().n_axes());
        let ln_2pi = T::from_f64((2.0 * std::f64::consts::PI).ln());

        let de = ev.energy - sample.energy;
        let var_e = self.sigma_energy * self.sigma_energy;
        let mut value =
            -de * de / (T::two() * var_e) - T::half() * (ln_2pi + var_e.ln());

        // Force residuals: beta is the likelihood gradient w.r.t. the
        // predicted forces and doubles as the displacement field whose
        // directional energy derivative appears in the parameter gradient.
        let mut beta = vec![[T::zero(); 3]; n];
        let mut seed_s = vec![T::zero(); n];
        for i in 0..n {
            let var = ev.sigma[i] * ev.sigma[i];
            let mut sq = T::zero();
            for c in 0..3 {
                let r = ev.forces[i][c] - sample.forces[i][c];
                sq += r * r;
                beta[i][c] = -r / var;
            }
            value -= sq / (T::two() * var)
                + n_axes * (T::half() * ln_2pi + ev.sigma[i].ln());
            seed_s[i] = sq / var - n_axes;
        }

        // Descriptor-space tangent direction of each atom under the beta
        // displacement field, built exactly like the forces themselves.
        let nb = self.arch.n_basis;
        let species = config.species();
        let mut v = vec![vec![T::zero(); self.descriptor.dim()]; n];
        for pair in &ev.features.pairs {
            let (i, j) = (pair.i, pair.j);
            let mut delta = T::zero();
            for c in 0..3 {
                delta += pair.u[c] * (beta[i][c] - beta[j][c]);
            }
            let bi = species[j] as usize * nb;
            let bj = species[i] as usize * nb;
            for k in 0..nb {
                let step = pair.dphi[k] * delta;
                v[i][bi + k] += step;
                v[j][bj + k] += step;
            }
        }

        let seed_e = -de / var_e;
        let mut grad = vec![T::zero(); self.layout.n_params];
        for a in 0..n {
            let tan: AtomTan<T> = self.layout.tangent(theta, &ev.fwd[a], &v[a]);
            self.layout.reverse(
                theta,
                &ev.fwd[a],
                Some(&tan),
                seed_e,
                seed_s[a],
                -T::one(),
                &mut grad,
            );
        }
        Ok((value, grad))
    }

    /// Log prior density and its gradient.
    pub fn log_prior(
        &self,
        theta: &ParameterVector<T>,
        prior: &PriorSpec<T>,
    ) -> Result<(T, Vec<T>)> {
        self.check_theta(theta)?;
        let ln_2pi = T::from_f64((2.0 * std::f64::consts::PI).ln());
        let np = T::from_usize(self.layout.n_params);
        match prior {
            PriorSpec::MeanField => {
                let mut value = -T::half() * np * ln_2pi;
                let mut grad = Vec::with_capacity(theta.len());
                for &t in theta.iter() {
                    value -= T::half() * t * t;
                    grad.push(-t);
                }
                Ok((value, grad))
            }
            PriorSpec::Transfer { center, sigma_tl } => {
                if center.len() != self.layout.n_params {
                    return Err(Error::Config(format!(
                        "transfer prior center has {} entries, architecture needs {}",
                        center.len(),
                        self.layout.n_params
                    )));
                }
                if !(*sigma_tl > T::zero()) || !sigma_tl.is_finite() {
                    return Err(Error::Config("transfer prior width must be positive".into()));
                }
                let var = *sigma_tl * *sigma_tl;
                let mask = self.layout.sigma_head_mask();
                let mut value = -T::half() * np * (ln_2pi + var.ln());
                let mut grad = Vec::with_capacity(theta.len());
                for ((&t, &c), &is_sigma) in theta.iter().zip(center.iter()).zip(&mask) {
                    let c_eff = if is_sigma { T::zero() } else { c };
                    let d = t - c_eff;
                    value -= d * d / (T::two() * var);
                    grad.push(-d / var);
                }
                Ok((value, grad))
            }
        }
    }

    /// Stochastic gradient of the log posterior from a weighted minibatch:
    /// prior gradient plus `(N/B) * sum_i w_i * grad log p(y_i | theta)`.
    pub fn grad_log_posterior_minibatch(
        &self,
        theta: &ParameterVector<T>,
        dataset: &Dataset<T>,
        batch: &WeightedBatch<T>,
        prior: &PriorSpec<T>,
    ) -> Result<Vec<T>> {
        if batch.is_empty() {
            return Err(Error::Config("minibatch is empty".into()));
        }
        let (_, mut grad) = self.log_prior(theta, prior)?;
        let scale = T::from_usize(dataset.len()) / T::from_usize(batch.len());
        for &(idx, w) in batch.iter() {
            if idx >= dataset.len() {
                return Err(Error::Config(format!("minibatch index {idx} out of range")));
            }
            let (_, g) = self.log_likelihood(theta, dataset.get(idx))?;
            let f = scale * w;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += f * *gi;
            }
        }
        Ok(grad)
    }

    pub fn save_parameters(&self, path: &Path, theta: &ParameterVector<T>) -> Result<()> {
        self.check_theta(theta)?;
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            theta: theta.iter().map(|t| t.as_f64()).collect(),
        };
        let out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(out, &file)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load_parameters(&self, path: &Path) -> Result<ParameterVector<T>> {
        let input = BufReader::new(File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(input)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "parameter file version {} unsupported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        if file.arch != self.arch {
            return Err(Error::Checkpoint(
                "parameter file was written for a different architecture".into(),
            ));
        }
        if file.layout != self.layout || file.theta.len() != self.layout.n_params {
            return Err(Error::Checkpoint("parameter file layout mismatch".into()));
        }
        Ok(ParameterVector(file.theta.into_iter().map(T::from_f64).collect()))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    arch: ArchitectureSpec,
    layout: Layout,
    theta: Vec<f64>,
}
