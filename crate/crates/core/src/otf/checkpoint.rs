//! Whole-run snapshots.
//!
//! A checkpoint captures everything the engine owns: every chain with its
//! mass accumulators and noise stream, the dataset, the calibrator, the
//! energy offset, the MD state, and the thermostat stream. Resuming from
//! it continues the run bit for bit, as if it had never stopped. Scalars
//! are stored as `f64`, which both supported precisions round-trip
//! exactly; the JSON codec is configured to round-trip `f64` exactly too.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationState;
use crate::data::{flatten, unflatten, AtomicConfiguration, Dataset, Dim, EnergyOffset, SampleRecord};
use crate::dynamics::MdState;
use crate::error::{Error, Result};
use crate::oracle::{Oracle, OracleSpec};
use crate::sampler::{ChainState, EnsembleState, SghmcParams};
use crate::scalar::Real;
use crate::surrogate::{ArchitectureSpec, ParameterVector, PriorSpec, Surrogate};

use super::{OtfEngine, OtfSettings, RunLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ChainRecord {
    theta: Vec<f64>,
    momentum: Vec<f64>,
    v: Vec<f64>,
    v_hat: Vec<f64>,
    mass_ready: bool,
    mass_frozen: bool,
    step_count: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Serialize, Deserialize)]
struct SamplerRecord {
    friction: f64,
    beta2: f64,
    eps_mass: f64,
    noise_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MdRecord {
    species: Vec<u32>,
    dim: Dim,
    positions: Vec<f64>,
    velocities: Vec<f64>,
    masses: Vec<f64>,
    forces: Vec<f64>,
    time: f64,
    step: u64,
}

/// Serialized engine. Produced by [`OtfEngine::save_checkpoint`], consumed
/// by [`OtfEngine::resume`].
#[derive(Debug, Serialize, Deserialize)]
pub struct EngineCheckpoint {
    version: u32,
    settings: OtfSettings,
    arch: ArchitectureSpec,
    sigma_energy: f64,
    oracle: OracleSpec,
    sampler: SamplerRecord,
    /// Transfer-prior center; present exactly when `settings.sigma_tl` is.
    prior_center: Option<Vec<f64>>,
    chains: Vec<ChainRecord>,
    samples: Vec<SampleRecord>,
    calibration: CalibrationState,
    offset: f64,
    md: MdRecord,
    md_rng: ChaCha8Rng,
    interventions: u64,
    oracle_calls: u64,
}

impl EngineCheckpoint {
    pub fn settings(&self) -> &OtfSettings {
        &self.settings
    }

    /// MD step the checkpoint was taken at.
    pub fn step(&self) -> u64 {
        self.md.step
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<EngineCheckpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path)?;
    let cp: EngineCheckpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if cp.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (this build reads {})",
            cp.version, FORMAT_VERSION
        )));
    }
    Ok(cp)
}

impl<T: Real> OtfEngine<T> {
    /// Atomically write the full engine state into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let offset = self
            .offset
            .value()
            .ok_or_else(|| Error::Checkpoint("energy offset is not frozen".into()))?;
        let cp = EngineCheckpoint {
            version: FORMAT_VERSION,
            settings: self.settings.clone(),
            arch: self.surrogate.arch().clone(),
            sigma_energy: self.surrogate.sigma_energy().as_f64(),
            oracle: self.oracle.spec().clone(),
            sampler: SamplerRecord {
                friction: self.sghmc.friction.as_f64(),
                beta2: self.sghmc.beta2.as_f64(),
                eps_mass: self.sghmc.eps_mass.as_f64(),
                noise_scale: self.sghmc.noise_scale.as_f64(),
            },
            prior_center: match &self.prior {
                PriorSpec::Transfer { center, .. } => {
                    Some(center.iter().map(|v| v.as_f64()).collect())
                }
                PriorSpec::MeanField => None,
            },
            chains: self
                .ensemble
                .chains
                .iter()
                .map(|c| ChainRecord {
                    theta: c.theta.iter().map(|v| v.as_f64()).collect(),
                    momentum: c.momentum.iter().map(|v| v.as_f64()).collect(),
                    v: c.v.iter().map(|v| v.as_f64()).collect(),
                    v_hat: c.v_hat.iter().map(|v| v.as_f64()).collect(),
                    mass_ready: c.mass_ready,
                    mass_frozen: c.mass_frozen,
                    step_count: c.step_count,
                    rng: c.rng.clone(),
                })
                .collect(),
            samples: (0..self.dataset.len())
                .map(|i| SampleRecord::from_sample(self.dataset.get(i), self.dataset.insertion_step(i)))
                .collect(),
            calibration: self.calibration.clone(),
            offset: offset.as_f64(),
            md: MdRecord {
                species: self.md.config.species().to_vec(),
                dim: self.md.config.dim(),
                positions: flatten(self.md.config.positions()),
                velocities: flatten(&self.md.velocities),
                masses: self.md.masses.iter().map(|m| m.as_f64()).collect(),
                forces: flatten(&self.md.forces),
                time: self.md.time.as_f64(),
                step: self.md.step,
            },
            md_rng: self.md_rng.clone(),
            interventions: self.interventions,
            oracle_calls: self.oracle.calls(),
        };

        let body = serde_json::to_vec(&cp)
            .map_err(|e| Error::Checkpoint(format!("encode checkpoint: {e}")))?;
        let tmp = dir.join("checkpoint.json.tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }

    /// Rebuild a running engine from the checkpoint in `dir`.
    pub fn resume(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(dir)?)
    }

    pub fn from_checkpoint(cp: EngineCheckpoint) -> Result<Self> {
        cp.settings.validate()?;
        let surrogate = Surrogate::new(cp.arch, T::from_f64(cp.sigma_energy))?;
        let n_params = surrogate.n_params();
        let oracle = Oracle::new(cp.oracle)?;
        oracle.set_calls(cp.oracle_calls);

        let sghmc = SghmcParams {
            friction: T::from_f64(cp.sampler.friction),
            beta2: T::from_f64(cp.sampler.beta2),
            eps_mass: T::from_f64(cp.sampler.eps_mass),
            noise_scale: T::from_f64(cp.sampler.noise_scale),
        };

        let prior = match (cp.settings.sigma_tl, cp.prior_center) {
            (Some(s), Some(center)) => {
                if center.len() != n_params {
                    return Err(Error::Checkpoint(format!(
                        "prior center has length {}, model needs {n_params}",
                        center.len()
                    )));
                }
                PriorSpec::Transfer {
                    center: ParameterVector::new(center.iter().map(|&v| T::from_f64(v)).collect()),
                    sigma_tl: T::from_f64(s),
                }
            }
            (None, None) => PriorSpec::MeanField,
            _ => {
                return Err(Error::Checkpoint(
                    "prior center and transfer width must be stored together".into(),
                ))
            }
        };

        if cp.chains.len() != cp.settings.ensemble_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} chains, settings say {}",
                cp.chains.len(),
                cp.settings.ensemble_size
            )));
        }
        let chains = cp
            .chains
            .into_iter()
            .map(|c| {
                if [c.theta.len(), c.momentum.len(), c.v.len(), c.v_hat.len()]
                    .iter()
                    .any(|&l| l != n_params)
                {
                    return Err(Error::Checkpoint(format!(
                        "chain arrays disagree with the model's {n_params} parameters"
                    )));
                }
                let lift = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
                Ok(ChainState {
                    theta: ParameterVector::new(lift(c.theta)),
                    momentum: lift(c.momentum),
                    v: lift(c.v),
                    v_hat: lift(c.v_hat),
                    mass_ready: c.mass_ready,
                    mass_frozen: c.mass_frozen,
                    step_count: c.step_count,
                    rng: c.rng,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ensemble = EnsembleState::from_chains(chains)?;

        let mut dataset = Dataset::new();
        for rec in cp.samples {
            let (sample, step) = rec.into_sample::<T>()?;
            dataset.add(sample, step)?;
        }

        let config = AtomicConfiguration::new(unflatten(&cp.md.positions)?, cp.md.species, cp.md.dim)?;
        let mut md = MdState::new(
            config,
            unflatten(&cp.md.velocities)?,
            cp.md.masses.into_iter().map(T::from_f64).collect(),
            unflatten(&cp.md.forces)?,
        )?;
        md.time = T::from_f64(cp.md.time);
        md.step = cp.md.step;

        let schedule = cp.settings.refresh_schedule();
        let engine = Self {
            surrogate,
            oracle,
            settings: cp.settings,
            sghmc,
            prior,
            schedule,
            ensemble,
            dataset,
            calibration: cp.calibration,
            offset: EnergyOffset::restore(Some(T::from_f64(cp.offset))),
            md,
            md_rng: cp.md_rng,
            pending: None,
            log: RunLog::new(),
            interventions: cp.interventions,
            prior_interventions: cp.interventions,
        };
        engine.check_invariants().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(engine)
    }
}
