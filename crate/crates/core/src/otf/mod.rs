//! The on-the-fly loop: predict, gate, and either trust the ensemble or
//! call the oracle and retrain before moving.
//!
//! Each MD step starts from the ensemble prediction at the current
//! configuration. The calibrated posterior turns its predictive spread
//! into a probability that the energy error stays within the accuracy
//! threshold; when that probability drops below the confidence level the
//! step is made with fresh oracle forces instead, the residual feeds the
//! calibrator, and the ensemble is refreshed on the grown dataset.
//!
//! Bookkeeping invariants, checked by [`OtfEngine::check_invariants`]:
//! the dataset holds the initial structure plus one sample per
//! intervention, the calibrator has absorbed exactly one residual per
//! intervention, and the oracle call meter equals the dataset size.

mod checkpoint;
mod log;

pub use checkpoint::{load_checkpoint, EngineCheckpoint, CHECKPOINT_FILE};
pub use log::{
    read_interventions_jsonl, read_steps_jsonl, Decision, ForceSource, InterventionRecord,
    RunLog, RunWriter, StepRecord, INTERVENTION_LOG_FILE, STEP_LOG_FILE, TRAJECTORY_FILE,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{prob_error_within, CalibrationState};
use crate::data::{AtomicConfiguration, Dataset, EnergyOffset, LabeledSample};
use crate::dynamics::{langevin_step, maxwell_boltzmann_velocities, MdState};
use crate::ensemble::{ensemble_predict, EnsemblePrediction};
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::sampler::{update_ensemble, EnsembleState, ScheduleSpec, SghmcParams, UpdateOpts};
use crate::scalar::Real;
use crate::surrogate::{ParameterVector, PriorSpec, Surrogate};

/// Keeps the ensemble chains' noise streams disjoint from the MD
/// thermostat stream derived from the same run seed.
const CHAIN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Run-level knobs. `k_threshold` has no sensible default; everything
/// else starts from the documented defaults via [`OtfSettings::with_threshold`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtfSettings {
    /// Accuracy threshold on the energy error, same units as the oracle.
    pub k_threshold: f64,
    /// Continue only when the posterior probability of staying within the
    /// threshold reaches this level.
    pub confidence: f64,
    pub ensemble_size: usize,
    /// Sampler steps per ensemble refresh; also the decay span of the
    /// refresh step-size schedule.
    pub steps_per_update: u64,
    pub batch_size: usize,
    /// Peak step size of the refresh schedule.
    pub gamma0: f64,
    /// Transfer-prior width around the starting parameters; `None` trains
    /// against the unit prior instead.
    pub sigma_tl: Option<f64>,
    /// Calibration prior shape.
    pub calibration_a: f64,
    /// Calibration prior rate.
    pub calibration_b: f64,
    pub dt: f64,
    /// Thermostat target temperature.
    pub temperature: f64,
    /// Thermostat friction; zero runs plain velocity Verlet.
    pub md_friction: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic
    /// checkpoints (a final one is still written when a directory is given).
    pub checkpoint_every: u64,
    /// Trajectory row cadence; 0 writes no rows.
    pub sample_every: u64,
}

impl OtfSettings {
    pub fn with_threshold(k_threshold: f64) -> Self {
        Self {
            k_threshold,
            confidence: 0.95,
            ensemble_size: 8,
            steps_per_update: 2000,
            batch_size: 5,
            gamma0: 1e-3,
            sigma_tl: None,
            calibration_a: 3.0,
            calibration_b: 10.0,
            dt: 1e-3,
            temperature: 0.0,
            md_friction: 0.0,
            max_steps: 0,
            seed: 0,
            checkpoint_every: 0,
            sample_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_threshold > 0.0) || !self.k_threshold.is_finite() {
            return Err(Error::Config(format!(
                "accuracy threshold must be positive and finite, got {}",
                self.k_threshold
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence must lie strictly between 0 and 1, got {}",
                self.confidence
            )));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(s) = self.sigma_tl {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!(
                    "transfer prior width must be positive and finite, got {s}"
                )));
            }
        }
        for (name, v) in [("calibration shape", self.calibration_a), ("calibration rate", self.calibration_b)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("time step must be positive and finite, got {}", self.dt)));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be non-negative and finite, got {}",
                self.temperature
            )));
        }
        if !(self.md_friction >= 0.0) || !self.md_friction.is_finite() {
            return Err(Error::Config(format!(
                "friction must be non-negative and finite, got {}",
                self.md_friction
            )));
        }
        // Delegates the remaining schedule constraints (finite, non-negative
        // peak; positive span) to the schedule itself.
        self.refresh_schedule().validate()
    }

    fn refresh_schedule(&self) -> ScheduleSpec {
        ScheduleSpec::OtfDecay { gamma0: self.gamma0, steps_per_update: self.steps_per_update }
    }

    fn update_opts(&self) -> UpdateOpts {
        // The mass accumulator keeps adapting across refreshes: the
        // gradient scale grows with the dataset, and its max ratchet only
        // ever raises the mass, so later refreshes stay stable.
        UpdateOpts {
            n_steps: self.steps_per_update,
            batch_size: self.batch_size,
            temperature: 1.0,
            adapt_mass: true,
        }
    }
}

/// Strict gate: intervene only when the within-threshold probability falls
/// below the confidence level; exactly at the level the run continues.
pub fn decide(prob_within: f64, confidence: f64) -> Decision {
    if prob_within < confidence {
        Decision::Intervene
    } else {
        Decision::Continue
    }
}

/// Everything a running on-the-fly simulation owns.
#[derive(Debug)]
pub struct OtfEngine<T: Real> {
    surrogate: Surrogate<T>,
    oracle: Oracle,
    settings: OtfSettings,
    sghmc: SghmcParams<T>,
    prior: PriorSpec<T>,
    schedule: ScheduleSpec,
    ensemble: EnsembleState<T>,
    dataset: Dataset<T>,
    calibration: CalibrationState,
    offset: EnergyOffset<T>,
    md: MdState<T>,
    md_rng: ChaCha8Rng,
    /// Ensemble prediction at the current configuration, produced by the
    /// force evaluation of the previous step; `None` forces a fresh
    /// evaluation (first step after a resume).
    pending: Option<EnsemblePrediction<T>>,
    log: RunLog,
    interventions: u64,
    /// Interventions that happened before this process's in-memory log
    /// began; zero for a fresh run, the checkpointed count after a resume.
    prior_interventions: u64,
}

impl<T: Real> OtfEngine<T> {
    /// Set up a run: label the initial structure, freeze the energy
    /// offset so that structure starts residual-free, fit the ensemble to
    /// it once, and thermalize the velocities.
    pub fn initialize(
        surrogate: Surrogate<T>,
        oracle: Oracle,
        settings: OtfSettings,
        sghmc: SghmcParams<T>,
        theta0: &ParameterVector<T>,
        initial: AtomicConfiguration<T>,
        masses: Vec<T>,
    ) -> Result<Self> {
        settings.validate()?;
        if theta0.len() != surrogate.n_params() {
            return Err(Error::Config(format!(
                "starting parameters have length {}, model needs {}",
                theta0.len(),
                surrogate.n_params()
            )));
        }

        let (oracle_energy, oracle_forces) = oracle.evaluate::<T>(&initial)?;

        let mut ensemble = EnsembleState::from_center(
            theta0,
            settings.ensemble_size,
            settings.seed.wrapping_add(CHAIN_SEED_SALT),
        )?;
        let pretrained = ensemble_predict(&surrogate, &ensemble.thetas(), &initial)?;

        let mut offset = EnergyOffset::new();
        offset.freeze(pretrained.energy, oracle_energy)?;
        let label = offset.shift(oracle_energy)?;

        let mut dataset = Dataset::new();
        dataset.add(LabeledSample::new(initial.clone(), label, oracle_forces)?, 0)?;

        let prior = match settings.sigma_tl {
            Some(s) => PriorSpec::Transfer { center: theta0.clone(), sigma_tl: T::from_f64(s) },
            None => PriorSpec::MeanField,
        };
        let schedule = settings.refresh_schedule();

        update_ensemble(
            &mut ensemble,
            &surrogate,
            &dataset,
            &prior,
            &schedule,
            &settings.update_opts(),
            &sghmc,
        )?;

        let calibration = CalibrationState::new(settings.calibration_a, settings.calibration_b)?;

        let mut md_rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let velocities = maxwell_boltzmann_velocities(
            &masses,
            T::from_f64(settings.temperature),
            initial.dim(),
            &mut md_rng,
        )?;

        let pending = ensemble_predict(&surrogate, &ensemble.thetas(), &initial)?;
        let md = MdState::new(initial, velocities, masses, pending.forces.clone())?;

        Ok(Self {
            surrogate,
            oracle,
            settings,
            sghmc,
            prior,
            schedule,
            ensemble,
            dataset,
            calibration,
            offset,
            md,
            md_rng,
            pending: Some(pending),
            log: RunLog::new(),
            interventions: 0,
            prior_interventions: 0,
        })
    }

    /// One step of the gated simulation. Gates on the prediction at the
    /// current configuration, moves with ensemble or oracle forces
    /// accordingly, and logs what happened.
    pub fn otf_step(&mut self) -> Result<StepRecord> {
        let step_index = self.md.step;
        let pred = match self.pending.take() {
            Some(p) => p,
            None => ensemble_predict(&self.surrogate, &self.ensemble.thetas(), &self.md.config)?,
        };
        let energy = pred.energy.as_f64();
        let sigma = pred.sigma_energy.as_f64();
        let prob = prob_error_within(&self.calibration, sigma, self.settings.k_threshold)?;
        let decision = decide(prob, self.settings.confidence);

        let force_source = match decision {
            Decision::Continue => {
                // The kick out of this configuration uses the very forces
                // the gate just inspected.
                self.md.forces = pred.forces.clone();
                ForceSource::Ensemble
            }
            Decision::Intervene => {
                let (oracle_energy, oracle_forces) = self.oracle.evaluate::<T>(&self.md.config)?;
                let label = self.offset.shift(oracle_energy)?;
                let error = energy - label.as_f64();
                // The residual is measured against the ensemble as it was
                // when it asked for help, before retraining.
                self.calibration.observe(error, sigma)?;
                self.dataset
                    .add(LabeledSample::new(self.md.config.clone(), label, oracle_forces.clone())?, step_index)?;
                update_ensemble(
                    &mut self.ensemble,
                    &self.surrogate,
                    &self.dataset,
                    &self.prior,
                    &self.schedule,
                    &self.settings.update_opts(),
                    &self.sghmc,
                )?;
                self.interventions += 1;
                self.log.interventions.push(InterventionRecord {
                    step: step_index,
                    energy_pred: energy,
                    sigma_pred: sigma,
                    prob_within: prob,
                    label: label.as_f64(),
                    error,
                    calibration: self.calibration.clone(),
                });
                self.md.forces = oracle_forces;
                ForceSource::Oracle
            }
        };

        // One force evaluation per step: the integrator's force callback
        // doubles as the gate input for the next step.
        {
            let surrogate = &self.surrogate;
            let ensemble = &self.ensemble;
            let pending = &mut self.pending;
            let mut force_fn = |config: &AtomicConfiguration<T>| -> Result<Vec<[T; 3]>> {
                let p = ensemble_predict(surrogate, &ensemble.thetas(), config)?;
                let forces = p.forces.clone();
                *pending = Some(p);
                Ok(forces)
            };
            langevin_step(
                &mut self.md,
                &mut force_fn,
                T::from_f64(self.settings.dt),
                T::from_f64(self.settings.md_friction),
                T::from_f64(self.settings.temperature),
                &mut self.md_rng,
            )?;
        }

        let record = StepRecord {
            step: step_index,
            time: self.md.time.as_f64(),
            energy,
            sigma,
            prob_within: prob,
            decision,
            force_source,
            temperature: self.md.instantaneous_temperature().as_f64(),
        };
        self.log.steps.push(record.clone());
        Ok(record)
    }

    /// Drive the run to `max_steps`, streaming records to `writer` and
    /// checkpointing into `checkpoint_dir` at the configured cadence plus
    /// once at the end. On error the log files are flushed before the
    /// error propagates.
    pub fn run(
        &mut self,
        mut writer: Option<&mut RunWriter>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        while self.md.step < self.settings.max_steps {
            let record = match self.otf_step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(w) = writer.as_deref_mut() {
                        let _ = w.flush();
                    }
                    return Err(e);
                }
            };
            if let Some(w) = writer.as_deref_mut() {
                w.record_step(&record)?;
                if record.decision == Decision::Intervene {
                    let rec = self.log.interventions.last().expect("intervention was just logged");
                    w.record_intervention(rec)?;
                }
                if self.settings.sample_every > 0 && record.step % self.settings.sample_every == 0 {
                    let positions = crate::data::flatten(self.md.config.positions());
                    w.record_trajectory_row(
                        record.step,
                        record.time,
                        record.energy,
                        record.temperature,
                        &positions,
                    )?;
                }
            }
            if let Some(dir) = checkpoint_dir {
                let every = self.settings.checkpoint_every;
                if every > 0 && self.md.step % every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(w) = writer {
            w.flush()?;
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    /// Verify the run-level bookkeeping; any violation is a bug.
    pub fn check_invariants(&self) -> Result<()> {
        let expected = 1 + self.interventions as usize;
        if self.dataset.len() != expected {
            return Err(Error::Config(format!(
                "dataset holds {} samples, expected initial + {} interventions",
                self.dataset.len(),
                self.interventions
            )));
        }
        if self.calibration.n() != self.interventions {
            return Err(Error::Config(format!(
                "calibrator absorbed {} residuals, expected {}",
                self.calibration.n(),
                self.interventions
            )));
        }
        if self.oracle.calls() != self.dataset.len() as u64 {
            return Err(Error::Config(format!(
                "oracle meter reads {}, expected one call per stored sample ({})",
                self.oracle.calls(),
                self.dataset.len()
            )));
        }
        if self.prior_interventions + self.log.interventions.len() as u64 != self.interventions {
            return Err(Error::Config(format!(
                "intervention log holds {} records after {} earlier ones, expected {} total",
                self.log.interventions.len(),
                self.prior_interventions,
                self.interventions
            )));
        }
        Ok(())
    }

    pub fn settings(&self) -> &OtfSettings {
        &self.settings
    }

    /// Raise the step budget, e.g. to extend a finished or resumed run.
    pub fn set_max_steps(&mut self, max_steps: u64) {
        self.settings.max_steps = max_steps;
    }

    pub fn surrogate(&self) -> &Surrogate<T> {
        &self.surrogate
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn ensemble(&self) -> &EnsembleState<T> {
        &self.ensemble
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.dataset
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.calibration
    }

    pub fn offset(&self) -> &EnergyOffset<T> {
        &self.offset
    }

    pub fn md(&self) -> &MdState<T> {
        &self.md
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn interventions(&self) -> u64 {
        self.interventions
    }

    /// Ensemble prediction at the current configuration, evaluating it if
    /// no cached one is pending.
    pub fn current_prediction(&mut self) -> Result<&EnsemblePrediction<T>> {
        if self.pending.is_none() {
            self.pending =
                Some(ensemble_predict(&self.surrogate, &self.ensemble.thetas(), &self.md.config)?);
        }
        Ok(self.pending.as_ref().expect("just filled"))
    }
}
