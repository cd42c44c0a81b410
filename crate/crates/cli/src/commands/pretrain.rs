//! Fit starting parameters against a reference-oracle dataset.
//!
//! The dataset is either loaded from disk or produced by running Langevin
//! MD on the reference surface and storing configurations at a fixed
//! cadence. Labels stay in the reference oracle's own energy gauge; the
//! gauge offset against the run oracle is fixed later, at run start. A
//! held-out split gates the fit: when its energy RMSE exceeds the
//! configured bound the model is rejected with a written report.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use otf_core::data::{Dataset, LabeledSample};
use otf_core::dynamics::{langevin_step, maxwell_boltzmann_velocities, MdState};
use otf_core::oracle::Oracle;
use otf_core::sampler::{pretrain_map, ScheduleSpec, SghmcParams};
use otf_core::surrogate::{ArchitectureSpec, ParameterVector, Surrogate};
use otf_core::{Error, Result};

use crate::config::RunConfig;

pub const THETA0_FILE: &str = "theta0.json";
pub const REPORT_FILE: &str = "pretrain-report.json";
const GENERATED_DATASET: &str = "pretrain-data.jsonl";

/// Starting parameters plus everything needed to rebuild their model.
#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub version: u32,
    pub arch: ArchitectureSpec,
    pub sigma_energy: f64,
    pub theta: Vec<f64>,
    pub train_samples: usize,
    pub validation_rmse: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub n_samples: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub energy_rmse: f64,
    pub force_rmse: f64,
    pub gate: Option<f64>,
    pub passed: bool,
    pub dataset: String,
    pub generated: bool,
}

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let pre = config
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [pretrain] section".into()))?;
    std::fs::create_dir_all(out)?;
    config.write_snapshot(out)?;

    let seed = pre.seed.unwrap_or(config.run.seed);
    let oracle = Oracle::new(pre.oracle.clone().unwrap_or_else(|| config.oracle.clone()))?;

    let dataset_path = pre
        .dataset
        .as_ref()
        .map(|p| config.resolve(p))
        .unwrap_or_else(|| out.join(GENERATED_DATASET));
    let (dataset, generated) = if dataset_path.exists() {
        (Dataset::read_jsonl(&dataset_path)?, false)
    } else if pre.generate.is_some() {
        let dataset = generate_dataset(config, &oracle, seed)?;
        dataset.write_jsonl(&dataset_path)?;
        (dataset, true)
    } else {
        return Err(Error::Config(format!(
            "dataset {} does not exist and no [pretrain.generate] table is configured",
            dataset_path.display()
        )));
    };
    if dataset.len() < 2 {
        return Err(Error::Config(format!(
            "pretraining needs at least two samples, dataset holds {}",
            dataset.len()
        )));
    }

    // Deterministic held-out split.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)));
    let n_validation = ((dataset.len() as f64 * pre.validation_fraction).ceil() as usize)
        .clamp(1, dataset.len() - 1);
    let (validation_idx, train_idx) = order.split_at(n_validation);

    let mut train = Dataset::new();
    for (rank, &i) in train_idx.iter().enumerate() {
        let s = dataset.get(i);
        train.add(
            LabeledSample::new(s.config.clone(), s.energy, s.forces.clone())?,
            rank as u64,
        )?;
    }

    let surrogate = Surrogate::new(config.architecture(), config.sigma_energy())?;
    let theta_init =
        surrogate.init_parameters(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let theta = pretrain_map(
        &surrogate,
        theta_init,
        &train,
        &otf_core::surrogate::PriorSpec::MeanField,
        &ScheduleSpec::ExpDecay {
            gamma0: pre.gamma0,
            gamma_end: pre.gamma_end,
            horizon: pre.n_steps,
        },
        pre.n_steps,
        pre.batch_size,
        seed.wrapping_add(3),
        &SghmcParams::pretrain(),
    )?;

    let (energy_rmse, force_rmse) = holdout_rmse(&surrogate, &theta, &dataset, validation_idx)?;
    let passed = pre.max_validation_rmse.map_or(true, |gate| energy_rmse <= gate);
    let report = PretrainReport {
        n_samples: dataset.len(),
        n_train: train.len(),
        n_validation,
        energy_rmse,
        force_rmse,
        gate: pre.max_validation_rmse,
        passed,
        dataset: dataset_path.display().to_string(),
        generated,
    };
    super::write_json(&out.join(REPORT_FILE), &report)?;

    if !passed {
        return Err(Error::Numeric(format!(
            "validation energy RMSE {energy_rmse:.6} exceeds the configured gate {:.6}; \
             see {}",
            pre.max_validation_rmse.unwrap(),
            out.join(REPORT_FILE).display()
        )));
    }
    let model = PretrainedModel {
        version: 1,
        arch: config.architecture(),
        sigma_energy: config.sigma_energy(),
        theta: theta.into_vec(),
        train_samples: train.len(),
        validation_rmse: energy_rmse,
    };
    super::write_json(&out.join(THETA0_FILE), &model)?;
    println!(
        "pretrained on {} samples; validation energy RMSE {energy_rmse:.6} (forces {force_rmse:.6})",
        train.len()
    );
    Ok(())
}

/// Reference-oracle Langevin MD, storing a labeled sample every `every`
/// steps once past the burn-in.
fn generate_dataset(config: &RunConfig, oracle: &Oracle, seed: u64) -> Result<Dataset<f64>> {
    let gen = config.pretrain.as_ref().unwrap().generate.as_ref().unwrap();
    let temperature = gen.temperature.unwrap_or(config.md.temperature);
    let dt = gen.dt.unwrap_or(config.md.dt);

    let initial = config.initial_configuration()?;
    let masses = config.masses();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let velocities =
        maxwell_boltzmann_velocities(&masses, temperature, initial.dim(), &mut rng)?;
    let (_, forces) = oracle.evaluate(&initial)?;
    let mut md = MdState::new(initial, velocities, masses, forces)?;

    let mut force_fn = |c: &otf_core::data::AtomicConfiguration<f64>| {
        oracle.evaluate(c).map(|(_, f)| f)
    };
    let mut dataset = Dataset::new();
    let total = gen.burn_in + gen.every * gen.n_samples as u64;
    for step in 1..=total {
        langevin_step(&mut md, &mut force_fn, dt, gen.friction, temperature, &mut rng)?;
        if step >= gen.burn_in && (step - gen.burn_in) % gen.every == 0 {
            let (energy, forces) = oracle.evaluate(&md.config)?;
            dataset.add(LabeledSample::new(md.config.clone(), energy, forces)?, step)?;
            if dataset.len() == gen.n_samples {
                break;
            }
        }
    }
    Ok(dataset)
}

fn holdout_rmse(
    surrogate: &Surrogate<f64>,
    theta: &ParameterVector<f64>,
    dataset: &Dataset<f64>,
    indices: &[usize],
) -> Result<(f64, f64)> {
    let mut energy_errors = Vec::with_capacity(indices.len());
    let mut force_errors = Vec::new();
    for &i in indices {
        let sample = dataset.get(i);
        let pred = surrogate.predict(theta, &sample.config)?;
        energy_errors.push(pred.energy - sample.energy);
        for (p, t) in pred.forces.iter().zip(&sample.forces) {
            for axis in 0..3 {
                force_errors.push(p[axis] - t[axis]);
            }
        }
    }
    Ok((
        otf_core::metrics::rmse(&energy_errors)?,
        otf_core::metrics::rmse(&force_errors)?,
    ))
}
