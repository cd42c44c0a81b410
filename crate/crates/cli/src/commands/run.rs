//! Drive the uncertainty-gated MD loop and stream its outputs.
//!
//! A fresh run needs the pretrained parameters named by `[run] theta0`;
//! `--resume` instead rebuilds the engine from the checkpoint in the
//! output directory and continues bit-exactly. On resume the config may
//! only extend `max_steps`; every other knob must match the checkpointed
//! run. `status.json` marks partial runs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use otf_core::oracle::Oracle;
use otf_core::otf::{OtfEngine, RunWriter, CHECKPOINT_FILE};
use otf_core::surrogate::{ParameterVector, Surrogate};
use otf_core::{Error, Result};

use super::pretrain::PretrainedModel;
use crate::config::RunConfig;

pub const STATUS_FILE: &str = "status.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunStatus {
    pub state: String,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub interventions: u64,
    pub oracle_calls: u64,
    pub dataset_size: usize,
    pub final_time: f64,
    pub wall_seconds: f64,
}

pub fn run(config: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    if resume {
        resume_run(config, out)
    } else {
        fresh_run(config, out)
    }
}

fn fresh_run(config: &RunConfig, out: &Path) -> Result<()> {
    let theta0_path = config
        .run
        .theta0
        .as_ref()
        .map(|p| config.resolve(p))
        .ok_or_else(|| Error::Config("a fresh run needs [run] theta0".into()))?;
    let model: PretrainedModel = super::read_json(&theta0_path)?;
    if model.arch != config.architecture() {
        return Err(Error::Config(format!(
            "{} was trained for a different architecture than the config names",
            theta0_path.display()
        )));
    }
    if model.sigma_energy != config.sigma_energy() {
        return Err(Error::Config(format!(
            "{} carries energy noise {}, config resolves to {}",
            theta0_path.display(),
            model.sigma_energy,
            config.sigma_energy()
        )));
    }

    std::fs::create_dir_all(out)?;
    if out.join(CHECKPOINT_FILE).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume to continue it",
            out.display()
        )));
    }
    config.write_snapshot(out)?;

    let surrogate = Surrogate::new(config.architecture(), config.sigma_energy())?;
    let oracle = Oracle::new(config.oracle.clone())?;
    let engine = OtfEngine::initialize(
        surrogate,
        oracle,
        config.otf_settings(),
        config.sghmc_params(),
        &ParameterVector::new(model.theta),
        config.initial_configuration()?,
        config.masses(),
    )?;
    let mut writer = RunWriter::create(out, engine.md().config.n_atoms())?;
    drive(engine, &mut writer, out)
}

fn resume_run(config: &RunConfig, out: &Path) -> Result<()> {
    if !out.join(CHECKPOINT_FILE).exists() {
        return Err(Error::Config(format!(
            "{} holds no checkpoint to resume",
            out.display()
        )));
    }
    let mut engine = OtfEngine::<f64>::resume(out)?;

    // The checkpoint is authoritative; the config may only move the goal.
    let mut requested = config.otf_settings();
    let target = requested.max_steps;
    requested.max_steps = engine.settings().max_steps;
    if &requested != engine.settings() {
        return Err(Error::Config(
            "config disagrees with the checkpointed run; only max_steps may change on resume"
                .into(),
        ));
    }
    if engine.md().step >= target {
        println!(
            "nothing to do: checkpoint is at step {} of {target}",
            engine.md().step
        );
        write_status(out, "complete", engine.md().step)?;
        return Ok(());
    }
    engine.set_max_steps(target);
    config.write_snapshot(out)?;

    let mut writer = RunWriter::append_to(out)?;
    drive(engine, &mut writer, out)
}

fn drive(mut engine: OtfEngine<f64>, writer: &mut RunWriter, out: &Path) -> Result<()> {
    write_status(out, "running", engine.md().step)?;
    let clock = Instant::now();
    engine.run(Some(writer), Some(out))?;
    engine.check_invariants()?;
    write_status(out, "complete", engine.md().step)?;

    let summary = RunSummary {
        steps: engine.md().step,
        interventions: engine.interventions(),
        oracle_calls: engine.oracle().calls(),
        dataset_size: engine.dataset().len(),
        final_time: engine.md().time,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    super::write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!(
        "ran to step {} with {} interventions ({} oracle calls)",
        summary.steps, summary.interventions, summary.oracle_calls
    );
    Ok(())
}

fn write_status(out: &Path, state: &str, step: u64) -> Result<()> {
    super::write_json(&out.join(STATUS_FILE), &RunStatus { state: state.into(), step })
}
