//! Run records and their on-disk form.
//!
//! Every MD step appends one [`StepRecord`]; steps that called the oracle
//! additionally append an [`InterventionRecord`]. On disk both are
//! line-delimited JSON, one record per line, so a crashed run leaves a
//! readable prefix and a resumed run can append.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationState;
use crate::error::{Error, Result};

pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const INTERVENTION_LOG_FILE: &str = "interventions.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";

/// Gate outcome for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Continue,
    Intervene,
}

/// Which force field produced the kick out of the current configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForceSource {
    Ensemble,
    Oracle,
}

/// One step of the run: the gate inputs, the verdict, and the post-step
/// thermodynamic snapshot. `energy` and `sigma` are the ensemble mean and
/// predictive standard deviation at the configuration the step started
/// from, before any retraining that step may have triggered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub time: f64,
    pub energy: f64,
    pub sigma: f64,
    pub prob_within: f64,
    pub decision: Decision,
    pub force_source: ForceSource,
    pub temperature: f64,
}

/// One oracle call: what the model claimed, what the oracle said, and the
/// calibration state right after absorbing the residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub step: u64,
    pub energy_pred: f64,
    pub sigma_pred: f64,
    pub prob_within: f64,
    /// Offset-adjusted oracle energy.
    pub label: f64,
    /// `energy_pred - label`, the residual fed to the calibrator.
    pub error: f64,
    pub calibration: CalibrationState,
}

/// In-memory run history.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub interventions: Vec<InterventionRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intervention_steps(&self) -> Vec<u64> {
        self.interventions.iter().map(|r| r.step).collect()
    }
}

fn jsonl_lines<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Serialization(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_steps_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
    jsonl_lines(path)
}

pub fn read_interventions_jsonl(path: &Path) -> Result<Vec<InterventionRecord>> {
    jsonl_lines(path)
}

/// Streaming sink for a run directory: step log, intervention index, and a
/// thinned trajectory table.
#[derive(Debug)]
pub struct RunWriter {
    steps: BufWriter<File>,
    interventions: BufWriter<File>,
    trajectory: BufWriter<File>,
}

impl RunWriter {
    /// Start fresh files in `dir`, writing the trajectory CSV header for
    /// `n_atoms` atoms.
    pub fn create(dir: &Path, n_atoms: usize) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut trajectory = BufWriter::new(File::create(dir.join(TRAJECTORY_FILE))?);
        let mut header = String::from("step,time,energy,temperature");
        for i in 0..n_atoms {
            for axis in ["x", "y", "z"] {
                header.push(',');
                header.push_str(axis);
                header.push_str(&i.to_string());
            }
        }
        writeln!(trajectory, "{header}")?;
        Ok(Self {
            steps: BufWriter::new(File::create(dir.join(STEP_LOG_FILE))?),
            interventions: BufWriter::new(File::create(dir.join(INTERVENTION_LOG_FILE))?),
            trajectory,
        })
    }

    /// Reopen the files of an interrupted run in append mode.
    pub fn append_to(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(OpenOptions::new().append(true).open(dir.join(name))?))
        };
        Ok(Self {
            steps: open(STEP_LOG_FILE)?,
            interventions: open(INTERVENTION_LOG_FILE)?,
            trajectory: open(TRAJECTORY_FILE)?,
        })
    }

    pub fn record_step(&mut self, rec: &StepRecord) -> Result<()> {
        write_json_line(&mut self.steps, rec)
    }

    pub fn record_intervention(&mut self, rec: &InterventionRecord) -> Result<()> {
        write_json_line(&mut self.interventions, rec)
    }

    pub fn record_trajectory_row(
        &mut self,
        step: u64,
        time: f64,
        energy: f64,
        temperature: f64,
        positions: &[f64],
    ) -> Result<()> {
        let mut row = format!("{step},{time},{energy},{temperature}");
        for p in positions {
            row.push(',');
            row.push_str(&p.to_string());
        }
        writeln!(self.trajectory, "{row}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.interventions.flush()?;
        self.trajectory.flush()?;
        Ok(())
    }
}

fn write_json_line<W: Write, R: Serialize>(w: &mut W, rec: &R) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}
