//! Post-run statistics: does the gate fire preferentially around rare
//! events, and how well does predicted sigma track realized error?
//!
//! Events are either supplied explicitly or detected as barrier
//! crossings of the double-well bond length in the sampled trajectory
//! (attributed to the first sampled step on the new side).

use std::fs;
use std::path::Path;

use serde::Serialize;

use otf_core::metrics::{
    intervention_rate_analysis, smoothed_error_curve, ErrorSigmaPairs, RateTestOpts,
};
use otf_core::oracle::OracleSpec;
use otf_core::otf::{
    read_interventions_jsonl, read_steps_jsonl, RunLog, INTERVENTION_LOG_FILE, STEP_LOG_FILE,
    TRAJECTORY_FILE,
};
use otf_core::{Error, Result};

use crate::config::RunConfig;

pub const REPORT_FILE: &str = "analyze-report.json";
pub const RATE_FILE: &str = "rate.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    n_steps: usize,
    n_interventions: usize,
    n_events: usize,
    half_width: u64,
    warmup_fraction: f64,
    n_permutations: u64,
    /// +inf serializes as null; the flag below disambiguates.
    rate_ratio: f64,
    all_interventions_in_event_windows: bool,
    p_value: f64,
    event_windows: usize,
    background_windows: usize,
    event_rate: f64,
    background_rate: f64,
    curve_points: usize,
}

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let section = config
        .analyze
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [analyze] section".into()))?;
    let run_dir = config.resolve(&section.run_dir);
    let steps = read_steps_jsonl(&run_dir.join(STEP_LOG_FILE))?;
    let interventions = read_interventions_jsonl(&run_dir.join(INTERVENTION_LOG_FILE))?;
    if steps.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no step records",
            run_dir.display()
        )));
    }
    let log = RunLog { steps, interventions };

    let events = match &section.events {
        Some(steps) => steps.clone(),
        None => detect_barrier_crossings(config, &run_dir)?,
    };

    std::fs::create_dir_all(out)?;
    config.write_snapshot(out)?;
    super::write_csv(
        &out.join(EVENTS_FILE),
        "step",
        events.iter().map(|s| s.to_string()),
    )?;

    let rate = intervention_rate_analysis(
        &log,
        &events,
        section.half_width,
        &RateTestOpts {
            warmup_fraction: section.warmup_fraction,
            n_permutations: section.n_permutations,
            seed: section.seed,
        },
    )?;
    super::write_csv(
        &out.join(RATE_FILE),
        "ratio,p_value,event_windows,background_windows,event_rate,background_rate",
        std::iter::once(format!(
            "{},{},{},{},{},{}",
            rate.ratio,
            rate.p_value,
            rate.event_windows,
            rate.background_windows,
            rate.event_rate,
            rate.background_rate
        )),
    )?;

    // Predicted sigma against realized error, both recorded at each
    // intervention before the model saw the new label.
    let pairs: Vec<(f64, f64)> = log
        .interventions
        .iter()
        .map(|r| (r.sigma_pred, r.error.abs()))
        .collect();
    let curve_points = if pairs.len() >= 2 {
        let pairs = ErrorSigmaPairs::new(pairs)?;
        let (sigma_curve, rmse_curve) = smoothed_error_curve(&pairs, section.sigma_f)?;
        super::write_csv(
            &out.join(CURVE_FILE),
            "rank,sigma_smoothed,rmse_smoothed",
            sigma_curve
                .iter()
                .zip(&rmse_curve)
                .enumerate()
                .map(|(i, (s, r))| format!("{i},{s},{r}")),
        )?;
        sigma_curve.len()
    } else {
        0
    };

    let report = AnalyzeReport {
        n_steps: log.steps.len(),
        n_interventions: log.interventions.len(),
        n_events: events.len(),
        half_width: section.half_width,
        warmup_fraction: section.warmup_fraction,
        n_permutations: section.n_permutations,
        rate_ratio: rate.ratio,
        all_interventions_in_event_windows: rate.ratio.is_infinite(),
        p_value: rate.p_value,
        event_windows: rate.event_windows,
        background_windows: rate.background_windows,
        event_rate: rate.event_rate,
        background_rate: rate.background_rate,
        curve_points,
    };
    super::write_json(&out.join(REPORT_FILE), &report)?;
    println!(
        "{} events, rate ratio {:.3} (p = {:.4}) over {} windows",
        report.n_events,
        report.rate_ratio,
        report.p_value,
        report.event_windows + report.background_windows
    );
    Ok(())
}

/// Steps where the sampled dimer bond length crosses the barrier top.
fn detect_barrier_crossings(config: &RunConfig, run_dir: &Path) -> Result<Vec<u64>> {
    let OracleSpec::DoubleWellDimer { r_low, r_high, .. } = config.oracle else {
        return Err(Error::Config(
            "[analyze] events must be given explicitly for this oracle".into(),
        ));
    };
    let midpoint = 0.5 * (r_low + r_high);

    let path = run_dir.join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut events = Vec::new();
    let mut previous_side: Option<bool> = None;
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 10 {
            return Err(Error::Serialization(format!(
                "{}:{}: expected a two-atom trajectory row",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                Error::Serialization(format!("{}:{}: {e}", path.display(), lineno + 1))
            })
        };
        let step: u64 = fields[0].parse().map_err(|e| {
            Error::Serialization(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let mut r2 = 0.0;
        for axis in 0..3 {
            let d = parse(fields[4 + axis])? - parse(fields[7 + axis])?;
            r2 += d * d;
        }
        let side = r2.sqrt() > midpoint;
        if previous_side.is_some_and(|p| p != side) {
            events.push(step);
        }
        previous_side = Some(side);
    }
    Ok(events)
}
