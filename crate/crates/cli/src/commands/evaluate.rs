//! Score a checkpointed ensemble against labeled configurations.
//!
//! Loads the run checkpoint, predicts every dataset entry, and reports
//! accuracy (energy and force RMSE), ranking quality of the calibrated
//! uncertainty against actual threshold exceedances, the recalibration
//! factor, and a binned log-likelihood breakdown, plus CSVs with the raw
//! predictions and the smoothed sigma/RMSE curves.

use std::path::Path;

use serde::Serialize;

use otf_core::calibration::calibrated_sigma;
use otf_core::data::Dataset;
use otf_core::ensemble::ensemble_predict;
use otf_core::metrics::{
    auc_roc, mll_error_decomposition, rmse, smoothed_error_curve, ErrorSigmaPairs,
};
use otf_core::otf::OtfEngine;
use otf_core::{Error, Result};

use crate::config::RunConfig;

pub const REPORT_FILE: &str = "evaluate-report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Serialize)]
struct EvaluateReport {
    n_samples: usize,
    k_threshold: f64,
    energy_rmse: f64,
    force_rmse: f64,
    recalibration_factor: f64,
    /// Probability that an above-threshold error outranks a
    /// below-threshold one by predicted sigma; absent when every error
    /// falls on one side of the threshold.
    auc: Option<f64>,
    mean_log_likelihood: f64,
    bin_edges: Vec<f64>,
    mll_contributions: Vec<f64>,
}

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let section = config
        .evaluate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [evaluate] section".into()))?;
    let engine = OtfEngine::<f64>::resume(&config.resolve(&section.run_dir))?;
    let dataset = Dataset::<f64>::read_jsonl(&config.resolve(&section.dataset))?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    config.write_snapshot(out)?;

    let k = config.gate.threshold;
    let mut errors = Vec::with_capacity(dataset.len());
    let mut sigmas = Vec::with_capacity(dataset.len());
    let mut means = Vec::with_capacity(dataset.len());
    let mut truths = Vec::with_capacity(dataset.len());
    let mut force_errors = Vec::new();
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.get(i);
        let thetas = engine.ensemble().thetas();
        let pred = ensemble_predict(engine.surrogate(), &thetas, &sample.config)?;
        let sigma = calibrated_sigma(engine.calibration(), pred.sigma_energy)?;
        let error = pred.energy - sample.energy;
        rows.push(format!(
            "{i},{},{},{},{sigma},{error}",
            sample.energy, pred.energy, pred.sigma_energy
        ));
        means.push(pred.energy);
        truths.push(sample.energy);
        errors.push(error);
        sigmas.push(sigma);
        for (p, t) in pred.forces.iter().zip(&sample.forces) {
            for axis in 0..3 {
                force_errors.push(p[axis] - t[axis]);
            }
        }
    }
    let exceeds: Vec<bool> = errors.iter().map(|e| e.abs() > k).collect();
    let auc = if exceeds.iter().any(|&x| x) && exceeds.iter().any(|&x| !x) {
        Some(auc_roc(&sigmas, &exceeds)?)
    } else {
        None
    };

    let bin_edges = match &section.bins {
        Some(edges) => edges.clone(),
        None => {
            let max_abs = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            vec![0.0, 0.5 * k, k, 2.0 * k, (4.0 * k).max(max_abs * (1.0 + 1e-9))]
        }
    };
    let mll_contributions = mll_error_decomposition(&means, &sigmas, &truths, &bin_edges)?;
    let report = EvaluateReport {
        n_samples: dataset.len(),
        k_threshold: k,
        energy_rmse: rmse(&errors)?,
        force_rmse: rmse(&force_errors)?,
        recalibration_factor: otf_core::calibration::recalibration_factor(&errors, &sigmas)?,
        auc,
        mean_log_likelihood: mll_contributions.iter().sum(),
        bin_edges,
        mll_contributions,
    };
    super::write_json(&out.join(REPORT_FILE), &report)?;
    super::write_csv(
        &out.join(PREDICTIONS_FILE),
        "index,label,mean,sigma,sigma_calibrated,error",
        rows,
    )?;

    if dataset.len() >= 2 {
        let pairs = ErrorSigmaPairs::new(
            sigmas.iter().zip(&errors).map(|(&s, &e)| (s, e.abs())).collect(),
        )?;
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
    }
    println!(
        "evaluated {} samples: energy RMSE {:.6}, recalibration factor {:.4}",
        report.n_samples, report.energy_rmse, report.recalibration_factor
    );
    Ok(())
}
