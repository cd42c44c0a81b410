//! Machine-readable cross-check of the gate probability.
//!
//! Runs the built-in grid (quadrature + Monte Carlo oracles) and adds a
//! sensitivity check: the closed form is linear in its hypergeometric
//! factor, so scaling the result by 1 + 1e-3 is exactly a 1e-3 relative
//! fault in that factor, and the quadrature comparison must catch it in
//! every cell.

use std::path::Path;

use serde::Serialize;

use otf_core::calibration::selftest::{run_selftest, QUADRATURE_TOL};
use otf_core::{Error, Result};

pub const REPORT_FILE: &str = "calib-selftest.json";
const FAULT_SCALE: f64 = 1e-3;

#[derive(Debug, Serialize)]
struct CellReport {
    a: f64,
    b: f64,
    n: u64,
    m_n: f64,
    sigma_star: f64,
    k_threshold: f64,
    closed_form: f64,
    quadrature: f64,
    mc_estimate: f64,
    mc_sd: f64,
    quadrature_abs_dev: f64,
    mc_abs_dev: f64,
    quadrature_ok: bool,
    mc_ok: bool,
}

#[derive(Debug, Serialize)]
struct FaultCheck {
    relative_perturbation: f64,
    /// Smallest faulted quadrature deviation over the grid; must clear
    /// the tolerance for the fault to be detectable everywhere.
    min_faulted_deviation: f64,
    tolerance: f64,
    detected: bool,
}

#[derive(Debug, Serialize)]
struct SelftestJson {
    mc_draws: u64,
    seed: u64,
    cells: Vec<CellReport>,
    quadrature_failures: usize,
    mc_failures: usize,
    fault_check: FaultCheck,
    pass: bool,
}

pub fn run(draws: u64, seed: u64, out: Option<&Path>) -> Result<()> {
    let report = run_selftest(draws, seed)?;

    let mut min_faulted_deviation = f64::INFINITY;
    let cells: Vec<CellReport> = report
        .cells
        .iter()
        .map(|c| {
            let faulted = c.closed_form * (1.0 + FAULT_SCALE);
            min_faulted_deviation = min_faulted_deviation.min((faulted - c.quadrature).abs());
            CellReport {
                a: c.a,
                b: c.b,
                n: c.n,
                m_n: c.m_n,
                sigma_star: c.sigma_star,
                k_threshold: c.k_threshold,
                closed_form: c.closed_form,
                quadrature: c.quadrature,
                mc_estimate: c.mc_estimate,
                mc_sd: c.mc_sd,
                quadrature_abs_dev: (c.closed_form - c.quadrature).abs(),
                mc_abs_dev: (c.closed_form - c.mc_estimate).abs(),
                quadrature_ok: c.quadrature_ok,
                mc_ok: c.mc_ok,
            }
        })
        .collect();

    let fault_check = FaultCheck {
        relative_perturbation: FAULT_SCALE,
        min_faulted_deviation,
        tolerance: QUADRATURE_TOL,
        detected: min_faulted_deviation > QUADRATURE_TOL,
    };
    let pass = report.all_ok() && fault_check.detected;
    let json = SelftestJson {
        mc_draws: report.mc_draws,
        seed,
        cells,
        quadrature_failures: report.quadrature_failures,
        mc_failures: report.mc_failures,
        fault_check,
        pass,
    };

    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        super::write_json(&dir.join(REPORT_FILE), &json)?;
    }
    if !pass {
        return Err(Error::Numeric(format!(
            "calibration self-test failed: {} quadrature and {} Monte Carlo mismatches, \
             fault detected: {}",
            json.quadrature_failures, json.mc_failures, json.fault_check.detected
        )));
    }
    Ok(())
}
