//! Grid self-test of the within-threshold probability.
//!
//! Two independent oracles check the closed form in every cell: Simpson
//! quadrature of the predictive density over [-K, K], and a direct Monte
//! Carlo simulation of the generative model (draw the precision rescale
//! from its posterior, then the error from the rescaled normal). Neither
//! touches the hypergeometric path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::{predictive_density, prob_error_within, CalibrationState};
use crate::error::{Error, Result};

/// Agreement demanded between the closed form and Simpson quadrature.
pub const QUADRATURE_TOL: f64 = 1e-6;
const SIMPSON_INTERVALS: usize = 32_768;

#[derive(Debug, Clone)]
pub struct CellResult {
    pub a: f64,
    pub b: f64,
    pub n: u64,
    pub m_n: f64,
    pub sigma_star: f64,
    pub k_threshold: f64,
    pub closed_form: f64,
    pub quadrature: f64,
    pub mc_estimate: f64,
    /// Binomial standard error of the Monte Carlo estimate.
    pub mc_sd: f64,
    pub quadrature_ok: bool,
    pub mc_ok: bool,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub cells: Vec<CellResult>,
    pub mc_draws: u64,
    pub quadrature_failures: usize,
    pub mc_failures: usize,
}

impl SelftestReport {
    pub fn all_ok(&self) -> bool {
        self.quadrature_failures == 0 && self.mc_failures == 0
    }
}

fn simpson_prob(state: &CalibrationState, sigma_star: f64, k: f64) -> Result<f64> {
    let h = k / SIMPSON_INTERVALS as f64;
    let mut total = 0.0;
    for j in 0..SIMPSON_INTERVALS {
        let e0 = j as f64 * h;
        total += h / 6.0
            * (predictive_density(state, sigma_star, e0)?
                + 4.0 * predictive_density(state, sigma_star, e0 + 0.5 * h)?
                + predictive_density(state, sigma_star, e0 + h)?);
    }
    Ok(2.0 * total)
}

fn mc_prob(
    state: &CalibrationState,
    sigma_star: f64,
    k: f64,
    draws: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let gamma = Gamma::new(state.alpha(), 1.0 / state.beta())
        .map_err(|e| Error::Numeric(format!("posterior sampler setup failed: {e}")))?;
    let mut hits = 0u64;
    for _ in 0..draws {
        let lambda: f64 = gamma.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let e = z * sigma_star / lambda.sqrt();
        if e.abs() < k {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    // Laplace-smoothed variance so the boundary cases (0 or N hits) keep
    // an honest nonzero standard error.
    let p_smooth = (hits as f64 + 1.0) / (draws as f64 + 2.0);
    let sd = (p_smooth * (1.0 - p_smooth) / draws as f64).sqrt();
    Ok((p, sd))
}

/// Check the closed form against both oracles over the full parameter
/// grid. Deterministic for a given seed; cells run in parallel with
/// per-cell rng streams.
pub fn run_selftest(mc_draws: u64, seed: u64) -> Result<SelftestReport> {
    if mc_draws < 1000 {
        return Err(Error::Config(format!(
            "self-test needs at least 1000 draws per cell, got {mc_draws}"
        )));
    }
    let b = 10.0;
    let mut specs: Vec<(f64, u64, f64, f64, f64)> = Vec::new();
    for a in [1.5, 3.0] {
        for n in [0u64, 5, 200] {
            for m_n in [0.5, 1.0, 4.0] {
                for sigma_star in [0.5, 2.0] {
                    for k_mult in [0.5, 2.0, 5.0] {
                        specs.push((a, n, m_n, sigma_star, k_mult * sigma_star));
                    }
                }
            }
        }
    }

    let cells = specs
        .par_iter()
        .enumerate()
        .map(|(idx, &(a, n, m_n, sigma_star, k))| {
            let mut state = CalibrationState::new(a, b)?;
            // Install the cell's sufficient statistics directly; the
            // observation path is covered by its own unit tests.
            for _ in 0..n {
                state.observe(m_n.sqrt(), 1.0)?;
            }
            let closed_form = prob_error_within(&state, sigma_star, k)?;
            let quadrature = simpson_prob(&state, sigma_star, k)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64));
            let (mc_estimate, mc_sd) = mc_prob(&state, sigma_star, k, mc_draws, &mut rng)?;
            Ok(CellResult {
                a,
                b,
                n,
                m_n,
                sigma_star,
                k_threshold: k,
                closed_form,
                quadrature,
                quadrature_ok: (closed_form - quadrature).abs() <= QUADRATURE_TOL,
                mc_estimate,
                mc_sd,
                mc_ok: (closed_form - mc_estimate).abs() <= 3.0 * mc_sd + 1e-9,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let quadrature_failures = cells.iter().filter(|c| !c.quadrature_ok).count();
    let mc_failures = cells.iter().filter(|c| !c.mc_ok).count();
    Ok(SelftestReport { cells, mc_draws, quadrature_failures, mc_failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_survives_both_oracles_on_the_grid() {
        let report = run_selftest(200_000, 11).unwrap();
        assert_eq!(report.cells.len(), 108);
        for c in &report.cells {
            assert!(
                c.quadrature_ok,
                "quadrature mismatch at a={} n={} M={} sigma={} K={}: {} vs {}",
                c.a, c.n, c.m_n, c.sigma_star, c.k_threshold, c.closed_form, c.quadrature
            );
            assert!(
                c.mc_ok,
                "MC mismatch at a={} n={} M={} sigma={} K={}: {} vs {} (sd {})",
                c.a, c.n, c.m_n, c.sigma_star, c.k_threshold, c.closed_form, c.mc_estimate, c.mc_sd
            );
        }
        assert!(report.all_ok());
    }

    #[test]
    fn selftest_is_deterministic() {
        let a = run_selftest(2_000, 5).unwrap();
        let b = run_selftest(2_000, 5).unwrap();
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x.mc_estimate, y.mc_estimate);
        }
    }

    #[test]
    fn tiny_budget_rejected() {
        assert!(run_selftest(10, 0).is_err());
    }
}
