//! Bayesian calibration of ensemble uncertainties.
//!
//! The model: true energy error e is N(0, sigma_pred^2 / lambda) with a
//! global precision rescale lambda under a conjugate Gamma prior. Each
//! intervention contributes one observed (e, sigma_pred) pair; the
//! sufficient statistics are the count n and the running mean M_n of
//! e^2/sigma^2. Everything downstream (the within-threshold probability,
//! the Student-t predictive density, the MAP rescale) is a closed form in
//! (a, b, n, M_n), evaluated in log space so that large n cannot
//! overflow a Gamma function.
//!
//! This module works in f64 only; calibrated probabilities feed a yes/no
//! decision, and carrying reduced precision here buys nothing.

mod hyp2f1;
pub mod selftest;

pub use hyp2f1::{hyp2f1_special, ln_hyp2f1_special};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

const LN_2PI: f64 = 1.8378770664093454836;

/// Conjugate-posterior sufficient statistics for the precision rescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Prior shape; larger biases toward trusting the raw uncertainties.
    a: f64,
    /// Prior rate.
    b: f64,
    n: u64,
    /// Running mean of e_i^2 / sigma_i^2; meaningless while n = 0.
    m_n: f64,
}

impl CalibrationState {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() || !(b > 0.0) || !b.is_finite() {
            return Err(Error::Config(format!(
                "calibration prior needs finite a > 0 and b > 0, got a={a}, b={b}"
            )));
        }
        Ok(Self { a, b, n: 0, m_n: 0.0 })
    }

    #[inline]
    pub fn a(&self) -> f64 {
        self.a
    }

    #[inline]
    pub fn b(&self) -> f64 {
        self.b
    }

    #[inline]
    pub fn n(&self) -> u64 {
        self.n
    }

    #[inline]
    pub fn m_n(&self) -> f64 {
        self.m_n
    }

    /// Posterior shape a + n/2.
    #[inline]
    pub fn alpha(&self) -> f64 {
        self.a + self.n as f64 / 2.0
    }

    /// Posterior rate b + n M_n / 2.
    #[inline]
    pub fn beta(&self) -> f64 {
        self.b + self.n as f64 * self.m_n / 2.0
    }

    /// Fold in one observed error with its predicted scale.
    pub fn observe(&mut self, e: f64, sigma_pred: f64) -> Result<()> {
        if !(sigma_pred > 0.0) || !sigma_pred.is_finite() {
            return Err(Error::Config(format!(
                "observation needs sigma_pred > 0, got {sigma_pred}"
            )));
        }
        if !e.is_finite() {
            return Err(Error::Numeric(format!("non-finite error observation {e}")));
        }
        let z = (e / sigma_pred) * (e / sigma_pred);
        let n1 = self.n as f64 + 1.0;
        self.m_n = (self.n as f64 * self.m_n + z) / n1;
        self.n += 1;
        Ok(())
    }
}

fn require_sigma(sigma_star: f64) -> Result<()> {
    if !(sigma_star > 0.0) || !sigma_star.is_finite() {
        return Err(Error::Config(format!(
            "predictive query needs sigma_star > 0, got {sigma_star}"
        )));
    }
    Ok(())
}

/// Posterior probability that a fresh error with predicted scale
/// `sigma_star` lands within `[-k_threshold, k_threshold]`, with the
/// precision rescale fully marginalized out.
pub fn prob_error_within(
    state: &CalibrationState,
    sigma_star: f64,
    k_threshold: f64,
) -> Result<f64> {
    require_sigma(sigma_star)?;
    if !(k_threshold >= 0.0) || !k_threshold.is_finite() {
        return Err(Error::Config(format!(
            "threshold must be finite and >= 0, got {k_threshold}"
        )));
    }
    if k_threshold == 0.0 {
        return Ok(0.0);
    }
    let alpha = state.alpha();
    let s = alpha + 0.5;
    let beta = state.beta();
    let x = -k_threshold * k_threshold / (2.0 * sigma_star * sigma_star * beta);
    let ln_f = ln_hyp2f1_special(s, x)?;
    let ln_p = (2.0 * k_threshold).ln() + ln_gamma(s) - ln_gamma(alpha)
        - 0.5 * (LN_2PI + 2.0 * sigma_star.ln())
        - 0.5 * beta.ln()
        + ln_f;
    Ok(ln_p.exp().min(1.0))
}

/// Log of the marginal predictive density of an error `e_star` at
/// predicted scale `sigma_star` (a Student-t family member).
pub fn ln_predictive_density(
    state: &CalibrationState,
    sigma_star: f64,
    e_star: f64,
) -> Result<f64> {
    require_sigma(sigma_star)?;
    if !e_star.is_finite() {
        return Err(Error::Config(format!("density query at non-finite e_star {e_star}")));
    }
    let alpha = state.alpha();
    let s = alpha + 0.5;
    let beta = state.beta();
    let delta = e_star * e_star / (2.0 * sigma_star * sigma_star);
    Ok(ln_gamma(s) - ln_gamma(alpha)
        - 0.5 * (LN_2PI + 2.0 * sigma_star.ln())
        - 0.5 * beta.ln()
        - s * (delta / beta).ln_1p())
}

pub fn predictive_density(state: &CalibrationState, sigma_star: f64, e_star: f64) -> Result<f64> {
    Ok(ln_predictive_density(state, sigma_star, e_star)?.exp())
}

/// Posterior mode of the precision rescale. Reporting only; decisions go
/// through [`prob_error_within`], which needs no point estimate.
pub fn map_lambda(state: &CalibrationState) -> Result<f64> {
    let alpha = state.alpha();
    if !(alpha > 1.0) {
        return Err(Error::Config(format!(
            "rescale mode undefined: needs a + n/2 > 1, got {alpha}"
        )));
    }
    Ok((alpha - 1.0) / state.beta())
}

/// Rescaled reporting uncertainty sigma_pred / sqrt(lambda-hat).
pub fn calibrated_sigma(state: &CalibrationState, sigma_pred: f64) -> Result<f64> {
    require_sigma(sigma_pred)?;
    Ok(sigma_pred / map_lambda(state)?.sqrt())
}

/// Batch recalibration factor xi = sqrt(mean e^2 / mean sigma^2);
/// multiplying every sigma by xi matches mean predicted variance to mean
/// squared error.
pub fn recalibration_factor(errors: &[f64], sigmas: &[f64]) -> Result<f64> {
    if errors.is_empty() || errors.len() != sigmas.len() {
        return Err(Error::Config(format!(
            "recalibration needs equal-length nonempty inputs, got {} and {}",
            errors.len(),
            sigmas.len()
        )));
    }
    let mut se = 0.0;
    let mut ss = 0.0;
    for (&e, &s) in errors.iter().zip(sigmas) {
        if !(s > 0.0) || !s.is_finite() || !e.is_finite() {
            return Err(Error::Config(format!(
                "recalibration inputs must be finite with sigma > 0, got e={e}, sigma={s}"
            )));
        }
        se += e * e;
        ss += s * s;
    }
    Ok((se / ss).sqrt())
}
