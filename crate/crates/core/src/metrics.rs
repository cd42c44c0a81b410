//! Post-run analyses: error summaries, ranking quality, calibration
//! curves, and the rare-event intervention-rate test.
//!
//! Everything here is a pure batch computation on `f64` slices; callers
//! convert once at the boundary. Seeds make the one randomized analysis
//! (the permutation test) reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::predictive_log_likelihood;
use crate::error::{Error, Result};
use crate::otf::RunLog;

/// Root mean square of `errors`.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Config("rmse needs at least one error".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config("rmse needs finite errors".into()));
    }
    let mean_sq = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Probability that a uniformly random positive outranks a uniformly
/// random negative, ties counted half (the Mann-Whitney statistic).
///
/// Computed from integer pair counts, so the result is exactly the
/// brute-force pairwise average.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Config("both classes must be present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Sweep tie groups in ascending score order. Every positive in a group
    // strictly outranks all negatives below the group and half-counts the
    // negatives inside it.
    let mut concordant: u64 = 0;
    let mut tied: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here: u64 = 0;
        let mut neg_here: u64 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        concordant += pos_here * negatives_below;
        tied += pos_here * neg_here;
        negatives_below += neg_here;
        i = j;
    }
    Ok((2 * concordant + tied) as f64 / (2 * positives * negatives) as f64)
}

/// Predicted standard deviations paired with observed error magnitudes.
#[derive(Debug, Clone)]
pub struct ErrorSigmaPairs {
    pairs: Vec<(f64, f64)>,
}

impl ErrorSigmaPairs {
    /// Each pair is (predicted sigma, observed error magnitude).
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        for &(sigma, error) in &pairs {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::Config(format!(
                    "predicted standard deviations must be positive and finite, got {sigma}"
                )));
            }
            if !error.is_finite() {
                return Err(Error::Config("observed errors must be finite".into()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index into a reflected-at-the-edges extension of `0..n`, the padding
/// that makes the filtered curves reproducible bit for bit.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Discrete Gaussian filter with reflect boundary handling; kernel radius
/// is `4 sigma_f` rounded, kernel weights normalized to unit sum.
fn gaussian_filter(values: &[f64], sigma_f: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_f + 0.5) as usize;
    if radius == 0 {
        return values.to_vec();
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as i64)..=radius as i64 {
        kernel.push((-0.5 * (k as f64 / sigma_f).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= norm;
    }

    let n = values.len();
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[reflect(i + j as i64 - radius as i64, n)])
                .sum()
        })
        .collect()
}

/// Sort the pairs by ascending predicted sigma, smooth the variance and
/// squared-error sequences with a Gaussian filter of width `sigma_f`, and
/// return the square roots: a smoothed sigma curve and a smoothed RMSE
/// curve over the same sorted axis.
pub fn smoothed_error_curve(
    pairs: &ErrorSigmaPairs,
    sigma_f: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::Config("curve needs at least two pairs".into()));
    }
    if !(sigma_f > 0.0) || !sigma_f.is_finite() {
        return Err(Error::Config(format!(
            "filter width must be positive and finite, got {sigma_f}"
        )));
    }
    let mut sorted = pairs.pairs.clone();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("validated finite"));

    let variances: Vec<f64> = sorted.iter().map(|&(s, _)| s * s).collect();
    let squared_errors: Vec<f64> = sorted.iter().map(|&(_, e)| e * e).collect();

    let sigma_curve = gaussian_filter(&variances, sigma_f).into_iter().map(f64::sqrt).collect();
    let rmse_curve =
        gaussian_filter(&squared_errors, sigma_f).into_iter().map(f64::sqrt).collect();
    Ok((sigma_curve, rmse_curve))
}

/// Split the mean log likelihood into per-error-bin contributions.
///
/// Sample `i` scores `log N(truth_i; mean_i, sigma_i^2)` and lands in the
/// bin holding its error magnitude `|mean_i - truth_i|`; bins are
/// half-open `[lo, hi)` except the last, which is closed. Each bin
/// contributes its log-likelihood sum divided by the TOTAL sample count,
/// so the contributions sum to the overall mean log likelihood.
pub fn mll_error_decomposition(
    means: &[f64],
    sigmas: &[f64],
    truths: &[f64],
    bin_edges: &[f64],
) -> Result<Vec<f64>> {
    let n = means.len();
    if n == 0 {
        return Err(Error::Config("decomposition needs at least one sample".into()));
    }
    if sigmas.len() != n || truths.len() != n {
        return Err(Error::Config(format!(
            "inconsistent lengths: {n} means, {} sigmas, {} truths",
            sigmas.len(),
            truths.len()
        )));
    }
    if bin_edges.len() < 2 {
        return Err(Error::Config("need at least two bin edges".into()));
    }
    if bin_edges.iter().any(|e| !e.is_finite())
        || bin_edges.windows(2).any(|w| !(w[0] < w[1]))
    {
        return Err(Error::Config("bin edges must be finite and strictly increasing".into()));
    }

    let n_bins = bin_edges.len() - 1;
    let mut sums = vec![0.0; n_bins];
    for i in 0..n {
        let error = (means[i] - truths[i]).abs();
        let last = bin_edges[n_bins];
        let bin = if error == last {
            n_bins - 1
        } else {
            match bin_edges.windows(2).position(|w| w[0] <= error && error < w[1]) {
                Some(b) => b,
                None => {
                    return Err(Error::Config(format!(
                        "error magnitude {error} is outside the bins [{}, {last}]",
                        bin_edges[0]
                    )))
                }
            }
        };
        sums[bin] += predictive_log_likelihood(means[i], sigmas[i] * sigmas[i], truths[i])?;
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Knobs for [`intervention_rate_analysis`].
#[derive(Debug, Clone)]
pub struct RateTestOpts {
    /// Fraction of the run discarded as warm-up before tiling.
    pub warmup_fraction: f64,
    pub n_permutations: u64,
    pub seed: u64,
}

impl Default for RateTestOpts {
    fn default() -> Self {
        Self { warmup_fraction: 0.2, n_permutations: 10_000, seed: 0 }
    }
}

/// Outcome of the rare-event rate comparison.
#[derive(Debug, Clone)]
pub struct RateAnalysis {
    /// Mean interventions per event window over mean per background
    /// window; `+inf` when all interventions sit in event windows.
    pub ratio: f64,
    /// Permutation p-value for "event windows collect more interventions",
    /// with add-one smoothing.
    pub p_value: f64,
    pub event_windows: usize,
    pub background_windows: usize,
    pub event_rate: f64,
    pub background_rate: f64,
}

/// Compare intervention density near events against the background.
///
/// The post-warm-up step range is tiled into windows of `2 half_width + 1`
/// steps (a trailing partial window is dropped); a window counts as an
/// event window when it intersects `[t - half_width, t + half_width]` for
/// any event step `t`. The p-value permutes the event labels over windows.
pub fn intervention_rate_analysis(
    run: &RunLog,
    event_steps: &[u64],
    half_width: u64,
    opts: &RateTestOpts,
) -> Result<RateAnalysis> {
    let intervention_steps = run.intervention_steps();
    intervention_rate_over_steps(
        run.steps.len() as u64,
        &intervention_steps,
        event_steps,
        half_width,
        opts,
    )
}

/// [`intervention_rate_analysis`] on raw step indices: a run of
/// `n_steps` steps, the steps that intervened, and the event steps.
pub fn intervention_rate_over_steps(
    n_steps: u64,
    intervention_steps: &[u64],
    event_steps: &[u64],
    half_width: u64,
    opts: &RateTestOpts,
) -> Result<RateAnalysis> {
    if !(0.0..1.0).contains(&opts.warmup_fraction) {
        return Err(Error::Config(format!(
            "warm-up fraction must lie in [0, 1), got {}",
            opts.warmup_fraction
        )));
    }
    if opts.n_permutations == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    let width = 2 * half_width + 1;
    let warmup = (n_steps as f64 * opts.warmup_fraction).floor() as u64;
    let n_windows = (n_steps.saturating_sub(warmup) / width) as usize;
    if n_windows == 0 {
        return Err(Error::Config(format!(
            "no complete windows of width {width} after a {warmup}-step warm-up"
        )));
    }

    let mut events = event_steps.to_vec();
    events.sort_unstable();
    let mut interventions = intervention_steps.to_vec();
    interventions.sort_unstable();

    let mut counts = vec![0u64; n_windows];
    let mut is_event = vec![false; n_windows];
    for (w, (count, flag)) in counts.iter_mut().zip(is_event.iter_mut()).enumerate() {
        let lo = warmup + w as u64 * width;
        let hi = lo + width;
        let first = interventions.partition_point(|&s| s < lo);
        let past = interventions.partition_point(|&s| s < hi);
        *count = (past - first) as u64;
        // The window touches an event's influence zone iff some event lies
        // within half_width of it.
        let reach_lo = lo.saturating_sub(half_width);
        let reach_hi = hi + half_width;
        let e = events.partition_point(|&s| s < reach_lo);
        *flag = e < events.len() && events[e] < reach_hi;
    }

    let n_event = is_event.iter().filter(|&&f| f).count();
    let n_background = n_windows - n_event;
    if n_event == 0 {
        return Err(Error::Config("no event windows after warm-up".into()));
    }
    if n_background == 0 {
        return Err(Error::Config("no background windows after warm-up".into()));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Config("no interventions after warm-up".into()));
    }

    let rate = |labels: &[bool], want: bool| {
        let (mut total, mut windows) = (0u64, 0u64);
        for (c, &l) in counts.iter().zip(labels) {
            if l == want {
                total += c;
                windows += 1;
            }
        }
        total as f64 / windows as f64
    };
    let ratio_of = |labels: &[bool]| {
        let event = rate(labels, true);
        let background = rate(labels, false);
        if background == 0.0 {
            // event > 0 here: some window is nonzero and it is not a
            // background one.
            f64::INFINITY
        } else {
            event / background
        }
    };

    let event_rate = rate(&is_event, true);
    let background_rate = rate(&is_event, false);
    let observed = ratio_of(&is_event);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut labels = is_event.clone();
    let mut at_least_as_extreme = 0u64;
    for _ in 0..opts.n_permutations {
        labels.shuffle(&mut rng);
        if ratio_of(&labels) >= observed {
            at_least_as_extreme += 1;
        }
    }
    let p_value = (at_least_as_extreme + 1) as f64 / (opts.n_permutations + 1) as f64;

    Ok(RateAnalysis {
        ratio: observed,
        p_value,
        event_windows: n_event,
        background_windows: n_background,
        event_rate,
        background_rate,
    })
}
