//! Acceptance gate: one test per shipped guarantee.
//!
//! Every test prints a single `ACCEPTANCE PASS/FAIL [nn]` line with the
//! measured numbers (visible under `--nocapture`) and asserts the same
//! condition, so a plain `cargo test` enforces the gate. The expensive
//! double-well runs are built once and shared by the tests that grade
//! them from different angles.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otf_core::calibration::selftest::run_selftest;
use otf_core::calibration::{
    hyp2f1_special, predictive_density, recalibration_factor, CalibrationState,
};
use otf_core::data::{AtomicConfiguration, Dataset, Dim, LabeledSample};
use otf_core::dynamics::{
    langevin_step, maxwell_boltzmann_velocities, velocity_verlet_step, MdState,
};
use otf_core::ensemble::{aggregate, ensemble_predict, predictive_log_likelihood};
use otf_core::metrics::{
    auc_roc, intervention_rate_over_steps, mll_error_decomposition, RateTestOpts,
};
use otf_core::oracle::{Oracle, OracleSpec};
use otf_core::otf::{OtfEngine, OtfSettings};
use otf_core::sampler::{
    pretrain_map, run_chain, update_ensemble, ChainState, EnsembleState, ScheduleSpec,
    SghmcParams, UpdateOpts,
};
use otf_core::surrogate::{
    ArchitectureSpec, ParameterVector, PredictiveOutput, PriorSpec, Surrogate,
};
use otf_core::Result;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {tag} [{id:2}] {name}: {detail}");
    assert!(pass, "acceptance check {id} ({name}): {detail}");
}

#[test]
fn a01_threshold_probability_survives_quadrature_and_monte_carlo() {
    let t0 = Instant::now();
    let report = run_selftest(10_000_000, 0x5eed_0001).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();

    let max_quad_dev = report
        .cells
        .iter()
        .map(|c| (c.closed_form - c.quadrature).abs())
        .fold(0.0, f64::max);
    let max_mc_z = report
        .cells
        .iter()
        .map(|c| (c.closed_form - c.mc_estimate).abs() / c.mc_sd)
        .fold(0.0, f64::max);

    let pass = report.cells.len() >= 36
        && report.quadrature_failures == 0
        && report.mc_failures == 0
        && elapsed < 300.0;
    verdict(
        1,
        "threshold probability vs quadrature and 1e7-draw MC",
        pass,
        &format!(
            "{} cells, max |closed - quad| {max_quad_dev:.2e} (tol 1e-6), \
             max MC z {max_mc_z:.2} (tol 3), {elapsed:.0} s",
            report.cells.len()
        ),
    );
}

/// Independent quadrature oracle for the confluent-argument hypergeometric:
/// for X > 0, F(1/2, s; 3/2; -X) = X^{-1/2} * integral_0^sqrt(X) (1+u^2)^-s du.
/// Composite Simpson; the integrand is smooth, so 2e5 panels leave the
/// quadrature error orders below the 1e-10 gate.
fn hyp_integral_oracle(s: f64, x: f64) -> f64 {
    assert!(x < 0.0);
    let top = (-x).sqrt();
    let n = 200_000usize;
    let h = top / n as f64;
    let f = |u: f64| (1.0 + u * u).powf(-s);
    let mut acc = f(0.0) + f(top);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    acc * h / 3.0 / top
}

#[test]
fn a02_hypergeometric_matches_arctan_and_integral_oracle() {
    let mut max_atan_dev = 0.0f64;
    for k in 1..=100 {
        let z = k as f64 / 10.0;
        let got = hyp2f1_special(1.0, -z * z).unwrap();
        max_atan_dev = max_atan_dev.max((got - z.atan() / z).abs());
    }

    let mut max_int_dev = 0.0f64;
    for &s in &[0.5, 1.0, 1.5, 2.5, 5.0, 10.0, 20.0, 35.0, 50.0] {
        assert_eq!(hyp2f1_special(s, 0.0).unwrap(), 1.0);
        for &xx in &[0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0] {
            let got = hyp2f1_special(s, -xx).unwrap();
            max_int_dev = max_int_dev.max((got - hyp_integral_oracle(s, -xx)).abs());
        }
    }

    let pass = max_atan_dev <= 1e-10 && max_int_dev <= 1e-10;
    verdict(
        2,
        "hypergeometric vs arctan identity and integral oracle",
        pass,
        &format!("max |F - atan(z)/z| {max_atan_dev:.2e}, max |F - integral| {max_int_dev:.2e} (tol 1e-10)"),
    );
}

#[test]
fn a03_predictive_density_reaches_its_gaussian_limit() {
    let mut state = CalibrationState::new(3.0, 10.0).unwrap();
    for _ in 0..1_000_000 {
        state.observe(1.0, 1.0).unwrap();
    }
    assert_eq!(state.n(), 1_000_000);
    assert_eq!(state.m_n(), 1.0);

    let mut max_rel = 0.0f64;
    for &sigma_star in &[0.5, 2.0] {
        let norm = 1.0 / (sigma_star * (2.0 * std::f64::consts::PI).sqrt());
        for j in 0..=400 {
            let e = (j as f64 / 400.0 * 8.0 - 4.0) * sigma_star;
            let d = predictive_density(&state, sigma_star, e).unwrap();
            let gauss = norm * (-0.5 * (e / sigma_star).powi(2)).exp();
            max_rel = max_rel.max((d - gauss).abs() / gauss);
        }
    }

    let pass = max_rel <= 1e-3;
    verdict(
        3,
        "predictive density at n = 1e6, M_n = 1 vs N(0, sigma*^2)",
        pass,
        &format!("max relative deviation {max_rel:.2e} over |e| <= 4 sigma* (tol 1e-3)"),
    );
}

#[test]
fn a04_aggregation_equals_mixture_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_dev = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=8usize);
        let n_atoms = rng.gen_range(1..=4usize);
        let sigma_e: f64 = (rng.gen::<f64>() * 2.0 - 2.0).exp();
        let members: Vec<PredictiveOutput<f64>> = (0..k)
            .map(|_| PredictiveOutput {
                energy: rng.gen_range(-4.0..4.0),
                forces: (0..n_atoms)
                    .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
                    .collect(),
                sigma: (0..n_atoms).map(|_| (rng.gen_range(-1.0..1.0f64)).exp()).collect(),
            })
            .collect();
        let agg = aggregate(&members, sigma_e).unwrap();

        let kf = k as f64;
        let check = |got: f64, reference: f64, max_dev: &mut f64| {
            *max_dev = (*max_dev).max((got - reference).abs() / reference.abs().max(1.0));
        };

        // Uniform mixture of normals: first moment and central second moment.
        let m1 = members.iter().map(|m| m.energy).sum::<f64>() / kf;
        let m2 = members.iter().map(|m| m.energy * m.energy + sigma_e * sigma_e).sum::<f64>() / kf;
        check(agg.energy, m1, &mut max_dev);
        check(agg.sigma_energy * agg.sigma_energy, m2 - m1 * m1, &mut max_dev);

        for i in 0..n_atoms {
            for c in 0..3 {
                let m1 = members.iter().map(|m| m.forces[i][c]).sum::<f64>() / kf;
                let m2 = members
                    .iter()
                    .map(|m| m.forces[i][c] * m.forces[i][c] + m.sigma[i] * m.sigma[i])
                    .sum::<f64>()
                    / kf;
                check(agg.forces[i][c], m1, &mut max_dev);
                check(agg.force_sigmas[i][c] * agg.force_sigmas[i][c], m2 - m1 * m1, &mut max_dev);
            }
        }
    }

    let pass = max_dev <= 1e-12;
    verdict(
        4,
        "ensemble aggregation vs brute-force mixture moments",
        pass,
        &format!("max deviation {max_dev:.2e} over 1000 random instances (tol 1e-12)"),
    );
}

#[test]
fn a05_sghmc_recovers_an_anisotropic_gaussian() {
    let t0 = Instant::now();
    let mu = [1.5, -0.7];
    let var = [0.25, 0.01];
    let total = 100_000u64;
    let burn = 20_000u64;

    let mut detail = String::new();
    let mut pass = true;
    for seed in [501u64, 502, 503] {
        let mut chain =
            ChainState::new(ParameterVector::new(vec![mu[0] + 0.5, mu[1] - 0.1]), seed);
        let params = SghmcParams { friction: 1.0, ..SghmcParams::default() };
        let gamma = 0.06;
        let schedule = ScheduleSpec::ExpDecay { gamma0: gamma, gamma_end: gamma, horizon: 1 };

        let mut step = 0u64;
        let mut count = 0u64;
        let mut s1 = [0.0f64; 2];
        let mut s2 = [0.0f64; 2];
        run_chain(
            &mut chain,
            |theta: &ParameterVector<f64>, _rng: &mut ChaCha8Rng| {
                if step >= burn {
                    for i in 0..2 {
                        s1[i] += theta[i];
                        s2[i] += theta[i] * theta[i];
                    }
                    count += 1;
                }
                step += 1;
                Ok(vec![-(theta[0] - mu[0]) / var[0], -(theta[1] - mu[1]) / var[1]])
            },
            &schedule,
            total,
            burn,
            1.0,
            &params,
        )
        .unwrap();

        let nf = count as f64;
        for i in 0..2 {
            let mean = s1[i] / nf;
            let cov = s2[i] / nf - mean * mean;
            let mean_err = (mean - mu[i]).abs();
            let cov_rel = (cov / var[i] - 1.0).abs();
            pass &= mean_err <= 0.05 && cov_rel <= 0.15;
            detail.push_str(&format!("seed {seed} coord {i}: |dmean| {mean_err:.3}, |dcov|/cov {cov_rel:.3}; "));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    detail.push_str(&format!("{elapsed:.1} s"));
    verdict(5, "SGHMC moments on a 2D anisotropic Gaussian", pass, &detail);
}

/// Harmonic bond between two unit-mass atoms: E = k/2 (r - r0)^2.
fn harmonic_dimer_forces(
    k: f64,
    r0: f64,
) -> impl FnMut(&AtomicConfiguration<f64>) -> Result<Vec<[f64; 3]>> {
    move |config| {
        let p = config.positions();
        let d: [f64; 3] = std::array::from_fn(|c| p[0][c] - p[1][c]);
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let coeff = -k * (r - r0) / r;
        let f0: [f64; 3] = std::array::from_fn(|c| coeff * d[c]);
        Ok(vec![f0, [-f0[0], -f0[1], -f0[2]]])
    }
}

fn harmonic_dimer_energy(k: f64, r0: f64, config: &AtomicConfiguration<f64>) -> f64 {
    let p = config.positions();
    let d: [f64; 3] = std::array::from_fn(|c| p[0][c] - p[1][c]);
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    0.5 * k * (r - r0) * (r - r0)
}

#[test]
fn a06_integrators_conserve_and_equipartition() {
    let (k, r0) = (1.0, 1.3);
    let dt = 0.01;

    // Energy conservation without a thermostat.
    let config = AtomicConfiguration::new(
        vec![[0.7, 0.0, 0.0], [-0.7, 0.0, 0.0]],
        vec![0, 0],
        Dim::Three,
    )
    .unwrap();
    let velocities = vec![[0.3, 0.2, 0.0], [-0.3, -0.2, 0.1]];
    let mut force_fn = harmonic_dimer_forces(k, r0);
    let f0 = force_fn(&config).unwrap();
    let mut state = MdState::new(config, velocities, vec![1.0, 1.0], f0).unwrap();
    let e0 = state.kinetic_energy() + harmonic_dimer_energy(k, r0, &state.config);
    let mut max_drift = 0.0f64;
    for _ in 0..100_000 {
        velocity_verlet_step(&mut state, &mut force_fn, dt).unwrap();
        let e = state.kinetic_energy() + harmonic_dimer_energy(k, r0, &state.config);
        max_drift = max_drift.max((e - e0).abs());
    }
    let rel_drift = max_drift / e0.abs();

    // Equipartition under the thermostat.
    let temperature = 0.7;
    let friction = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = AtomicConfiguration::new(
        vec![[0.7, 0.0, 0.0], [-0.7, 0.0, 0.0]],
        vec![0, 0],
        Dim::Three,
    )
    .unwrap();
    let masses = vec![1.0, 1.0];
    let velocities =
        maxwell_boltzmann_velocities(&masses, temperature, Dim::Three, &mut rng).unwrap();
    let f0 = force_fn(&config).unwrap();
    let mut state = MdState::new(config, velocities, masses, f0).unwrap();
    let mut acc = 0.0f64;
    let mut count = 0u64;
    for step in 0..1_000_000u64 {
        langevin_step(&mut state, &mut force_fn, dt, friction, temperature, &mut rng).unwrap();
        if step >= 100_000 {
            acc += state.instantaneous_temperature();
            count += 1;
        }
    }
    let t_rel = (acc / count as f64 / temperature - 1.0).abs();

    let pass = rel_drift < 1e-4 && t_rel <= 0.03;
    verdict(
        6,
        "NVE energy drift and Langevin equipartition",
        pass,
        &format!("relative drift {rel_drift:.2e} over 1e5 steps (tol 1e-4), temperature off by {t_rel:.4} over 1e6 steps (tol 0.03)"),
    );
}

// Shared end-to-end runs: a gated double-well simulation per seed, graded
// below for intervention accuracy, rare-event clustering, and decay.

const RUN_STEPS: u64 = 50_000;
const RUN_K: f64 = 0.05;
const WELL_LOW: f64 = 1.25;
const WELL_HIGH: f64 = 1.75;

struct SeedRunStats {
    seed: u64,
    n_interventions: usize,
    n_exceed: usize,
    first_half: usize,
    second_half: usize,
    rmse_post: f64,
    n_events: usize,
    rate_ratio: f64,
    rate_p: f64,
    wall_seconds: f64,
}

fn dimer_config(r: f64) -> AtomicConfiguration<f64> {
    AtomicConfiguration::new(vec![[r, 0.0, 0.0], [0.0, 0.0, 0.0]], vec![0, 0], Dim::Three).unwrap()
}

fn bond_length(config: &AtomicConfiguration<f64>) -> f64 {
    let p = config.positions();
    let d: [f64; 3] = std::array::from_fn(|c| p[0][c] - p[1][c]);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn run_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        n_species: 1,
        n_basis: 18,
        cutoff: 2.5,
        trunk_widths: vec![10, 8],
        sigma_head_widths: vec![5],
    }
}

fn double_well_oracle() -> Oracle {
    Oracle::new(OracleSpec::DoubleWellDimer {
        barrier: 1.0,
        r_low: WELL_LOW,
        r_high: WELL_HIGH,
    })
    .unwrap()
}

/// Starting parameters fit to a short low-temperature trajectory confined
/// to the lower well, so the run begins competent near its initial basin
/// and ignorant of the barrier and the far well.
fn pretrained_start(surrogate: &Surrogate<f64>) -> ParameterVector<f64> {
    let oracle = double_well_oracle();
    let mut rng = ChaCha8Rng::seed_from_u64(0xd1e5);
    let masses = vec![1.0, 1.0];
    let config = dimer_config(WELL_LOW);
    let temperature = 0.18;
    let velocities =
        maxwell_boltzmann_velocities(&masses, temperature, Dim::Three, &mut rng).unwrap();
    let mut force_fn = |c: &AtomicConfiguration<f64>| oracle.evaluate::<f64>(c).map(|(_, f)| f);
    let f0 = force_fn(&config).unwrap();
    let mut md = MdState::new(config, velocities, masses, f0).unwrap();

    let mut dataset = Dataset::new();
    for step in 0..2200u64 {
        langevin_step(&mut md, &mut force_fn, 0.005, 1.0, temperature, &mut rng).unwrap();
        if step >= 400 && (step - 400) % 20 == 0 {
            let (e, f) = oracle.evaluate::<f64>(&md.config).unwrap();
            dataset
                .add(LabeledSample::new(md.config.clone(), e, f).unwrap(), step)
                .unwrap();
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(0x7e7a);
    pretrain_map(
        surrogate,
        surrogate.init_parameters(&mut init_rng),
        &dataset,
        &PriorSpec::MeanField,
        &ScheduleSpec::ExpDecay { gamma0: 1e-2, gamma_end: 1e-4, horizon: 6000 },
        6000,
        8,
        0xbeef,
        &SghmcParams::pretrain(),
    )
    .unwrap()
}

fn run_one(seed: u64, theta0: &ParameterVector<f64>) -> SeedRunStats {
    let t0 = Instant::now();
    let settings = OtfSettings {
        k_threshold: RUN_K,
        confidence: 0.95,
        ensemble_size: 8,
        steps_per_update: 300,
        batch_size: 4,
        gamma0: 2e-3,
        sigma_tl: Some(0.3),
        calibration_a: 3.0,
        calibration_b: 10.0,
        dt: 0.005,
        temperature: 0.28,
        md_friction: 0.5,
        max_steps: RUN_STEPS,
        seed,
        checkpoint_every: 0,
        sample_every: 0,
    };
    let surrogate = Surrogate::new(run_arch(), 0.1 * RUN_K).unwrap();
    let mut engine = OtfEngine::initialize(
        surrogate,
        double_well_oracle(),
        settings,
        SghmcParams::default(),
        theta0,
        dimer_config(WELL_LOW),
        vec![1.0, 1.0],
    )
    .unwrap();

    // Barrier crossings detected with hysteresis around the midpoint, so
    // in-well jitter cannot masquerade as an event.
    let midpoint = 0.5 * (WELL_LOW + WELL_HIGH);
    let (lo_gate, hi_gate) = (midpoint - 0.1, midpoint + 0.1);
    let mut side_high = false;
    let mut crossings: Vec<u64> = Vec::new();
    let warmup = RUN_STEPS / 5;
    let mut snapshots: Vec<AtomicConfiguration<f64>> = Vec::new();

    while engine.md().step < RUN_STEPS {
        engine.otf_step().unwrap();
        let step = engine.md().step;
        let r = bond_length(&engine.md().config);
        if side_high {
            if r <= lo_gate {
                side_high = false;
                crossings.push(step);
            }
        } else if r >= hi_gate {
            side_high = true;
            crossings.push(step);
        }
        if step >= warmup && step % 10 == 0 {
            snapshots.push(engine.md().config.clone());
        }
    }
    engine.check_invariants().unwrap();

    // Final-model accuracy on configurations resampled from the
    // post-warm-up trajectory.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let picks = rand::seq::index::sample(&mut rng, snapshots.len(), 150);
    let label_oracle = double_well_oracle();
    let thetas = engine.ensemble().thetas();
    let mut sq = 0.0f64;
    for idx in picks.iter() {
        let config = &snapshots[idx];
        let pred = ensemble_predict(engine.surrogate(), &thetas, config).unwrap();
        let (e, _) = label_oracle.evaluate::<f64>(config).unwrap();
        let label = engine.offset().shift(e).unwrap();
        sq += (pred.energy - label) * (pred.energy - label);
    }
    let rmse_post = (sq / 150.0).sqrt();

    let log = engine.log();
    let n_interventions = log.interventions.len();
    let n_exceed = log.interventions.iter().filter(|r| r.error.abs() > RUN_K).count();
    let half = RUN_STEPS / 2;
    let first_half = log.interventions.iter().filter(|r| r.step < half).count();
    let second_half = n_interventions - first_half;

    let rate = intervention_rate_over_steps(
        RUN_STEPS,
        &log.intervention_steps(),
        &crossings,
        150,
        &RateTestOpts { warmup_fraction: 0.2, n_permutations: 10_000, seed: seed ^ 0xabcd },
    )
    .unwrap();

    SeedRunStats {
        seed,
        n_interventions,
        n_exceed,
        first_half,
        second_half,
        rmse_post,
        n_events: crossings.len(),
        rate_ratio: rate.ratio,
        rate_p: rate.p_value,
        wall_seconds: t0.elapsed().as_secs_f64(),
    }
}

fn double_well_runs() -> &'static [SeedRunStats] {
    static RUNS: OnceLock<Vec<SeedRunStats>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let surrogate = Surrogate::new(run_arch(), 0.1 * RUN_K).unwrap();
        let theta0 = pretrained_start(&surrogate);
        [71u64, 72, 73].iter().map(|&s| run_one(s, &theta0)).collect()
    })
}

#[test]
fn a07_gated_runs_keep_interventions_accurate() {
    let runs = double_well_runs();
    let mut pass = true;
    let mut detail = String::new();
    let mut total_wall = 0.0;
    for r in runs {
        let frac = r.n_exceed as f64 / r.n_interventions as f64;
        pass &= r.n_interventions > 0 && frac <= 0.10 && r.rmse_post < RUN_K;
        total_wall += r.wall_seconds;
        detail.push_str(&format!(
            "seed {}: {}/{} interventions over threshold ({:.1}%), resampled RMSE {:.4}; ",
            r.seed,
            r.n_exceed,
            r.n_interventions,
            100.0 * frac,
            r.rmse_post
        ));
    }
    pass &= total_wall < 1800.0;
    detail.push_str(&format!("K {RUN_K}, total {total_wall:.0} s"));
    verdict(7, "intervention accuracy and post-warm-up RMSE", pass, &detail);
}

#[test]
fn a08_interventions_cluster_at_barrier_crossings() {
    let runs = double_well_runs();
    let mut good = 0;
    let mut detail = String::new();
    for r in runs {
        if r.rate_ratio >= 2.0 && r.rate_p < 0.05 {
            good += 1;
        }
        detail.push_str(&format!(
            "seed {}: {} crossings, rate ratio {:.2}, p {:.4}; ",
            r.seed, r.n_events, r.rate_ratio, r.rate_p
        ));
    }
    detail.push_str(&format!("{good}/3 seeds pass (need 2)"));
    verdict(8, "intervention rate doubles near barrier crossings", good >= 2, &detail);
}

#[test]
fn a10_interventions_decay_over_the_run() {
    let runs = double_well_runs();
    let mut pass = true;
    let mut detail = String::new();
    for r in runs {
        pass &= r.second_half < r.first_half;
        detail.push_str(&format!(
            "seed {}: {} then {} interventions; ",
            r.seed, r.first_half, r.second_half
        ));
    }
    verdict(10, "second-half intervention count drops", pass, &detail);
}

// Transfer-prior data efficiency on a Lennard-Jones cluster.

fn lj_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        n_species: 1,
        n_basis: 16,
        cutoff: 2.5,
        trunk_widths: vec![16, 12],
        sigma_head_widths: vec![6],
    }
}

/// Five atoms in a compact trigonal-bipyramid-like start.
fn lj_start() -> AtomicConfiguration<f64> {
    AtomicConfiguration::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.12, 0.0, 0.0],
            [0.56, 0.97, 0.0],
            [0.56, 0.32, 0.91],
            [0.56, 0.32, -0.91],
        ],
        vec![0; 5],
        Dim::Three,
    )
    .unwrap()
}

/// Decorrelated thermal configurations from a trajectory on `oracle`,
/// labeled by the same oracle.
fn sampled_dataset(oracle: &Oracle, n_samples: usize, every: u64, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masses = vec![1.0; 5];
    let temperature = 0.15;
    let config = lj_start();
    let velocities =
        maxwell_boltzmann_velocities(&masses, temperature, Dim::Three, &mut rng).unwrap();
    let mut force_fn = |c: &AtomicConfiguration<f64>| oracle.evaluate::<f64>(c).map(|(_, f)| f);
    let f0 = force_fn(&config).unwrap();
    let mut md = MdState::new(config, velocities, masses, f0).unwrap();

    let burn = 500u64;
    let mut dataset = Dataset::new();
    let mut step = 0u64;
    while dataset.len() < n_samples {
        langevin_step(&mut md, &mut force_fn, 0.004, 1.0, temperature, &mut rng).unwrap();
        step += 1;
        if step >= burn && (step - burn) % every == 0 {
            let (e, f) = oracle.evaluate::<f64>(&md.config).unwrap();
            dataset
                .add(LabeledSample::new(md.config.clone(), e, f).unwrap(), step)
                .unwrap();
        }
    }
    dataset
}

fn head(pool: &Dataset<f64>, n: usize) -> Dataset<f64> {
    let mut out = Dataset::new();
    for (i, s) in pool.samples().iter().take(n).enumerate() {
        out.add(s.clone(), i as u64).unwrap();
    }
    out
}

/// One arm of the comparison: MAP fit under the arm's prior from the
/// arm's start, then a posterior ensemble around the MAP point, scored by
/// energy RMSE on the held-out set. Both arms run exactly this recipe;
/// they differ only in the starting parameters and the prior.
fn two_stage_rmse(
    surrogate: &Surrogate<f64>,
    start: &ParameterVector<f64>,
    prior: &PriorSpec<f64>,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    seed: u64,
) -> f64 {
    let map = pretrain_map(
        surrogate,
        start.clone(),
        train,
        prior,
        &ScheduleSpec::ExpDecay { gamma0: 2e-2, gamma_end: 1e-4, horizon: 8000 },
        8000,
        8,
        seed,
        &SghmcParams::pretrain(),
    )
    .unwrap();
    let mut ens = EnsembleState::from_center(&map, 4, seed ^ 0xff).unwrap();
    update_ensemble(
        &mut ens,
        surrogate,
        train,
        prior,
        &ScheduleSpec::OtfDecay { gamma0: 5e-3, steps_per_update: 4000 },
        &UpdateOpts { n_steps: 4000, batch_size: 4, temperature: 1.0, adapt_mass: true },
        &SghmcParams::default(),
    )
    .unwrap();
    let thetas = ens.thetas();
    let mut sq = 0.0;
    for s in test.samples() {
        let pred = ensemble_predict(surrogate, &thetas, &s.config).unwrap();
        sq += (pred.energy - s.energy) * (pred.energy - s.energy);
    }
    (sq / test.len() as f64).sqrt()
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

#[test]
fn a09_transfer_prior_halves_the_data_budget() {
    let unbiased = Oracle::new(OracleSpec::LjCluster { epsilon: 1.0, sigma: 1.0 }).unwrap();
    let biased =
        Oracle::new(OracleSpec::LjClusterBiased { epsilon: 1.0, sigma: 1.0, bias: 1.04 }).unwrap();
    let surrogate = Surrogate::new(lj_arch(), 0.02).unwrap();

    // Starting parameters fit to the biased surface only.
    let pretrain_data = sampled_dataset(&biased, 120, 100, 0x91);
    let mut init_rng = ChaCha8Rng::seed_from_u64(0x92);
    let theta0 = pretrain_map(
        &surrogate,
        surrogate.init_parameters(&mut init_rng),
        &pretrain_data,
        &PriorSpec::MeanField,
        &ScheduleSpec::ExpDecay { gamma0: 2e-2, gamma_end: 1e-4, horizon: 10000 },
        10000,
        8,
        0x93,
        &SghmcParams::pretrain(),
    )
    .unwrap();

    let pool = sampled_dataset(&unbiased, 64, 150, 0x94);
    let test = sampled_dataset(&unbiased, 150, 100, 0x95);

    let sizes = [4usize, 8, 16, 32, 64];
    let transfer_prior = PriorSpec::Transfer { center: theta0.clone(), sigma_tl: 0.5 };
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(0x96);
    let scratch0 = surrogate.init_parameters(&mut scratch_rng);

    // Median of three refits per point keeps single-fit luck out of the
    // curve comparison.
    let mut rmse_transfer = Vec::new();
    let mut rmse_scratch = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        let train = head(&pool, s);
        let reps = |start: &ParameterVector<f64>, prior: &PriorSpec<f64>, base: u64| {
            median3(std::array::from_fn(|k| {
                two_stage_rmse(&surrogate, start, prior, &train, &test, base + 7 * k as u64)
            }))
        };
        rmse_transfer.push(reps(&theta0, &transfer_prior, 0xa0 + i as u64));
        rmse_scratch.push(reps(&scratch0, &PriorSpec::MeanField, 0xb0 + i as u64));
    }

    // Count curve points where the half-budget transfer fit already
    // matches the scratch fit.
    let mut wins = 0;
    for i in 0..sizes.len() - 1 {
        if rmse_transfer[i] <= rmse_scratch[i + 1] {
            wins += 1;
        }
    }
    let detail = format!(
        "sizes {:?}: transfer RMSE {:?}, scratch RMSE {:?}, {}/4 half-budget points (need 3)",
        sizes,
        rmse_transfer.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        rmse_scratch.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        wins
    );
    verdict(9, "transfer prior reaches scratch RMSE at half the data", wins >= 3, &detail);
}

#[test]
fn a11_metric_oracles_agree_exactly() {
    // AUC against brute-force pairwise counting, bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut auc_exact = true;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=40usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.25).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;

        let pos = labels.iter().filter(|&&l| l).count() as u64;
        let neg = n as u64 - pos;
        let mut num = 0u64; // concordant pairs doubled, ties once
        for (sp, &lp) in scores.iter().zip(&labels) {
            if !lp {
                continue;
            }
            for (sn, &ln) in scores.iter().zip(&labels) {
                if ln {
                    continue;
                }
                num += match sp.partial_cmp(sn).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let brute = num as f64 / (2 * pos * neg) as f64;
        auc_exact &= auc_roc(&scores, &labels).unwrap() == brute;
    }

    // Binned mean-log-likelihood contributions sum to the total.
    let n = 64;
    let means: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let sigmas: Vec<f64> = (0..n).map(|_| (rng.gen_range(-1.0..1.0f64)).exp()).collect();
    let truths: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let max_err = means
        .iter()
        .zip(&truths)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0, f64::max);
    let edges = [0.0, 0.3, 0.8, 1.6, max_err * (1.0 + 1e-9) + 1e-12];
    let contributions = mll_error_decomposition(&means, &sigmas, &truths, &edges).unwrap();
    let total: f64 = means
        .iter()
        .zip(&sigmas)
        .zip(&truths)
        .map(|((m, s), t)| predictive_log_likelihood(*m, s * s, *t).unwrap())
        .sum::<f64>()
        / n as f64;
    let mll_gap = (contributions.iter().sum::<f64>() - total).abs();

    // Recalibration factor on its closed-form cases.
    let xi_one = recalibration_factor(&[0.3, -0.5, 0.2], &[0.3, 0.5, 0.2]).unwrap();
    let xi_root2 = recalibration_factor(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
    let xi_exact = xi_one == 1.0 && xi_root2 == 2.0f64.sqrt();

    let pass = auc_exact && mll_gap <= 1e-12 && xi_exact;
    verdict(
        11,
        "metric oracles: AUC exact, MLL parts sum, recalibration closed forms",
        pass,
        &format!("AUC exact {auc_exact}, |sum - total MLL| {mll_gap:.1e}, xi cases exact {xi_exact}"),
    );
}

#[test]
#[ignore]
fn zdiag_exceedance_structure() {
    for seed in [71u64, 72, 73] {
        zdiag_one(seed);
    }
}

fn zdiag_one(seed: u64) {
    let settings = OtfSettings {
        k_threshold: RUN_K,
        confidence: 0.95,
        ensemble_size: 8,
        steps_per_update: 6000,
        batch_size: 8,
        gamma0: 5e-3,
        sigma_tl: Some(0.5),
        calibration_a: 2.0,
        calibration_b: 80.0,
        dt: 0.004,
        temperature: 0.28,
        md_friction: 0.5,
        max_steps: RUN_STEPS,
        seed,
        checkpoint_every: 0,
        sample_every: 0,
    };
    let surrogate = Surrogate::new(run_arch(), 0.1 * RUN_K).unwrap();
    let theta0 = {
        let oracle = double_well_oracle();
        let mut rng = ChaCha8Rng::seed_from_u64(0xd1e5);
        let masses = vec![1.0, 1.0];
        let config = dimer_config(WELL_LOW);
        let velocities =
            maxwell_boltzmann_velocities(&masses, 0.28, Dim::Three, &mut rng).unwrap();
        let mut force_fn =
            |c: &AtomicConfiguration<f64>| oracle.evaluate::<f64>(c).map(|(_, f)| f);
        let f0 = force_fn(&config).unwrap();
        let mut md = MdState::new(config, velocities, masses, f0).unwrap();
        let mut data = Dataset::new();
        for step in 0..4000u64 {
            langevin_step(&mut md, &mut force_fn, 0.005, 1.0, 0.28, &mut rng).unwrap();
            if step >= 400 && step % 20 == 0 {
                let (e, f) = oracle.evaluate::<f64>(&md.config).unwrap();
                data.add(LabeledSample::new(md.config.clone(), e, f).unwrap(), step).unwrap();
            }
        }
        println!("pretrain samples {}", data.len());
        let mut init_rng = ChaCha8Rng::seed_from_u64(0x7e7a);
        pretrain_map(
            &surrogate,
            surrogate.init_parameters(&mut init_rng),
            &data,
            &PriorSpec::MeanField,
            &ScheduleSpec::ExpDecay { gamma0: 1e-2, gamma_end: 1e-4, horizon: 16000 },
            16000,
            8,
            0xbeef,
            &SghmcParams::pretrain(),
        )
        .unwrap()
    };
    let mut engine = OtfEngine::initialize(
        surrogate,
        double_well_oracle(),
        settings,
        SghmcParams::default(),
        &theta0,
        dimer_config(WELL_LOW),
        vec![1.0, 1.0],
    )
    .unwrap();
    while engine.md().step < RUN_STEPS {
        engine.otf_step().unwrap();
    }
    let log = engine.log();
    let n = log.interventions.len();
    println!("=== seed {seed}: total interventions {n}");
    for d in 0..10 {
        let lo = RUN_STEPS / 10 * d;
        let hi = RUN_STEPS / 10 * (d + 1);
        let recs: Vec<_> =
            log.interventions.iter().filter(|r| r.step >= lo && r.step < hi).collect();
        let exc = recs.iter().filter(|r| r.error.abs() > RUN_K).count();
        let max_e = recs.iter().map(|r| r.error.abs()).fold(0.0f64, f64::max);
        println!(
            "steps {:>6}-{:>6}: {:>5} interventions, {:>4} exceed, max|e| {:.4}",
            lo, hi, recs.len(), exc, max_e
        );
    }
    // chains: consecutive-step interventions
    let steps: Vec<u64> = log.interventions.iter().map(|r| r.step).collect();
    let mut chained = 0usize;
    for w in steps.windows(2) {
        if w[1] == w[0] + 1 {
            chained += 1;
        }
    }
    println!("interventions immediately following another: {chained}");
    // exceedance magnitude histogram
    let mut worst: Vec<(u64, f64, f64, f64)> = log
        .interventions
        .iter()
        .filter(|r| r.error.abs() > RUN_K)
        .map(|r| (r.step, r.error.abs(), r.sigma_pred, r.prob_within))
        .collect();
    worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("top exceedances (step, |e|, sigma_pred, prob):");
    for row in worst.iter().take(6) {
        println!("  {:>6} |e|={:.4} sigma={:.4} prob={:.3}", row.0, row.1, row.2, row.3);
    }
    let small = worst.iter().filter(|r| r.1 < 2.0 * RUN_K).count();
    println!("exceedances under 2K: {small} of {}", worst.len());
}
