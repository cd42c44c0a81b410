//! Run configuration: one TOML file describes the oracle, the surrogate,
//! the sampler, the gate, the MD loop, and the optional pretraining /
//! evaluation / analysis inputs. Every command receives the same file and
//! persists a resolved snapshot next to its outputs.
//!
//! Relative paths inside the file are resolved against the directory the
//! file lives in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use otf_core::data::{AtomicConfiguration, Dim};
use otf_core::oracle::OracleSpec;
use otf_core::otf::OtfSettings;
use otf_core::sampler::SghmcParams;
use otf_core::surrogate::ArchitectureSpec;
use otf_core::{Error, Result};

/// Name of the resolved snapshot written into every output directory.
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    pub gate: GateSection,
    #[serde(default)]
    pub md: MdSection,
    pub init: InitSection,
    #[serde(default)]
    pub logging: LoggingSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeSection>,
    /// Directory of the source file; anchor for relative paths.
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Pretrained starting parameters; required by `run-otf`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta0: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub n_species: usize,
    pub n_basis: usize,
    pub cutoff: f64,
    pub trunk_widths: Vec<usize>,
    pub sigma_head_widths: Vec<usize>,
    /// Fixed energy noise scale; defaults to a tenth of the gate threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_energy: Option<f64>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let arch = ArchitectureSpec::default();
        Self {
            n_species: arch.n_species,
            n_basis: arch.n_basis,
            cutoff: arch.cutoff,
            trunk_widths: arch.trunk_widths,
            sigma_head_widths: arch.sigma_head_widths,
            sigma_energy: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    /// Width of the Gaussian prior around the pretrained parameters;
    /// omitted means a unit mean-field prior at the origin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_tl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub ensemble_size: usize,
    pub steps_per_update: u64,
    pub batch_size: usize,
    pub gamma0: f64,
    pub friction: f64,
    pub beta2: f64,
    pub eps_mass: f64,
    pub noise_scale: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let p = SghmcParams::<f64>::default();
        Self {
            ensemble_size: 8,
            steps_per_update: 2000,
            batch_size: 5,
            gamma0: 1e-3,
            friction: p.friction,
            beta2: p.beta2,
            eps_mass: p.eps_mass,
            noise_scale: p.noise_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub a: f64,
    pub b: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { a: 3.0, b: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    /// Accuracy threshold on the energy error.
    pub threshold: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdSection {
    pub dt: f64,
    pub temperature: f64,
    pub friction: f64,
}

impl Default for MdSection {
    fn default() -> Self {
        Self { dt: 1e-3, temperature: 0.0, friction: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub positions: Vec<[f64; 3]>,
    pub species: Vec<u32>,
    /// 2 or 3 active axes.
    #[serde(default = "default_dim")]
    pub dim: u8,
    /// Defaults to unit mass per atom.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
}

fn default_dim() -> u8 {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoggingSection {
    /// Checkpoint cadence in MD steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Trajectory row cadence in MD steps; 0 disables trajectory output.
    pub sample_every: u64,
}

impl Default for LoggingSection {
    fn default() -> Self {
        Self { checkpoint_every: 0, sample_every: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Labeled samples to train on; generated when absent and a
    /// `[pretrain.generate]` table is present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Reference surface for dataset generation; defaults to the run
    /// oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(default = "default_pretrain_steps")]
    pub n_steps: u64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_gamma0")]
    pub gamma0: f64,
    #[serde(default = "default_pretrain_gamma_end")]
    pub gamma_end: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Reject the pretrained model when its held-out energy RMSE exceeds
    /// this; omitted disables the gate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_validation_rmse: Option<f64>,
    /// Defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_pretrain_steps() -> u64 {
    6000
}
fn default_pretrain_batch() -> usize {
    8
}
fn default_pretrain_gamma0() -> f64 {
    1e-2
}
fn default_pretrain_gamma_end() -> f64 {
    1e-4
}
fn default_validation_fraction() -> f64 {
    0.2
}

/// How to produce the pretraining dataset: reference-oracle MD sampled at
/// a fixed cadence after a burn-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub n_samples: usize,
    /// MD steps between stored samples.
    pub every: u64,
    pub burn_in: u64,
    /// Defaults to the run temperature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Defaults to the run time step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub friction: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n_samples: 200, every: 20, burn_in: 500, temperature: None, dt: None, friction: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Completed run directory holding the ensemble checkpoint.
    pub run_dir: PathBuf,
    /// Labeled samples (same gauge as the run's training labels).
    pub dataset: PathBuf,
    #[serde(default = "default_sigma_f")]
    pub sigma_f: f64,
    /// Error-magnitude bin edges for the log-likelihood breakdown;
    /// defaults to a threshold-scaled grid covering all errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Completed run directory holding the step and intervention logs.
    pub run_dir: PathBuf,
    /// Event step-window half-width. The default is sized to the
    /// barrier-crossing correlation time of the bundled double-well toy,
    /// not derived from any reference; override it per system.
    #[serde(default = "default_half_width")]
    pub half_width: u64,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_permutations")]
    pub n_permutations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma_f")]
    pub sigma_f: f64,
    /// Explicit event steps; when absent, barrier crossings are detected
    /// from the trajectory (double-well oracle only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<u64>>,
}

fn default_sigma_f() -> f64 {
    200.0
}
fn default_half_width() -> u64 {
    150
}
fn default_warmup_fraction() -> f64 {
    0.2
}
fn default_permutations() -> u64 {
    10_000
}

impl RunConfig {
    /// Parse `path`, apply the seed override, and validate.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        config.base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        if let Some(seed) = seed_override {
            config.run.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        // Constructing the surrogate validates the architecture.
        otf_core::surrogate::Surrogate::<f64>::new(self.architecture(), self.sigma_energy())?;
        self.otf_settings().validate()?;
        let config = self.initial_configuration()?;
        let n = config.n_atoms();
        if let Some(masses) = &self.init.masses {
            if masses.len() != n {
                return Err(Error::Config(format!(
                    "{} masses for {n} atoms",
                    masses.len()
                )));
            }
            if masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
                return Err(Error::Config("masses must be positive and finite".into()));
            }
        }
        if self.init.species.iter().any(|&s| s as usize >= self.surrogate.n_species) {
            return Err(Error::Config(format!(
                "species ids must be below n_species = {}",
                self.surrogate.n_species
            )));
        }
        if let Some(pre) = &self.pretrain {
            if !(pre.validation_fraction > 0.0 && pre.validation_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "validation fraction must lie in (0, 1), got {}",
                    pre.validation_fraction
                )));
            }
            if let Some(gate) = pre.max_validation_rmse {
                if !(gate > 0.0) || !gate.is_finite() {
                    return Err(Error::Config(format!(
                        "validation gate must be positive and finite, got {gate}"
                    )));
                }
            }
            if !(pre.gamma0 > 0.0 && pre.gamma_end > 0.0 && pre.gamma_end <= pre.gamma0) {
                return Err(Error::Config(
                    "pretraining step sizes need 0 < gamma_end <= gamma0".into(),
                ));
            }
            if pre.n_steps == 0 || pre.batch_size == 0 {
                return Err(Error::Config(
                    "pretraining needs n_steps > 0 and batch_size > 0".into(),
                ));
            }
            if let Some(oracle) = &pre.oracle {
                oracle.validate()?;
            }
            if let Some(gen) = &pre.generate {
                if gen.n_samples < 2 {
                    return Err(Error::Config(
                        "dataset generation needs at least two samples".into(),
                    ));
                }
                if gen.every == 0 {
                    return Err(Error::Config("sample cadence must be positive".into()));
                }
                if let Some(t) = gen.temperature {
                    if !(t >= 0.0) {
                        return Err(Error::Config(format!(
                            "generation temperature must be >= 0, got {t}"
                        )));
                    }
                }
                if let Some(dt) = gen.dt {
                    if !(dt > 0.0) {
                        return Err(Error::Config(format!(
                            "generation time step must be > 0, got {dt}"
                        )));
                    }
                }
                if !(gen.friction >= 0.0) {
                    return Err(Error::Config(format!(
                        "generation friction must be >= 0, got {}",
                        gen.friction
                    )));
                }
            }
        }
        if let Some(ev) = &self.evaluate {
            if !(ev.sigma_f > 0.0) || !ev.sigma_f.is_finite() {
                return Err(Error::Config(format!(
                    "curve filter width must be positive, got {}",
                    ev.sigma_f
                )));
            }
            if let Some(bins) = &ev.bins {
                if bins.len() < 2 || bins.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config(
                        "bins need at least two strictly increasing edges".into(),
                    ));
                }
            }
        }
        if let Some(an) = &self.analyze {
            if !(0.0..1.0).contains(&an.warmup_fraction) {
                return Err(Error::Config(format!(
                    "warm-up fraction must lie in [0, 1), got {}",
                    an.warmup_fraction
                )));
            }
            if an.n_permutations == 0 {
                return Err(Error::Config("need at least one permutation".into()));
            }
            if !(an.sigma_f > 0.0) || !an.sigma_f.is_finite() {
                return Err(Error::Config(format!(
                    "curve filter width must be positive, got {}",
                    an.sigma_f
                )));
            }
        }
        Ok(())
    }

    /// Resolve a config-relative path.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            n_species: self.surrogate.n_species,
            n_basis: self.surrogate.n_basis,
            cutoff: self.surrogate.cutoff,
            trunk_widths: self.surrogate.trunk_widths.clone(),
            sigma_head_widths: self.surrogate.sigma_head_widths.clone(),
        }
    }

    pub fn sigma_energy(&self) -> f64 {
        self.surrogate.sigma_energy.unwrap_or(0.1 * self.gate.threshold)
    }

    pub fn otf_settings(&self) -> OtfSettings {
        OtfSettings {
            k_threshold: self.gate.threshold,
            confidence: self.gate.confidence,
            ensemble_size: self.sampler.ensemble_size,
            steps_per_update: self.sampler.steps_per_update,
            batch_size: self.sampler.batch_size,
            gamma0: self.sampler.gamma0,
            sigma_tl: self.prior.sigma_tl,
            calibration_a: self.calibration.a,
            calibration_b: self.calibration.b,
            dt: self.md.dt,
            temperature: self.md.temperature,
            md_friction: self.md.friction,
            max_steps: self.run.max_steps,
            seed: self.run.seed,
            checkpoint_every: self.logging.checkpoint_every,
            sample_every: self.logging.sample_every,
        }
    }

    pub fn sghmc_params(&self) -> SghmcParams<f64> {
        SghmcParams {
            friction: self.sampler.friction,
            beta2: self.sampler.beta2,
            eps_mass: self.sampler.eps_mass,
            noise_scale: self.sampler.noise_scale,
        }
    }

    pub fn dim(&self) -> Result<Dim> {
        match self.init.dim {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            d => Err(Error::Config(format!("dim must be 2 or 3, got {d}"))),
        }
    }

    pub fn initial_configuration(&self) -> Result<AtomicConfiguration<f64>> {
        AtomicConfiguration::new(
            self.init.positions.clone(),
            self.init.species.clone(),
            self.dim()?,
        )
    }

    pub fn masses(&self) -> Vec<f64> {
        self.init
            .masses
            .clone()
            .unwrap_or_else(|| vec![1.0; self.init.positions.len()])
    }

    /// Persist the resolved configuration into `dir` for auditability.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Serialization(format!("config snapshot: {e}")))?;
        fs::write(dir.join(CONFIG_SNAPSHOT), text)?;
        Ok(())
    }
}
