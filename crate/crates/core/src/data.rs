//! Domain types, the growing training dataset, energy-offset bookkeeping,
//! and priority-weighted minibatch drawing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Spatial dimensionality of a system. Two-dimensional systems store a
/// zero third coordinate; integrators and velocity initialization leave
/// the inactive axis untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    #[inline]
    pub fn n_axes(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }
}

/// Positions and species of a non-periodic system; the input to both the
/// surrogate model and the reference oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicConfiguration<T> {
    positions: Vec<[T; 3]>,
    species: Vec<u32>,
    dim: Dim,
}

impl<T: Real> AtomicConfiguration<T> {
    pub fn new(positions: Vec<[T; 3]>, species: Vec<u32>, dim: Dim) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("configuration needs at least one atom".into()));
        }
        if positions.len() != species.len() {
            return Err(Error::Config(format!(
                "positions ({}) and species ({}) lengths differ",
                positions.len(),
                species.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Config(format!("non-finite coordinate on atom {i}")));
            }
            if dim == Dim::Two && p[2] != T::zero() {
                return Err(Error::Config(format!(
                    "2D configuration has nonzero z on atom {i}"
                )));
            }
        }
        Ok(Self { positions, species, dim })
    }

    #[inline]
    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn positions(&self) -> &[[T; 3]] {
        &self.positions
    }

    #[inline]
    pub fn species(&self) -> &[u32] {
        &self.species
    }

    #[inline]
    pub fn dim(&self) -> Dim {
        self.dim
    }

    /// Displace every atom in place; inactive axes must stay untouched by
    /// the caller. Finiteness is re-checked so integrators fail fast.
    pub fn set_positions(&mut self, positions: Vec<[T; 3]>) -> Result<()> {
        if positions.len() != self.positions.len() {
            return Err(Error::Config("atom count changed".into()));
        }
        for p in &positions {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Numeric("non-finite coordinate after move".into()));
            }
        }
        self.positions = positions;
        Ok(())
    }
}

/// Configuration plus its offset-adjusted energy label and force labels.
#[derive(Debug, Clone)]
pub struct LabeledSample<T> {
    pub config: AtomicConfiguration<T>,
    /// Energy label, already offset-adjusted.
    pub energy: T,
    pub forces: Vec<[T; 3]>,
}

impl<T: Real> LabeledSample<T> {
    pub fn new(config: AtomicConfiguration<T>, energy: T, forces: Vec<[T; 3]>) -> Result<Self> {
        if forces.len() != config.n_atoms() {
            return Err(Error::Config(format!(
                "forces length {} does not match atom count {}",
                forces.len(),
                config.n_atoms()
            )));
        }
        if !energy.is_finite() || forces.iter().any(|f| !f.iter().all(|c| c.is_finite())) {
            return Err(Error::Config("non-finite label".into()));
        }
        Ok(Self { config, energy, forces })
    }
}

/// Additive constant aligning oracle energies with the pretrained model's
/// energy gauge. Set exactly once per run, from the initial structure; all
/// stored labels are oracle energy plus this value.
#[derive(Debug, Clone, Default)]
pub struct EnergyOffset<T> {
    value: Option<T>,
}

impl<T: Real> EnergyOffset<T> {
    pub fn new() -> Self {
        Self { value: None }
    }

    /// Fix the offset from the initial structure so that the stored label
    /// there equals the pretrained prediction (initial residual zero).
    /// Returns the offset value. Fails on a second call.
    pub fn freeze(&mut self, pretrained_energy: T, oracle_energy: T) -> Result<T> {
        if self.value.is_some() {
            return Err(Error::Config("energy offset already frozen".into()));
        }
        if !pretrained_energy.is_finite() || !oracle_energy.is_finite() {
            return Err(Error::Config("non-finite energy in offset computation".into()));
        }
        let v = pretrained_energy - oracle_energy;
        self.value = Some(v);
        Ok(v)
    }

    #[inline]
    pub fn is_frozen(&self) -> bool {
        self.value.is_some()
    }

    #[inline]
    pub fn value(&self) -> Option<T> {
        self.value
    }

    /// Oracle energy -> stored label.
    pub fn shift(&self, oracle_energy: T) -> Result<T> {
        match self.value {
            Some(v) => Ok(oracle_energy + v),
            None => Err(Error::Config("energy offset not frozen yet".into())),
        }
    }

    /// Stored label -> raw oracle energy.
    pub fn unshift(&self, stored_energy: T) -> Result<T> {
        match self.value {
            Some(v) => Ok(stored_energy - v),
            None => Err(Error::Config("energy offset not frozen yet".into())),
        }
    }

    /// Restore a previously frozen offset (checkpoint loading).
    pub fn restore(value: Option<T>) -> Self {
        Self { value }
    }
}

/// Indices drawn for one stochastic-gradient step, with the importance
/// weights that keep the weighted estimator unbiased.
#[derive(Debug, Clone)]
pub struct WeightedBatch<T> {
    items: Vec<(usize, T)>,
}

impl<T: Real> WeightedBatch<T> {
    /// Batch with no members; gradient estimators must reject it.
    pub fn empty() -> Self {
        Self { items: Vec::new() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.items.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    #[inline]
    pub fn iter(&self) -> impl Iterator<Item = &(usize, T)> {
        self.items.iter()
    }
}

/// Draw `batch_size` indices i.i.d. with replacement from `0..n`.
///
/// With `recent = Some(r)` and `n > batch_size`, index `r` is drawn with
/// probability `1/batch_size` (so it lands in each batch once on average)
/// and the remaining mass is shared uniformly by the others; each drawn
/// index carries the weight `(1/n)/q_i` that makes
/// `(n/batch_size) * Σ_batch w_i g_i` unbiased for `Σ_full g_i`.
/// With `recent = None` or `n <= batch_size` the draw is uniform with unit
/// weights (the priority construction is vacuous there).
pub fn draw_minibatch<T: Real, R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    recent: Option<usize>,
    rng: &mut R,
) -> Result<WeightedBatch<T>> {
    if n == 0 {
        return Err(Error::Config("cannot draw from an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(r) = recent {
        if r >= n {
            return Err(Error::Config(format!("recent index {r} out of range 0..{n}")));
        }
    }

    // batch_size == 1 would give the recent sample the whole probability
    // mass, starving every other index and breaking unbiasedness; fall
    // back to uniform there as well.
    let uniform = recent.is_none() || n <= batch_size || batch_size == 1;
    let mut items = Vec::with_capacity(batch_size);
    if uniform {
        for _ in 0..batch_size {
            items.push((rng.gen_range(0..n), T::one()));
        }
        return Ok(WeightedBatch { items });
    }

    let r = recent.unwrap();
    let q_new = 1.0 / batch_size as f64;
    let q_other = (1.0 - q_new) / (n - 1) as f64;
    let w_new = T::from_f64((1.0 / n as f64) / q_new);
    let w_other = T::from_f64((1.0 / n as f64) / q_other);
    for _ in 0..batch_size {
        if rng.gen::<f64>() < q_new {
            items.push((r, w_new));
        } else {
            // Uniform over the n-1 indices that are not `r`.
            let mut idx = rng.gen_range(0..n - 1);
            if idx >= r {
                idx += 1;
            }
            items.push((idx, w_other));
        }
    }
    Ok(WeightedBatch { items })
}

/// Append-only training set. Indices are stable for the whole run; the
/// most recently inserted sample is the priority-sampling target.
#[derive(Debug, Default)]
pub struct Dataset<T> {
    samples: Vec<LabeledSample<T>>,
    /// MD step at which each sample was inserted (provenance).
    steps: Vec<u64>,
}

impl<T: Real> Dataset<T> {
    pub fn new() -> Self {
        Self { samples: Vec::new(), steps: Vec::new() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Append a sample; returns its index. Labels must already be
    /// offset-adjusted.
    pub fn add(&mut self, sample: LabeledSample<T>, step: u64) -> Result<usize> {
        if !sample.energy.is_finite()
            || sample.forces.iter().any(|f| !f.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Config("non-finite sample rejected".into()));
        }
        self.samples.push(sample);
        self.steps.push(step);
        Ok(self.samples.len() - 1)
    }

    #[inline]
    pub fn get(&self, i: usize) -> &LabeledSample<T> {
        &self.samples[i]
    }

    #[inline]
    pub fn samples(&self) -> &[LabeledSample<T>] {
        &self.samples
    }

    #[inline]
    pub fn insertion_step(&self, i: usize) -> u64 {
        self.steps[i]
    }

    /// Index of the most recently added sample.
    #[inline]
    pub fn recent_index(&self) -> Option<usize> {
        self.samples.len().checked_sub(1)
    }

    /// Priority-weighted draw targeting the newest sample.
    pub fn draw_minibatch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<WeightedBatch<T>> {
        draw_minibatch(self.len(), batch_size, self.recent_index(), rng)
    }

    /// Uniform draw with unit weights; pretraining has no sample worth
    /// prioritizing.
    pub fn draw_uniform_minibatch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<WeightedBatch<T>> {
        draw_minibatch(self.len(), batch_size, None, rng)
    }

    /// Write one structured record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (sample, &step) in self.samples.iter().zip(&self.steps) {
            let rec = SampleRecord::from_sample(sample, step);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Self::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Serialization(format!("line {}: {e}", lineno + 1))
            })?;
            let (sample, step) = rec.into_sample()?;
            out.add(sample, step)?;
        }
        Ok(out)
    }
}

/// On-disk form of one sample: species, flattened positions, energy,
/// flattened forces, insertion step. Values are stored as `f64`, which
/// both supported scalars round-trip exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub species: Vec<u32>,
    pub positions: Vec<f64>,
    pub energy: f64,
    pub forces: Vec<f64>,
    pub step: u64,
    pub dim: Dim,
}

impl SampleRecord {
    pub fn from_sample<T: Real>(s: &LabeledSample<T>, step: u64) -> Self {
        Self {
            species: s.config.species().to_vec(),
            positions: flatten(s.config.positions()),
            energy: s.energy.as_f64(),
            forces: flatten(&s.forces),
            step,
            dim: s.config.dim(),
        }
    }

    pub fn into_sample<T: Real>(self) -> Result<(LabeledSample<T>, u64)> {
        let positions = unflatten(&self.positions)?;
        let forces = unflatten(&self.forces)?;
        let config = AtomicConfiguration::new(positions, self.species, self.dim)?;
        let sample = LabeledSample::new(config, T::from_f64(self.energy), forces)?;
        Ok((sample, self.step))
    }
}

pub(crate) fn flatten<T: Real>(vecs: &[[T; 3]]) -> Vec<f64> {
    vecs.iter().flat_map(|v| v.iter().map(|c| c.as_f64())).collect()
}

pub(crate) fn unflatten<T: Real>(flat: &[f64]) -> Result<Vec<[T; 3]>> {
    if flat.len() % 3 != 0 {
        return Err(Error::Serialization(format!(
            "flattened 3-vector array has length {}",
            flat.len()
        )));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| [T::from_f64(c[0]), T::from_f64(c[1]), T::from_f64(c[2])])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dimer(r: f64) -> AtomicConfiguration<f64> {
        AtomicConfiguration::new(
            vec![[0.0, 0.0, 0.0], [r, 0.0, 0.0]],
            vec![0, 0],
            Dim::Three,
        )
        .unwrap()
    }

    fn sample(r: f64, energy: f64) -> LabeledSample<f64> {
        LabeledSample::new(dimer(r), energy, vec![[0.0; 3]; 2]).unwrap()
    }

    #[test]
    fn offset_arithmetic() {
        let mut off = EnergyOffset::new();
        assert_eq!(off.freeze(5.0, 3.0).unwrap(), 2.0);
        // Stored label for the initial structure equals the pretrained energy.
        assert_eq!(off.shift(3.0).unwrap(), 5.0);
        assert_eq!(off.unshift(5.0).unwrap(), 3.0);
        assert!(off.freeze(1.0, 1.0).is_err());

        let mut identity = EnergyOffset::new();
        assert_eq!(identity.freeze(4.3, 4.3).unwrap(), 0.0);
        let mut negative = EnergyOffset::new();
        assert_eq!(negative.freeze(-1.2, 4.3).unwrap(), -5.5);
    }

    #[test]
    fn offset_must_be_frozen_before_use() {
        let off: EnergyOffset<f64> = EnergyOffset::new();
        assert!(off.shift(1.0).is_err());
        assert!(off.unshift(1.0).is_err());
    }

    #[test]
    fn dataset_appends_in_order() {
        let mut ds = Dataset::new();
        assert_eq!(ds.add(sample(1.0, 1.0), 0).unwrap(), 0);
        assert_eq!(ds.recent_index(), Some(0));
        for i in 1..8 {
            ds.add(sample(1.0 + i as f64 * 0.1, i as f64), i as u64).unwrap();
        }
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.recent_index(), Some(7));
        assert_eq!(ds.get(3).energy, 3.0);
        assert_eq!(ds.insertion_step(5), 5);
    }

    #[test]
    fn non_finite_samples_rejected() {
        let mut bad = sample(1.0, 1.0);
        bad.forces[1][0] = f64::NAN;
        let mut ds = Dataset::new();
        assert!(ds.add(bad, 0).is_err());
        assert!(LabeledSample::new(dimer(1.0), f64::INFINITY, vec![[0.0; 3]; 2]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AtomicConfiguration::<f64>::new(vec![], vec![], Dim::Three).is_err());
        assert!(
            AtomicConfiguration::new(vec![[0.0, 0.0, 1.0]], vec![0], Dim::Two).is_err(),
            "2D config with nonzero z must be rejected"
        );
        assert!(AtomicConfiguration::new(vec![[f64::NAN, 0.0, 0.0]], vec![0], Dim::Three).is_err());
        assert!(AtomicConfiguration::new(vec![[0.0; 3]], vec![0, 1], Dim::Three).is_err());
    }

    #[test]
    fn minibatch_degenerates_to_uniform_when_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = draw_minibatch::<f64, _>(5, 5, Some(4), &mut rng).unwrap();
        assert_eq!(batch.len(), 5);
        for &(i, w) in batch.iter() {
            assert!(i < 5);
            assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn minibatch_priority_weights() {
        // n=20, batch=5: q_new = 0.2 so w_new = (1/20)/0.2 = 0.25;
        // q_other = 0.8/19 so w_other = (1/20)*19/0.8 = 1.1875.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_new = false;
        let mut saw_other = false;
        for _ in 0..200 {
            let batch = draw_minibatch::<f64, _>(20, 5, Some(19), &mut rng).unwrap();
            for &(i, w) in batch.iter() {
                if i == 19 {
                    assert_eq!(w, 0.25);
                    saw_new = true;
                } else {
                    assert_eq!(w, 1.1875);
                    saw_other = true;
                }
            }
        }
        assert!(saw_new && saw_other);
    }

    #[test]
    fn minibatch_recent_expected_once_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 200_000;
        let mut count_recent = 0u64;
        for _ in 0..trials {
            let batch = draw_minibatch::<f64, _>(20, 5, Some(19), &mut rng).unwrap();
            count_recent += batch.iter().filter(|&&(i, _)| i == 19).count() as u64;
        }
        let mean = count_recent as f64 / trials as f64;
        // E[count of recent per batch] = batch * q_new = 1.
        assert!((mean - 1.0).abs() < 0.02, "mean recent count {mean}");
    }

    #[test]
    fn minibatch_estimator_unbiased() {
        // Payload g_i = i+1 on n=20, so the full-data target is
        // 1 + 2 + ... + 20 = 210.
        let n = 20usize;
        let b = 5usize;
        let full: f64 = (1..=n).map(|i| i as f64).sum(); // 210
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 1_000_000u64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..trials {
            let batch = draw_minibatch::<f64, _>(n, b, Some(n - 1), &mut rng).unwrap();
            let est: f64 = (n as f64 / b as f64)
                * batch.iter().map(|&(i, w)| w * (i + 1) as f64).sum::<f64>();
            sum += est;
            sum_sq += est * est;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - full).abs() <= 3.0 * se,
            "estimator mean {mean} vs {full}, se {se}"
        );
    }

    #[test]
    fn minibatch_probabilities_sum_to_one() {
        // q_new + (n-1) q_other = 1 exactly for the scheme's parameters.
        for n in [3usize, 6, 20, 101] {
            for b in [2usize, 5, 8] {
                if n <= b {
                    continue;
                }
                let q_new = 1.0 / b as f64;
                let q_other = (1.0 - q_new) / (n - 1) as f64;
                let total = q_new + (n - 1) as f64 * q_other;
                assert!((total - 1.0).abs() < 1e-15);
                assert!(q_other > 0.0);
            }
        }
    }

    #[test]
    fn minibatch_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(draw_minibatch::<f64, _>(0, 5, None, &mut rng).is_err());
        assert!(draw_minibatch::<f64, _>(5, 0, None, &mut rng).is_err());
        assert!(draw_minibatch::<f64, _>(5, 2, Some(5), &mut rng).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = std::env::temp_dir().join("otf_core_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dataset.jsonl");

        let mut ds = Dataset::new();
        for i in 0..5 {
            let mut s = sample(1.0 + 0.05 * i as f64, -3.0 + i as f64 * 0.25);
            s.forces[0] = [0.125 * i as f64, -0.5, 1.0 / (i + 1) as f64];
            ds.add(s, i as u64 * 10).unwrap();
        }
        ds.write_jsonl(&path).unwrap();
        let back: Dataset<f64> = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        for i in 0..ds.len() {
            assert_eq!(back.get(i).energy, ds.get(i).energy);
            assert_eq!(back.get(i).forces, ds.get(i).forces);
            assert_eq!(back.get(i).config.positions(), ds.get(i).config.positions());
            assert_eq!(back.insertion_step(i), ds.insertion_step(i));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn stored_label_recovers_raw_energy() {
        // Re-deriving the raw oracle energy from any stored record holds.
        let mut off = EnergyOffset::new();
        off.freeze(5.0, 3.0).unwrap();
        for oracle_e in [-2.0, 0.0, 7.5] {
            let stored = off.shift(oracle_e).unwrap();
            assert_eq!(off.unshift(stored).unwrap(), oracle_e);
        }
    }
}
