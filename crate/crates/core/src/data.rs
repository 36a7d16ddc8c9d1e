//! Datasets, Dirichlet non-IID partitioning, synthetic stand-ins and
//! augmentation mixing.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::model::{Batch, Shape};
use crate::rng::{self, purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("class {class} has {have} samples, fewer than the {need} clients")]
    TooFewSamples { class: usize, have: usize, need: usize },
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("client count must be at least 1")]
    NoClients,
    #[error("partitioning requires an authentic dataset")]
    NotAuthentic,
    #[error("augmentation ratio must lie in [0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("synthetic dataset is empty but the augmentation ratio is positive")]
    EmptySynthetic,
    #[error("datasets differ in shape or class count")]
    Incompatible,
    #[error("no partition with every shard non-empty after {attempts} draws")]
    PartitionFailed { attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    Authentic,
    Synthetic,
}

/// Image-like samples with labels and per-sample provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    classes: usize,
    samples: Vec<f64>,
    labels: Vec<usize>,
    provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(shape: Shape, classes: usize, samples: Vec<f64>, labels: Vec<usize>, provenance: Provenance) -> Result<Self, DataError> {
        let n = labels.len();
        Self::with_provenance(shape, classes, samples, labels, vec![provenance; n])
    }

    pub fn with_provenance(
        shape: Shape,
        classes: usize,
        samples: Vec<f64>,
        labels: Vec<usize>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if samples.len() != labels.len() * shape.len() {
            return Err(DataError::ShapeMismatch { expected: labels.len() * shape.len(), actual: samples.len() });
        }
        if provenance.len() != labels.len() {
            return Err(DataError::ShapeMismatch { expected: labels.len(), actual: provenance.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        Ok(Self { shape, classes, samples, labels, provenance })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_len(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.feature_len();
        &self.samples[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn is_authentic(&self) -> bool {
        self.provenance.iter().all(|&p| p == Provenance::Authentic)
    }

    pub fn count_of(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let d = self.feature_len();
        let mut samples = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        Self::with_provenance(
            self.shape,
            self.classes,
            samples,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.provenance[i]).collect(),
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.feature_len();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Batch { inputs, labels: indices.iter().map(|&i| self.labels[i]).collect(), feature_len: d }
    }

    /// Concatenation; shapes and class counts must agree.
    pub fn concat(parts: &[Dataset]) -> Result<Self, DataError> {
        let first = parts.first().ok_or(DataError::Empty)?;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let mut provenance = Vec::new();
        for p in parts {
            if p.shape != first.shape || p.classes != first.classes {
                return Err(DataError::Incompatible);
            }
            samples.extend_from_slice(&p.samples);
            labels.extend_from_slice(&p.labels);
            provenance.extend_from_slice(&p.provenance);
        }
        Self::with_provenance(first.shape, first.classes, samples, labels, provenance)
    }

    fn check_compatible(&self, other: &Dataset) -> Result<(), DataError> {
        if self.shape != other.shape || self.classes != other.classes {
            return Err(DataError::Incompatible);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AugmentationSpec {
    pub ratio: f64,
}

/// Redraws allowed before giving up on a partition with an empty shard.
pub const PARTITION_ATTEMPTS: usize = 1000;

/// Splits `ds` across clients with per-class proportions drawn from a
/// symmetric Dirichlet(α). Counts are rounded by largest remainder, so every
/// sample lands in exactly one shard. Draws that leave a shard empty are
/// repeated.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    if spec.clients == 0 {
        return Err(DataError::NoClients);
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(DataError::InvalidAlpha(spec.alpha));
    }
    if !ds.is_authentic() {
        return Err(DataError::NotAuthentic);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            return Err(DataError::EmptyClass { class });
        }
        if idx.len() < spec.clients {
            return Err(DataError::TooFewSamples { class, have: idx.len(), need: spec.clients });
        }
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|_| DataError::InvalidAlpha(spec.alpha))?;
    let mut rng = rng::stream(spec.seed, &[purpose::PARTITION]);
    for _ in 0..PARTITION_ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); spec.clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut draws: Vec<f64> = (0..spec.clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) {
                // Every draw underflowed: put the class on one client.
                draws.iter_mut().for_each(|d| *d = 0.0);
                draws[rng.random_range(0..spec.clients)] = 1.0;
            }
            let total: f64 = draws.iter().sum();
            let counts = largest_remainder(&draws.iter().map(|d| d / total).collect::<Vec<_>>(), idx.len());
            let mut start = 0;
            for (shard, &c) in shards.iter_mut().zip(&counts) {
                shard.extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return shards
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    ds.subset(&s)
                })
                .collect();
        }
    }
    Err(DataError::PartitionFailed { attempts: PARTITION_ATTEMPTS })
}

/// Integer counts summing to `n`, proportional to `props`. Leftover units go
/// to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| libm::floor(*r) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - libm::floor(raw[a]);
        let fb = raw[b] - libm::floor(raw[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Number of synthetic samples substituted for ratio `r` over `n` samples.
pub fn synthetic_count(r: f64, n: usize) -> usize {
    // The epsilon absorbs float error such as 0.29 * 100 = 29.000000000000004.
    let k = libm::ceil(r * n as f64 - 1e-9);
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// Replacement mixing: ⌈r·n⌉ uniformly chosen authentic samples are replaced
/// by synthetic ones, keeping the size at n.
pub fn mix_augment(authentic: &Dataset, synthetic: &Dataset, spec: &AugmentationSpec, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..1.0).contains(&spec.ratio) {
        return Err(DataError::InvalidRatio(spec.ratio));
    }
    let n = authentic.len();
    let k = synthetic_count(spec.ratio, n);
    if k == 0 {
        return Ok(authentic.clone());
    }
    if synthetic.is_empty() {
        return Err(DataError::EmptySynthetic);
    }
    authentic.check_compatible(synthetic)?;
    let mut rng = rng::stream(seed, &[purpose::MIX]);
    let slots = index::sample(&mut rng, n, k);
    let sources: Vec<usize> = if synthetic.len() >= k {
        index::sample(&mut rng, synthetic.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..synthetic.len())).collect()
    };
    let mut out = authentic.clone();
    let d = out.feature_len();
    for (slot, src) in slots.iter().zip(sources) {
        out.samples[slot * d..(slot + 1) * d].copy_from_slice(synthetic.sample(src));
        out.labels[slot] = synthetic.labels[src];
        out.provenance[slot] = Provenance::Synthetic;
    }
    Ok(out)
}

/// Default floor on per-feature variance for the surrogate generator.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// Class-conditional diagonal Gaussian stand-in for externally generated
/// synthetic data: sample i of the output is drawn from the fitted Gaussian
/// of `ds.label(i)`, so sizes and label counts match the source.
pub fn surrogate_synthetic(ds: &Dataset, seed: u64, variance_floor: f64) -> Result<Dataset, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let d = ds.feature_len();
    let counts = ds.class_counts();
    let mut mean = vec![0.0; ds.classes() * d];
    let mut var = vec![0.0; ds.classes() * d];
    for i in 0..ds.len() {
        let c = ds.label(i);
        for (m, &v) in mean[c * d..(c + 1) * d].iter_mut().zip(ds.sample(i)) {
            *m += v;
        }
    }
    for c in 0..ds.classes() {
        if counts[c] > 0 {
            mean[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= counts[c] as f64);
        }
    }
    for i in 0..ds.len() {
        let c = ds.label(i);
        for j in 0..d {
            let e = ds.sample(i)[j] - mean[c * d + j];
            var[c * d + j] += e * e;
        }
    }
    for c in 0..ds.classes() {
        for v in &mut var[c * d..(c + 1) * d] {
            *v = if counts[c] > 1 { *v / (counts[c] - 1) as f64 } else { 0.0 };
            *v = v.max(variance_floor);
        }
    }
    let mut rng = rng::stream(seed, &[purpose::SYNTHETIC]);
    let mut samples = Vec::with_capacity(ds.len() * d);
    for i in 0..ds.len() {
        let c = ds.label(i);
        for j in 0..d {
            samples.push(mean[c * d + j] + libm::sqrt(var[c * d + j]) * rng::standard_normal(&mut rng));
        }
    }
    Dataset::new(ds.shape(), ds.classes(), samples, ds.labels().to_vec(), Provenance::Synthetic)
}

/// Shuffles and deals samples round-robin, giving IID shards whose sizes
/// differ by at most one.
pub fn iid_split(ds: &Dataset, clients: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
    if clients == 0 {
        return Err(DataError::NoClients);
    }
    if ds.len() < clients {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::SPLIT, 1]));
    (0..clients)
        .map(|c| {
            let mut idx: Vec<usize> = order.iter().copied().skip(c).step_by(clients).collect();
            idx.sort_unstable();
            ds.subset(&idx)
        })
        .collect()
}

/// Random train/test split with `test` samples held out.
pub fn train_test_split(ds: &Dataset, test: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if test == 0 || test >= ds.len() {
        return Err(DataError::ShapeMismatch { expected: ds.len().saturating_sub(1), actual: test });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::SPLIT, 0]));
    let (te, tr) = order.split_at(test);
    let (mut te, mut tr) = (te.to_vec(), tr.to_vec());
    te.sort_unstable();
    tr.sort_unstable();
    Ok((ds.subset(&tr)?, ds.subset(&te)?))
}
