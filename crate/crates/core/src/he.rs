//! Selective homomorphic aggregation.
//!
//! A frozen [`EncryptionMask`] picks the coordinates that travel encrypted.
//! The [`HeBackend`] trait seals those coordinates, aggregates sealed parts
//! and opens the result. [`SimulatorBackend`] does plaintext arithmetic
//! internally and charges sizes from a [`HeCostModel`]; anything observed
//! through [`attacker_view`] carries no information about hidden values.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use thiserror::Error;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{batch_gradient, ModelError, ParameterVector};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("encryption ratio must lie in [0, 1], got {0}")]
    InvalidEta(f64),
    #[error("expected {expected} coordinates, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("updates were protected under different masks")]
    MaskMismatch,
    #[error("nothing to aggregate")]
    Empty,
    #[error("backend failure: {0}")]
    Backend(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Tolerance on weight sums.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Binary mask over model coordinates; `true` means encrypted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EncryptionMask {
    bits: Vec<bool>,
}

impl EncryptionMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn none(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn all(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_hidden(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn hidden_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// η recomputed from the bits.
    pub fn ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.hidden_count() as f64 / self.bits.len() as f64
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                h = (h ^ i as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h ^ self.bits.len() as u64
    }
}

/// Sets exactly `round(η·|w|)` bits on the largest scores, lower index first
/// among equal scores.
pub fn build_mask(sensitivity: &[f64], eta: f64) -> Result<EncryptionMask, HeError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(HeError::InvalidEta(eta));
    }
    let n = sensitivity.len();
    let k = libm::round(eta * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sensitivity[b].partial_cmp(&sensitivity[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &i in &order[..k.min(n)] {
        bits[i] = true;
    }
    Ok(EncryptionMask { bits })
}

/// Weighted mean of absolute per-client scores.
pub fn aggregate_sensitivity(per_client: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, HeError> {
    let first = per_client.first().ok_or(HeError::Empty)?;
    if weights.len() != per_client.len() {
        return Err(HeError::LengthMismatch { expected: per_client.len(), actual: weights.len() });
    }
    check_weights(weights)?;
    let mut out = vec![0.0; first.len()];
    for (scores, &w) in per_client.iter().zip(weights) {
        if scores.len() != first.len() {
            return Err(HeError::LengthMismatch { expected: first.len(), actual: scores.len() });
        }
        for (o, s) in out.iter_mut().zip(scores) {
            *o += w * libm::fabs(*s);
        }
    }
    Ok(out)
}

fn check_weights(weights: &[f64]) -> Result<(), HeError> {
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(HeError::WeightSum(total));
    }
    Ok(())
}

/// Mean absolute gradient over one pass of `ds` in chunks of `batch`.
pub fn gradient_sensitivity(params: &ParameterVector, ds: &Dataset, batch: usize) -> Result<Vec<f64>, HeError> {
    let batch = batch.max(1);
    let mut acc = vec![0.0; params.len()];
    let mut chunks = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let (_, g) = batch_gradient(params, &ds.batch(chunk))?;
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += libm::fabs(*v);
        }
        chunks += 1;
    }
    let c = chunks.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= c);
    Ok(acc)
}

/// Byte and time coefficients for protected messages.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HeCostModel {
    /// Fixed bytes per message carrying any ciphertext.
    pub overhead_bytes: u64,
    /// Ciphertext bytes per 4-byte plaintext coordinate.
    pub expansion: f64,
    pub encrypt_secs_per_coord: f64,
    pub decrypt_secs_per_coord: f64,
    pub aggregate_secs_per_coord: f64,
}

impl Default for HeCostModel {
    fn default() -> Self {
        Self {
            overhead_bytes: 1024,
            expansion: 10.0,
            encrypt_secs_per_coord: 1e-6,
            decrypt_secs_per_coord: 5e-7,
            aggregate_secs_per_coord: 1e-7,
        }
    }
}

impl HeCostModel {
    pub fn is_valid(&self) -> bool {
        [self.expansion, self.encrypt_secs_per_coord, self.decrypt_secs_per_coord, self.aggregate_secs_per_coord]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
    }

    pub fn ciphertext_bytes(&self, hidden: usize) -> u64 {
        if hidden == 0 {
            0
        } else {
            self.overhead_bytes + libm::ceil(self.expansion * 4.0 * hidden as f64) as u64
        }
    }

    /// Size of a message with `plain` cleartext and `hidden` encrypted coordinates.
    pub fn message_bytes(&self, plain: usize, hidden: usize) -> u64 {
        4 * plain as u64 + self.ciphertext_bytes(hidden)
    }
}

/// Encrypted coordinates as held by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Sealed {
    coords: usize,
    payload: Vec<u8>,
    bytes: u64,
}

impl Sealed {
    pub fn new(coords: usize, payload: Vec<u8>, bytes: u64) -> Self {
        Self { coords, payload, bytes }
    }

    /// Backend-specific ciphertext bytes.
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

/// Additively homomorphic scheme over real vectors.
pub trait HeBackend {
    fn seal(&self, values: &[f64]) -> Result<Sealed, HeError>;
    fn open(&self, sealed: &Sealed) -> Result<Vec<f64>, HeError>;
    /// `Σ_k weights[k] · parts[k]`, reduced left to right.
    fn weighted_sum(&self, parts: &[&Sealed], weights: &[f64]) -> Result<Sealed, HeError>;
    fn cost(&self) -> &HeCostModel;
}

/// Exact stand-in: values are kept as plaintext inside the sealed payload
/// and sizes are charged from the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimulatorBackend {
    pub cost: HeCostModel,
}

impl SimulatorBackend {
    pub fn new(cost: HeCostModel) -> Self {
        Self { cost }
    }

    fn pack(&self, values: &[f64]) -> Sealed {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Sealed { coords: values.len(), payload, bytes: self.cost.ciphertext_bytes(values.len()) }
    }
}

impl HeBackend for SimulatorBackend {
    fn seal(&self, values: &[f64]) -> Result<Sealed, HeError> {
        Ok(self.pack(values))
    }

    fn open(&self, sealed: &Sealed) -> Result<Vec<f64>, HeError> {
        if sealed.payload.len() != sealed.coords * 8 {
            return Err(HeError::Backend("corrupt simulator payload"));
        }
        Ok(sealed
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn weighted_sum(&self, parts: &[&Sealed], weights: &[f64]) -> Result<Sealed, HeError> {
        let first = parts.first().ok_or(HeError::Empty)?;
        let mut acc = vec![0.0; first.coords];
        for (p, &w) in parts.iter().zip(weights) {
            if p.coords != first.coords {
                return Err(HeError::MaskMismatch);
            }
            for (a, v) in acc.iter_mut().zip(self.open(p)?) {
                *a += w * v;
            }
        }
        Ok(self.pack(&acc))
    }

    fn cost(&self) -> &HeCostModel {
        &self.cost
    }
}

/// A model update split into cleartext and sealed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtectedUpdate {
    len: usize,
    mask_id: u64,
    plain: Vec<f64>,
    hidden: Option<Sealed>,
    bytes: u64,
}

impl ProtectedUpdate {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cleartext values at unmasked coordinates, in index order.
    pub fn plain(&self) -> &[f64] {
        &self.plain
    }

    pub fn hidden_coords(&self) -> usize {
        self.hidden.as_ref().map_or(0, Sealed::coords)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

pub fn protect<B: HeBackend + ?Sized>(update: &[f64], mask: &EncryptionMask, backend: &B) -> Result<ProtectedUpdate, HeError> {
    if update.len() != mask.len() {
        return Err(HeError::LengthMismatch { expected: mask.len(), actual: update.len() });
    }
    let mut plain = Vec::with_capacity(update.len() - mask.hidden_count());
    let mut hidden = Vec::with_capacity(mask.hidden_count());
    for (&v, &m) in update.iter().zip(mask.bits()) {
        if m {
            hidden.push(v);
        } else {
            plain.push(v);
        }
    }
    let sealed = if hidden.is_empty() { None } else { Some(backend.seal(&hidden)?) };
    let bytes = 4 * plain.len() as u64 + sealed.as_ref().map_or(0, Sealed::bytes);
    Ok(ProtectedUpdate { len: update.len(), mask_id: mask.fingerprint(), plain, hidden: sealed, bytes })
}

pub fn unprotect<B: HeBackend + ?Sized>(update: &ProtectedUpdate, mask: &EncryptionMask, backend: &B) -> Result<Vec<f64>, HeError> {
    if update.mask_id != mask.fingerprint() || update.len != mask.len() {
        return Err(HeError::MaskMismatch);
    }
    let hidden = match &update.hidden {
        Some(s) => backend.open(s)?,
        None => Vec::new(),
    };
    let (mut p, mut h) = (update.plain.iter(), hidden.iter());
    mask.bits()
        .iter()
        .map(|&m| if m { h.next() } else { p.next() }.copied().ok_or(HeError::Backend("payload shorter than mask")))
        .collect()
}

/// Weighted aggregation: cleartext parts are averaged directly and sealed
/// parts through the backend, both as a left-to-right reduction.
pub fn he_aggregate<B: HeBackend + ?Sized>(updates: &[ProtectedUpdate], weights: &[f64], backend: &B) -> Result<ProtectedUpdate, HeError> {
    let first = updates.first().ok_or(HeError::Empty)?;
    if weights.len() != updates.len() {
        return Err(HeError::LengthMismatch { expected: updates.len(), actual: weights.len() });
    }
    check_weights(weights)?;
    if updates.iter().any(|u| u.mask_id != first.mask_id || u.len != first.len) {
        return Err(HeError::MaskMismatch);
    }
    let mut plain = vec![0.0; first.plain.len()];
    for (u, &w) in updates.iter().zip(weights) {
        for (a, v) in plain.iter_mut().zip(&u.plain) {
            *a += w * v;
        }
    }
    let hidden = match &first.hidden {
        Some(_) => {
            let parts: Vec<&Sealed> = updates.iter().map(|u| u.hidden.as_ref().ok_or(HeError::MaskMismatch)).collect::<Result<_, _>>()?;
            Some(backend.weighted_sum(&parts, weights)?)
        }
        None => None,
    };
    let bytes = 4 * plain.len() as u64 + hidden.as_ref().map_or(0, Sealed::bytes);
    Ok(ProtectedUpdate { len: first.len, mask_id: first.mask_id, plain, hidden, bytes })
}

/// What a curious server or eavesdropper sees of a protected update.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerView {
    /// `None` at encrypted coordinates.
    pub values: Vec<Option<f64>>,
    /// Stand-in ciphertext bytes; a function of the ciphertext size only.
    pub opaque: Vec<u8>,
}

pub fn attacker_view(update: &ProtectedUpdate, mask: &EncryptionMask) -> Result<AttackerView, HeError> {
    if update.mask_id != mask.fingerprint() || update.len != mask.len() {
        return Err(HeError::MaskMismatch);
    }
    let mut p = update.plain.iter();
    let values = mask.bits().iter().map(|&m| if m { None } else { p.next().copied() }).collect();
    let size = update.hidden.as_ref().map_or(0, Sealed::bytes);
    let mut opaque = vec![0u8; size as usize];
    rng::stream(size, &[0x0b1b]).fill_bytes(&mut opaque);
    Ok(AttackerView { values, opaque })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn sim() -> SimulatorBackend {
        SimulatorBackend::default()
    }

    fn fedavg(models: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; models[0].len()];
        for (m, &w) in models.iter().zip(weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Independent mask oracle: repeatedly take the first maximum.
    fn mask_oracle(s: &[f64], eta: f64) -> Vec<bool> {
        let k = libm::round(eta * s.len() as f64) as usize;
        let mut bits = vec![false; s.len()];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..s.len() {
                if !bits[i] && best.is_none_or(|b| s[i] > s[b]) {
                    best = Some(i);
                }
            }
            bits[best.unwrap()] = true;
        }
        bits
    }

    #[test]
    fn mask_examples() {
        assert_eq!(build_mask(&[0.9, 0.1, 0.5, 0.7], 0.5).unwrap().bits(), &[true, false, false, true]);
        assert_eq!(build_mask(&[0.5, 0.5, 0.1, 0.1], 0.25).unwrap().bits(), &[true, false, false, false]);
        assert_eq!(build_mask(&[3.0, 1.0, 2.0], 1.0).unwrap(), EncryptionMask::all(3));
        assert_eq!(build_mask(&[3.0, 1.0, 2.0], 0.0).unwrap(), EncryptionMask::none(3));
        assert!(build_mask(&[1.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn mask_cardinality_and_oracle(s in proptest::collection::vec(0u8..6, 1..60), eta in 0.0f64..=1.0) {
            let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            let m = build_mask(&s, eta).unwrap();
            prop_assert_eq!(m.hidden_count(), libm::round(eta * s.len() as f64) as usize);
            prop_assert!((m.ratio() - eta).abs() <= 1.0 / s.len() as f64);
            let oracle = mask_oracle(&s, eta);
            prop_assert_eq!(m.bits(), oracle.as_slice());
        }

        #[test]
        fn aggregation_equals_plaintext_mean(
            seed in 0u64..10_000,
            clients in 1usize..5,
            len in 1usize..40,
            eta in 0.0f64..=1.0,
        ) {
            let mut r = rng::stream(seed, &[]);
            let models: Vec<Vec<f64>> = (0..clients).map(|_| (0..len).map(|_| rng::standard_normal(&mut r)).collect()).collect();
            let sizes: Vec<u64> = (0..clients).map(|_| 1 + r.next_u64() % 50).collect();
            let total: u64 = sizes.iter().sum();
            let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
            prop_assume!((weights.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_TOLERANCE);
            let sens: Vec<f64> = (0..len).map(|_| rng::standard_normal(&mut r)).collect();
            let mask = build_mask(&sens, eta).unwrap();
            let prot: Vec<_> = models.iter().map(|m| protect(m, &mask, &sim()).unwrap()).collect();
            let agg = he_aggregate(&prot, &weights, &sim()).unwrap();
            prop_assert_eq!(unprotect(&agg, &mask, &sim()).unwrap(), fedavg(&models, &weights));
        }

        #[test]
        fn attacker_view_ignores_hidden_values(a in proptest::collection::vec(-9.0f64..9.0, 12), b in proptest::collection::vec(-9.0f64..9.0, 12)) {
            let mask = build_mask(&(0..12).map(|i| (i % 5) as f64).collect::<Vec<_>>(), 0.5).unwrap();
            let mut mixed = a.clone();
            for i in 0..12 {
                if mask.is_hidden(i) {
                    mixed[i] = b[i];
                }
            }
            let va = attacker_view(&protect(&a, &mask, &sim()).unwrap(), &mask).unwrap();
            let vm = attacker_view(&protect(&mixed, &mask, &sim()).unwrap(), &mask).unwrap();
            prop_assert_eq!(va, vm);
        }
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(aggregate_sensitivity(&[vec![1.0, -2.0]], &[1.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_sensitivity(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(aggregate_sensitivity(&[vec![4.0, 0.0], vec![0.0, 4.0]], &[0.25, 0.75]).unwrap(), vec![1.0, 3.0]);
        assert!(matches!(aggregate_sensitivity(&[vec![1.0], vec![1.0]], &[0.5, 0.6]), Err(HeError::WeightSum(_))));
    }

    #[test]
    fn protect_sizes_and_round_trip() {
        let w: Vec<f64> = (0..100).map(|i| i as f64 * 0.37 - 3.0).collect();
        let none = EncryptionMask::none(100);
        let p = protect(&w, &none, &sim()).unwrap();
        assert_eq!((p.hidden_coords(), p.bytes()), (0, 400));
        let all = EncryptionMask::all(100);
        let p = protect(&w, &all, &sim()).unwrap();
        assert_eq!(p.bytes(), 1024 + 40 * 100);
        assert_eq!(unprotect(&p, &all, &sim()).unwrap(), w);
        assert!(attacker_view(&p, &all).unwrap().values.iter().all(Option::is_none));
    }

    #[test]
    fn aggregate_examples() {
        let mask = build_mask(&[1.0, 0.0, 2.0], 2.0 / 3.0).unwrap();
        let a = [1.0, 2.0, 3.0];
        let b = [3.0, 6.0, -1.0];
        let pa = protect(&a, &mask, &sim()).unwrap();
        let pb = protect(&b, &mask, &sim()).unwrap();
        let agg = he_aggregate(&[pa.clone(), pb], &[0.5, 0.5], &sim()).unwrap();
        assert_eq!(unprotect(&agg, &mask, &sim()).unwrap(), vec![2.0, 4.0, 1.0]);
        let single = he_aggregate(&[pa], &[1.0], &sim()).unwrap();
        assert_eq!(unprotect(&single, &mask, &sim()).unwrap(), a.to_vec());

        let models = [vec![0.3, -1.0, 2.0], vec![1.5, 0.25, -0.75], vec![-2.0, 4.0, 0.5]];
        let weights = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        let prot: Vec<_> = models.iter().map(|m| protect(m, &mask, &sim()).unwrap()).collect();
        let agg = he_aggregate(&prot, &weights, &sim()).unwrap();
        assert_eq!(unprotect(&agg, &mask, &sim()).unwrap(), fedavg(&models, &weights));
    }

    #[test]
    fn mask_mismatch_is_rejected() {
        let m1 = EncryptionMask::from_bits(vec![true, false]);
        let m2 = EncryptionMask::from_bits(vec![false, true]);
        let a = protect(&[1.0, 2.0], &m1, &sim()).unwrap();
        let b = protect(&[1.0, 2.0], &m2, &sim()).unwrap();
        assert_eq!(he_aggregate(&[a.clone(), b], &[0.5, 0.5], &sim()), Err(HeError::MaskMismatch));
        assert_eq!(unprotect(&a, &m2, &sim()), Err(HeError::MaskMismatch));
    }

    #[test]
    fn message_bytes_grow_with_hidden_share() {
        let c = HeCostModel::default();
        let n = 1000;
        let mut last = 0;
        for h in 0..=n {
            let b = c.message_bytes(n - h, h);
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn lenet_full_encryption_is_hundreds_of_megabytes() {
        let c = HeCostModel::default();
        let per_round = 2 * c.message_bytes(0, 83_126);
        let total = 35 * per_round;
        assert!((100_000_000..=250_000_000).contains(&total), "{total}");
    }
}
