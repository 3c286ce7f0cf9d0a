// SPDX-License-Identifier: Apache-2.0

//! Prediction service: a hashed perceptron whose weight table lives in the
//! segment's model region.
//!
//! Three features are each hashed with their own salt into a single table of
//! 2^14 saturating weights. The prediction margin is the sum of the three
//! selected weights; training nudges them by ±1 when the prediction was
//! wrong or the margin is within the threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::shmem::{SegmentView, ShmError, PSS_REGION_OFFSET, PSS_REGION_SIZE};

pub const TABLE_BITS: u32 = 14;
pub const TABLE_SIZE: usize = 1 << TABLE_BITS;
pub const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;
pub const WEIGHT_MIN: i16 = -128;
pub const WEIGHT_MAX: i16 = 127;
pub const DEFAULT_THETA: i32 = 48;
pub const DEFAULT_SALTS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Bytes per update in the batch flush wire format.
pub const UPDATE_WIRE_SIZE: usize = 3 * 8 + 1;

const _: () = assert!(TABLE_SIZE * 2 <= PSS_REGION_SIZE);

pub type Features = [u64; 3];

/// Multiply-shift hash of a salted feature into a 14-bit table index.
pub fn hash_index(feature: u64, salt: u64) -> usize {
    ((feature ^ salt).wrapping_mul(HASH_MULTIPLIER) >> (64 - TABLE_BITS)) as usize
}

pub trait WeightStore {
    fn weight(&self, index: usize) -> i16;
    fn set_weight(&mut self, index: usize, value: i16);
}

impl WeightStore for Vec<i16> {
    fn weight(&self, index: usize) -> i16 {
        self[index]
    }

    fn set_weight(&mut self, index: usize, value: i16) {
        self[index] = value;
    }
}

/// Weights stored as little-endian `i16`s at the start of the model region.
pub struct SegmentWeights<'a> {
    view: &'a SegmentView,
}

impl<'a> SegmentWeights<'a> {
    pub fn new(view: &'a SegmentView) -> Result<Self, ShmError> {
        view.check(PSS_REGION_OFFSET as u64, (TABLE_SIZE * 2) as u64)?;
        Ok(SegmentWeights { view })
    }

    fn offset(index: usize) -> u64 {
        (PSS_REGION_OFFSET + 2 * (index % TABLE_SIZE)) as u64
    }
}

impl WeightStore for SegmentWeights<'_> {
    fn weight(&self, index: usize) -> i16 {
        let mut b = [0u8; 2];
        // in bounds: checked at construction
        self.view.read(Self::offset(index), &mut b).expect("model region");
        i16::from_le_bytes(b)
    }

    fn set_weight(&mut self, index: usize, value: i16) {
        self.view
            .write(Self::offset(index), &value.to_le_bytes())
            .expect("model region");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PssConfig {
    pub theta: i32,
    pub salts: [u64; 3],
}

impl Default for PssConfig {
    fn default() -> Self {
        PssConfig {
            theta: DEFAULT_THETA,
            salts: DEFAULT_SALTS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub decision: bool,
    pub margin: i32,
}

pub struct PerceptronModel<S> {
    store: S,
    config: PssConfig,
}

impl PerceptronModel<Vec<i16>> {
    /// A zeroed process-local model.
    pub fn local(config: PssConfig) -> Self {
        PerceptronModel {
            store: vec![0; TABLE_SIZE],
            config,
        }
    }

    pub fn weights(&self) -> &[i16] {
        &self.store
    }
}

impl<'a> PerceptronModel<SegmentWeights<'a>> {
    pub fn in_segment(view: &'a SegmentView, config: PssConfig) -> Result<Self, ShmError> {
        Ok(PerceptronModel {
            store: SegmentWeights::new(view)?,
            config,
        })
    }
}

impl<S: WeightStore> PerceptronModel<S> {
    pub fn config(&self) -> PssConfig {
        self.config
    }

    fn indices(&self, features: &Features) -> [usize; 3] {
        [0, 1, 2].map(|i| hash_index(features[i], self.config.salts[i]))
    }

    pub fn predict(&self, features: &Features) -> Prediction {
        let margin: i32 = self
            .indices(features)
            .iter()
            .map(|&i| self.store.weight(i) as i32)
            .sum();
        Prediction {
            decision: margin >= 0,
            margin,
        }
    }

    /// Threshold-gated training step; returns the pre-update prediction.
    pub fn update(&mut self, features: &Features, outcome: bool) -> Prediction {
        let p = self.predict(features);
        if p.decision != outcome || p.margin.abs() <= self.config.theta {
            let step: i16 = if outcome { 1 } else { -1 };
            // Colliding indices are adjusted once per occurrence.
            for i in self.indices(features) {
                let w = (self.store.weight(i) + step).clamp(WEIGHT_MIN, WEIGHT_MAX);
                self.store.set_weight(i, w);
            }
        }
        p
    }

    pub fn weight(&self, index: usize) -> i16 {
        self.store.weight(index)
    }
}

/// Zero the model region of a segment.
pub fn reset_model(view: &SegmentView) -> Result<(), ShmError> {
    view.fill(PSS_REGION_OFFSET as u64, (TABLE_SIZE * 2) as u64, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Update {
    pub features: Features,
    pub outcome: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchWireError {
    #[error("batch truncated")]
    Truncated,
    #[error("batch declares {declared} updates but carries {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("outcome byte {0} is not 0 or 1")]
    BadOutcome(u8),
}

/// Pending updates awaiting a flush across the boundary.
#[derive(Clone, Debug)]
pub struct UpdateBatch {
    pending: Vec<Update>,
    batch_size: usize,
}

impl UpdateBatch {
    pub fn new(batch_size: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        UpdateBatch {
            pending: Vec::with_capacity(batch_size),
            batch_size,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Queue an update; returns the full batch once `batch_size` is reached.
    pub fn push(&mut self, update: Update) -> Option<Vec<Update>> {
        self.pending.push(update);
        (self.pending.len() >= self.batch_size).then(|| std::mem::take(&mut self.pending))
    }

    pub fn take(&mut self) -> Vec<Update> {
        std::mem::take(&mut self.pending)
    }
}

/// `count: u32` then `count × (3 × u64 feature, u8 outcome)`, little-endian.
pub fn encode_batch(updates: &[Update]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + updates.len() * UPDATE_WIRE_SIZE);
    out.extend((updates.len() as u32).to_le_bytes());
    for u in updates {
        for f in u.features {
            out.extend(f.to_le_bytes());
        }
        out.push(u.outcome as u8);
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Vec<Update>, BatchWireError> {
    let count = u32::from_le_bytes(
        bytes
            .get(..4)
            .ok_or(BatchWireError::Truncated)?
            .try_into()
            .unwrap(),
    ) as usize;
    let body = &bytes[4..];
    if body.len() != count * UPDATE_WIRE_SIZE {
        return Err(BatchWireError::LengthMismatch {
            declared: count,
            actual: body.len(),
        });
    }
    body.chunks_exact(UPDATE_WIRE_SIZE)
        .map(|c| {
            let f = |i: usize| u64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
            let outcome = match c[24] {
                0 => false,
                1 => true,
                b => return Err(BatchWireError::BadOutcome(b)),
            };
            Ok(Update {
                features: [f(0), f(1), f(2)],
                outcome,
            })
        })
        .collect()
}

/// Distinct values per feature in the drift stream.
pub const DRIFT_FEATURE_VALUES: u64 = 64;
/// The two positions the decision boundary alternates between.
pub const DRIFT_BOUNDARIES: [u64; 2] = [8, 56];

/// Synthetic labelled stream whose decision boundary moves periodically.
///
/// Each feature `k` takes one of 64 values `k·64 + v`. The label is
/// `v₀ < b`, where the boundary `b` alternates between 8 and 56 every
/// `flip_period` samples (or stays at 8 when `flip_period` is `None`).
pub struct DriftStream {
    rng: ChaCha8Rng,
    flip_period: Option<usize>,
    index: usize,
}

impl DriftStream {
    pub fn new(seed: u64, flip_period: Option<usize>) -> Self {
        DriftStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            flip_period: flip_period.filter(|&p| p > 0),
            index: 0,
        }
    }
}

impl Iterator for DriftStream {
    type Item = Update;

    fn next(&mut self) -> Option<Update> {
        let values: [u64; 3] = [0, 1, 2].map(|_| self.rng.gen_range(0..DRIFT_FEATURE_VALUES));
        let phase = self.flip_period.map_or(0, |p| (self.index / p) % 2);
        self.index += 1;
        Some(Update {
            features: [0, 1, 2].map(|k| k as u64 * DRIFT_FEATURE_VALUES + values[k]),
            outcome: values[0] < DRIFT_BOUNDARIES[phase],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_index_examples() {
        assert_eq!(hash_index(0, 0), 0);
        assert_eq!(hash_index(0x1234, 1), hash_index(0x1234, 1));
        // (0x1235 * 0x9E3779B97F4A7C15 mod 2^64) >> 50, evaluated with big integers
        assert_eq!(hash_index(0x1234, 1), 10754);
        assert!(hash_index(u64::MAX, 3) < TABLE_SIZE);
    }

    #[test]
    fn zero_model_predicts_one() {
        let m = PerceptronModel::local(PssConfig::default());
        assert_eq!(
            m.predict(&[5, 6, 7]),
            Prediction {
                decision: true,
                margin: 0
            }
        );
    }

    #[test]
    fn single_negative_update() {
        let f = [10, 20, 30];
        let mut m = PerceptronModel::local(PssConfig::default());
        m.update(&f, false);
        // the three indices for this feature vector are distinct
        assert_eq!(
            m.predict(&f),
            Prediction {
                decision: false,
                margin: -3
            }
        );
    }

    #[test]
    fn positive_update_sets_three_weights() {
        let f = [10, 20, 30];
        let mut m = PerceptronModel::local(PssConfig::default());
        m.update(&f, true);
        let idx = [hash_index(10, 1), hash_index(20, 2), hash_index(30, 3)];
        for i in idx {
            assert_eq!(m.weight(i), 1);
        }
        assert_eq!(m.weights().iter().filter(|&&w| w != 0).count(), 3);
    }

    #[test]
    fn colliding_indices_count_with_multiplicity() {
        // identical salts and features map to the same slot three times
        let cfg = PssConfig {
            theta: 48,
            salts: [9, 9, 9],
        };
        let mut m = PerceptronModel::local(cfg);
        m.update(&[4, 4, 4], true);
        assert_eq!(m.weight(hash_index(4, 9)), 3);
        assert_eq!(m.predict(&[4, 4, 4]).margin, 9);
    }

    #[test]
    fn saturation() {
        let f = [1, 2, 3];
        let mut m = PerceptronModel::local(PssConfig {
            theta: i32::MAX,
            ..PssConfig::default()
        });
        for _ in 0..500 {
            m.update(&f, true);
        }
        assert_eq!(m.predict(&f).margin, 3 * 127);
        for _ in 0..1000 {
            m.update(&f, false);
        }
        assert_eq!(m.predict(&f).margin, 3 * -128);
    }

    #[test]
    fn confident_correct_prediction_is_left_alone() {
        let f = [10, 20, 30];
        let mut m = PerceptronModel::local(PssConfig::default());
        for _ in 0..17 {
            m.update(&f, true);
        }
        assert_eq!(m.predict(&f).margin, 51);
        let before = m.weights().to_vec();
        m.update(&f, true);
        assert_eq!(m.weights(), &before[..]);
        // a wrong label still trains
        m.update(&f, false);
        assert_eq!(m.predict(&f).margin, 48);
    }

    #[test]
    fn batch_boundary() {
        let mut b = UpdateBatch::new(64);
        let u = Update {
            features: [1, 2, 3],
            outcome: true,
        };
        for _ in 0..63 {
            assert!(b.push(u).is_none());
        }
        assert_eq!(b.push(u).map(|v| v.len()), Some(64));
        assert!(b.is_empty());
    }

    #[test]
    fn batch_wire_format() {
        let ups = vec![
            Update {
                features: [1, 2, u64::MAX],
                outcome: true,
            },
            Update {
                features: [0, 0, 0],
                outcome: false,
            },
        ];
        let bytes = encode_batch(&ups);
        assert_eq!(bytes.len(), 4 + 2 * 25);
        assert_eq!(&bytes[..4], &[2, 0, 0, 0]);
        assert_eq!(bytes[4 + 24], 1);
        assert_eq!(decode_batch(&bytes).unwrap(), ups);
        assert_eq!(decode_batch(&bytes[..10]).err().map(|e| matches!(e, BatchWireError::LengthMismatch { .. })), Some(true));
        assert_eq!(decode_batch(&[1]), Err(BatchWireError::Truncated));
    }

    #[test]
    fn segment_model_matches_local() {
        let m = crate::shmem::Manager::new(Some(1));
        let seg = m.allocate(1).unwrap();
        let mut shared = PerceptronModel::in_segment(seg.view(), PssConfig::default()).unwrap();
        let mut local = PerceptronModel::local(PssConfig::default());
        for u in DriftStream::new(3, Some(500)).take(2000) {
            assert_eq!(shared.update(&u.features, u.outcome), local.update(&u.features, u.outcome));
        }
        let region = seg
            .view()
            .snapshot(PSS_REGION_OFFSET as u64, (TABLE_SIZE * 2) as u64)
            .unwrap();
        let weights: Vec<i16> = region
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(weights, local.weights());
        reset_model(seg.view()).unwrap();
        assert_eq!(shared.predict(&[1, 2, 3]).margin, 0);
    }

    #[test]
    fn drift_stream_shape() {
        let s: Vec<_> = DriftStream::new(1, Some(500)).take(1000).collect();
        for (i, u) in s.iter().enumerate() {
            let v0 = u.features[0];
            assert!(v0 < 64 && (64..128).contains(&u.features[1]) && (128..192).contains(&u.features[2]));
            let b = if i < 500 { 8 } else { 56 };
            assert_eq!(u.outcome, v0 < b);
        }
        let a: Vec<_> = DriftStream::new(1, None).take(100).collect();
        let b: Vec<_> = DriftStream::new(1, None).take(100).collect();
        assert_eq!(a, b);
    }
}
