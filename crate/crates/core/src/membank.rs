//! Object-centric memory bank.
//!
//! One bounded FIFO queue per targeted class. Pushing onto a full queue
//! first evicts the oldest entry (the bottom). Sampling draws uniformly
//! with replacement and never changes queue contents.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BoxXywh, ClassId, DatasetIndex, ImageId};
use crate::keyed::{self, tag};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("class {0} is not targeted by this bank")]
    NotTargeted(ClassId),
    #[error("feature has dimension {got}, bank expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("queue for class {0} is not populated yet")]
    NotPopulated(ClassId),
    #[error("iteration stamp {stamp} is older than the newest entry ({newest}) of class {class}")]
    StampRegression {
        class: ClassId,
        stamp: u64,
        newest: u64,
    },
    #[error("`now` ({now}) precedes the newest entry ({newest}) of class {class}")]
    FutureEntry {
        class: ClassId,
        now: u64,
        newest: u64,
    },
    #[error("invalid bank config: {0}")]
    Config(String),
    #[error("unsupported snapshot version {0}")]
    SnapshotVersion(u32),
    #[error("snapshot violates bank invariants: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub feature: Vec<f64>,
    pub bbox: BoxXywh,
    pub class: ClassId,
    pub source_image: ImageId,
    pub iteration: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Per-class queue capacity `v`.
    pub capacity: usize,
    /// Classes in at most this many images are targeted.
    pub target_threshold: u64,
    pub feature_dim: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 60,
            target_threshold: 30,
            feature_dim: 16,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<(), BankError> {
        if self.capacity == 0 {
            return Err(BankError::Config("capacity must be at least 1".into()));
        }
        if self.target_threshold == 0 {
            return Err(BankError::Config("target_threshold must be at least 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(BankError::Config("feature_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Classes contained in at most `threshold` images.
pub fn derive_targets(index: &DatasetIndex, threshold: u64) -> BTreeSet<ClassId> {
    index
        .classes()
        .iter()
        .filter(|s| s.image_count <= threshold)
        .map(|s| s.class_id)
        .collect()
}

/// min / mean / max of `now - iteration` over a queue.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staleness {
    pub min: u64,
    pub mean: f64,
    pub max: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    feature_dim: usize,
    queues: BTreeMap<ClassId, VecDeque<FeatureEntry>>,
}

impl MemoryBank {
    pub fn new(cfg: &BankConfig, targets: &BTreeSet<ClassId>) -> Result<Self, BankError> {
        cfg.validate()?;
        Ok(Self {
            capacity: cfg.capacity,
            feature_dim: cfg.feature_dim,
            queues: targets
                .iter()
                .map(|&c| (c, VecDeque::with_capacity(cfg.capacity)))
                .collect(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_targeted(&self, class: ClassId) -> bool {
        self.queues.contains_key(&class)
    }

    pub fn targets(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.queues.keys().copied()
    }

    /// Entries of `class`, oldest first.
    pub fn queue(&self, class: ClassId) -> Option<&VecDeque<FeatureEntry>> {
        self.queues.get(&class)
    }

    pub fn len(&self, class: ClassId) -> usize {
        self.queues.get(&class).map_or(0, VecDeque::len)
    }

    pub fn is_populated(&self, class: ClassId) -> bool {
        self.len(class) > 0
    }

    fn queue_mut(&mut self, class: ClassId) -> Result<&mut VecDeque<FeatureEntry>, BankError> {
        self.queues
            .get_mut(&class)
            .ok_or(BankError::NotTargeted(class))
    }

    /// Pushes `entry` on top of its class queue, returning the evicted
    /// bottom entry if the queue was full.
    pub fn push(&mut self, entry: FeatureEntry) -> Result<Option<FeatureEntry>, BankError> {
        let (capacity, dim) = (self.capacity, self.feature_dim);
        let class = entry.class;
        let q = self.queue_mut(class)?;
        if entry.feature.len() != dim {
            return Err(BankError::Dimension {
                expected: dim,
                got: entry.feature.len(),
            });
        }
        if let Some(top) = q.back() {
            if entry.iteration < top.iteration {
                return Err(BankError::StampRegression {
                    class,
                    stamp: entry.iteration,
                    newest: top.iteration,
                });
            }
        }
        let evicted = if q.len() == capacity { q.pop_front() } else { None };
        q.push_back(entry);
        Ok(evicted)
    }

    /// Evicts from the bottom until `incoming` pushes fit without further
    /// eviction. Returns the evicted entries, oldest first.
    pub fn make_room(
        &mut self,
        class: ClassId,
        incoming: usize,
    ) -> Result<Vec<FeatureEntry>, BankError> {
        let capacity = self.capacity;
        let q = self.queue_mut(class)?;
        let keep = capacity.saturating_sub(incoming);
        let excess = q.len().saturating_sub(keep);
        Ok(q.drain(..excess).collect())
    }

    /// Draws `x` entries uniformly with replacement. The draw depends only
    /// on the queue contents, `x` and `seed`.
    pub fn sample(&self, class: ClassId, x: usize, seed: u64) -> Result<Vec<&FeatureEntry>, BankError> {
        let q = self.queues.get(&class).ok_or(BankError::NotTargeted(class))?;
        if q.is_empty() {
            return Err(BankError::NotPopulated(class));
        }
        let mut rng = keyed::rng(seed, &[tag::BANK_SAMPLE, class.0]);
        Ok((0..x).map(|_| &q[rng.random_range(0..q.len())]).collect())
    }

    pub fn staleness(&self, class: ClassId, now: u64) -> Result<Staleness, BankError> {
        let q = self.queues.get(&class).ok_or(BankError::NotTargeted(class))?;
        let (Some(oldest), Some(newest)) = (q.front(), q.back()) else {
            return Err(BankError::NotPopulated(class));
        };
        if now < newest.iteration {
            return Err(BankError::FutureEntry {
                class,
                now,
                newest: newest.iteration,
            });
        }
        let sum: u64 = q.iter().map(|e| now - e.iteration).sum();
        Ok(Staleness {
            min: now - newest.iteration,
            mean: sum as f64 / q.len() as f64,
            max: now - oldest.iteration,
        })
    }

    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            version: SNAPSHOT_VERSION,
            capacity: self.capacity,
            feature_dim: self.feature_dim,
            queues: self
                .queues
                .iter()
                .map(|(&class, q)| QueueSnapshot {
                    class,
                    entries: q.iter().cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: BankSnapshot) -> Result<Self, BankError> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(BankError::SnapshotVersion(snap.version));
        }
        if snap.capacity == 0 || snap.feature_dim == 0 {
            return Err(BankError::Snapshot("capacity and feature_dim must be positive".into()));
        }
        let mut queues = BTreeMap::new();
        for qs in snap.queues {
            if qs.entries.len() > snap.capacity {
                return Err(BankError::Snapshot(format!(
                    "class {} holds {} entries, capacity is {}",
                    qs.class,
                    qs.entries.len(),
                    snap.capacity
                )));
            }
            let consistent = qs.entries.iter().all(|e| e.class == qs.class && e.feature.len() == snap.feature_dim)
                && qs.entries.windows(2).all(|w| w[0].iteration <= w[1].iteration);
            if !consistent {
                return Err(BankError::Snapshot(format!("queue of class {} is inconsistent", qs.class)));
            }
            if queues.insert(qs.class, VecDeque::from(qs.entries)).is_some() {
                return Err(BankError::Snapshot(format!("class {} listed twice", qs.class)));
            }
        }
        Ok(Self {
            capacity: snap.capacity,
            feature_dim: snap.feature_dim,
            queues,
        })
    }
}

/// Versioned, serializable bank state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub version: u32,
    pub capacity: usize,
    pub feature_dim: usize,
    pub queues: Vec<QueueSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub class: ClassId,
    /// Oldest first.
    pub entries: Vec<FeatureEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BinThresholds, compute_bins, Dataset, ImageRecord, ObjectAnnotation};

    fn entry(class: u64, iteration: u64) -> FeatureEntry {
        FeatureEntry {
            feature: vec![iteration as f64; 2],
            bbox: BoxXywh::new(0.0, 0.0, 1.0, 1.0),
            class: ClassId(class),
            source_image: ImageId(iteration),
            iteration,
        }
    }

    fn bank(capacity: usize, targets: &[u64]) -> MemoryBank {
        let cfg = BankConfig {
            capacity,
            feature_dim: 2,
            ..BankConfig::default()
        };
        MemoryBank::new(&cfg, &targets.iter().map(|&c| ClassId(c)).collect()).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut b = bank(3, &[1]);
        assert_eq!(b.push(entry(1, 1)), Ok(None));
        assert_eq!(b.len(ClassId(1)), 1);
        assert_eq!(b.push(entry(1, 2)), Ok(None));
        assert_eq!(b.push(entry(1, 3)), Ok(None));
        assert_eq!(b.push(entry(1, 4)), Ok(Some(entry(1, 1))));
        let stamps: Vec<u64> = b.queue(ClassId(1)).unwrap().iter().map(|e| e.iteration).collect();
        assert_eq!(stamps, [2, 3, 4]);
    }

    #[test]
    fn push_errors() {
        let mut b = bank(3, &[1]);
        assert_eq!(b.push(entry(2, 0)), Err(BankError::NotTargeted(ClassId(2))));
        let mut e = entry(1, 0);
        e.feature.push(0.0);
        assert_eq!(b.push(e), Err(BankError::Dimension { expected: 2, got: 3 }));
        b.push(entry(1, 5)).unwrap();
        assert!(matches!(b.push(entry(1, 4)), Err(BankError::StampRegression { .. })));
        assert_eq!(b.len(ClassId(1)), 1);
    }

    #[test]
    fn sample_gate_and_forced_repeat() {
        let mut b = bank(60, &[1]);
        assert_eq!(b.sample(ClassId(1), 20, 0).unwrap_err(), BankError::NotPopulated(ClassId(1)));
        assert_eq!(b.sample(ClassId(8), 20, 0).unwrap_err(), BankError::NotTargeted(ClassId(8)));
        b.push(entry(1, 3)).unwrap();
        let s = b.sample(ClassId(1), 20, 0).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|e| **e == entry(1, 3)));
    }

    #[test]
    fn sample_is_non_destructive_and_deterministic() {
        let mut b = bank(10, &[1]);
        for i in 0..7 {
            b.push(entry(1, i)).unwrap();
        }
        let before = b.snapshot();
        let a: Vec<u64> = b.sample(ClassId(1), 50, 9).unwrap().iter().map(|e| e.iteration).collect();
        let c: Vec<u64> = b.sample(ClassId(1), 50, 9).unwrap().iter().map(|e| e.iteration).collect();
        assert_eq!(a, c);
        assert_eq!(b.snapshot(), before);
    }

    #[test]
    fn staleness_examples() {
        let mut b = bank(10, &[1]);
        assert_eq!(b.staleness(ClassId(1), 0), Err(BankError::NotPopulated(ClassId(1))));
        b.push(entry(1, 5)).unwrap();
        b.push(entry(1, 9)).unwrap();
        assert_eq!(b.staleness(ClassId(1), 10), Ok(Staleness { min: 1, mean: 3.0, max: 5 }));
        assert_eq!(b.staleness(ClassId(1), 9).unwrap().min, 0);
        assert!(matches!(b.staleness(ClassId(1), 8), Err(BankError::FutureEntry { .. })));
    }

    #[test]
    fn staleness_after_overflow_matches_shadow() {
        let v = 60;
        for k in [0usize, 1, 17, 200] {
            let mut b = bank(v, &[1]);
            let mut shadow: Vec<u64> = Vec::new();
            for it in 0..(v + k) as u64 {
                b.push(entry(1, it)).unwrap();
                shadow.push(it);
            }
            let now = (v + k - 1) as u64;
            let kept = &shadow[shadow.len() - v..];
            let s = b.staleness(ClassId(1), now).unwrap();
            assert_eq!(s.max, now - kept[0]);
            assert_eq!(s.max, v as u64 - 1);
            assert_eq!(s.min, 0);
        }
    }

    #[test]
    fn make_room_evicts_oldest() {
        let mut b = bank(4, &[1]);
        for i in 0..4 {
            b.push(entry(1, i)).unwrap();
        }
        let out: Vec<u64> = b.make_room(ClassId(1), 3).unwrap().iter().map(|e| e.iteration).collect();
        assert_eq!(out, [0, 1, 2]);
        for i in 4..7 {
            assert_eq!(b.push(entry(1, i)), Ok(None));
        }
        assert!(b.make_room(ClassId(1), 0).unwrap().is_empty());
        assert_eq!(b.make_room(ClassId(1), 10).unwrap().len(), 4);
    }

    #[test]
    fn snapshot_round_trip_and_validation() {
        let mut b = bank(3, &[1, 2]);
        for i in 0..5 {
            b.push(entry(1 + i % 2, i)).unwrap();
        }
        let json = serde_json::to_string(&b.snapshot()).unwrap();
        let back = MemoryBank::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, b);

        let mut bad = b.snapshot();
        bad.version = 99;
        assert_eq!(MemoryBank::from_snapshot(bad), Err(BankError::SnapshotVersion(99)));
        let mut bad = b.snapshot();
        bad.queues[0].entries.reverse();
        assert!(MemoryBank::from_snapshot(bad).is_err());
        let mut bad = b.snapshot();
        bad.capacity = 1;
        assert!(MemoryBank::from_snapshot(bad).is_err());
    }

    #[test]
    fn targets_by_threshold() {
        let mut records = Vec::new();
        let mut id = 0;
        for (class, images) in [(1u64, 1u64), (2, 10), (3, 11), (4, 30), (5, 31), (6, 150)] {
            for _ in 0..images {
                records.push(ImageRecord {
                    image_id: ImageId(id),
                    width: 5.0,
                    height: 5.0,
                    objects: vec![ObjectAnnotation { class: ClassId(class), bbox: BoxXywh::new(0.0, 0.0, 1.0, 1.0) }],
                });
                id += 1;
            }
        }
        let ds = Dataset::from_records(records);
        let ids = |v: &[u64]| v.iter().map(|&c| ClassId(c)).collect::<BTreeSet<_>>();
        assert_eq!(derive_targets(&ds.index, 30), ids(&[1, 2, 3, 4]));
        let bins = compute_bins(&ds.index, BinThresholds::default());
        assert_eq!(derive_targets(&ds.index, 10), bins.rare);
        assert_eq!(derive_targets(&ds.index, 150), ids(&[1, 2, 3, 4, 5, 6]));
    }

    #[test]
    fn config_validation() {
        for cfg in [
            BankConfig { capacity: 0, ..BankConfig::default() },
            BankConfig { target_threshold: 0, ..BankConfig::default() },
            BankConfig { feature_dim: 0, ..BankConfig::default() },
        ] {
            assert!(matches!(MemoryBank::new(&cfg, &BTreeSet::new()), Err(BankError::Config(_))));
        }
    }
}
