//! Repeat-factor image resampling.
//!
//! Each class gets `r(c) = max(1, sqrt(t / f(c)))` and each image the
//! largest factor among its classes. An epoch repeats image `I`
//! `floor(r(I))` times plus once more with probability `frac(r(I))`, then
//! shuffles the result.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassBins, ClassId, Dataset, ImageId, ImageRecord, InstanceHistogram};
use crate::keyed::{self, tag};

#[derive(Debug, Error, PartialEq)]
pub enum RfsError {
    #[error("image fraction must be positive, got {0}")]
    Domain(f64),
    #[error("repeat threshold t must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("class {0} has no repeat factor in this plan")]
    UnknownClass(ClassId),
    #[error("image {0} is not part of this dataset")]
    UnknownImage(ImageId),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfsConfig {
    pub t: f64,
    pub enabled: bool,
    pub rounding_seed: u64,
}

impl Default for RfsConfig {
    fn default() -> Self {
        Self {
            t: 0.001,
            enabled: true,
            rounding_seed: 0,
        }
    }
}

impl RfsConfig {
    pub fn validate(&self) -> Result<(), RfsError> {
        if self.t > 0.0 && self.t <= 1.0 {
            Ok(())
        } else {
            Err(RfsError::Threshold(self.t))
        }
    }
}

/// `max(1, sqrt(t / f_c))`.
pub fn class_repeat_factor(f_c: f64, t: f64) -> Result<f64, RfsError> {
    if !(f_c > 0.0) {
        return Err(RfsError::Domain(f_c));
    }
    Ok((t / f_c).sqrt().max(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatPlan {
    t: f64,
    class_repeat: BTreeMap<ClassId, f64>,
    image_repeat: BTreeMap<ImageId, f64>,
}

impl RepeatPlan {
    /// Builds the plan from dataset statistics. With `cfg.enabled == false`
    /// every factor is 1 and epochs are plain permutations.
    pub fn build(dataset: &Dataset, cfg: &RfsConfig) -> Result<Self, RfsError> {
        cfg.validate()?;
        let mut class_repeat = BTreeMap::new();
        for s in dataset.index.classes() {
            let r = if cfg.enabled {
                class_repeat_factor(s.image_fraction, cfg.t)?
            } else {
                1.0
            };
            class_repeat.insert(s.class_id, r);
        }
        let mut plan = Self {
            t: cfg.t,
            class_repeat,
            image_repeat: BTreeMap::new(),
        };
        for rec in &dataset.records {
            let r = plan.image_repeat_factor(&rec.classes())?;
            plan.image_repeat.insert(rec.image_id, r);
        }
        Ok(plan)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn class_repeat(&self) -> &BTreeMap<ClassId, f64> {
        &self.class_repeat
    }

    pub fn image_repeat(&self) -> &BTreeMap<ImageId, f64> {
        &self.image_repeat
    }

    pub fn class_factor(&self, class: ClassId) -> Option<f64> {
        self.class_repeat.get(&class).copied()
    }

    pub fn image_factor(&self, image: ImageId) -> Option<f64> {
        self.image_repeat.get(&image).copied()
    }

    /// Largest class factor among `classes`; 1 for an image with no objects.
    pub fn image_repeat_factor(&self, classes: &BTreeSet<ClassId>) -> Result<f64, RfsError> {
        classes.iter().try_fold(1.0f64, |acc, c| {
            self.class_factor(*c)
                .map(|r| acc.max(r))
                .ok_or(RfsError::UnknownClass(*c))
        })
    }

    /// Expected epoch length, `sum_I r(I)`.
    pub fn expected_epoch_len(&self) -> f64 {
        self.image_repeat.values().sum()
    }

    /// Number of copies of `image` in epoch `epoch`.
    pub fn occurrences(&self, image: ImageId, epoch: u64, seed: u64) -> Result<usize, RfsError> {
        let r = self
            .image_factor(image)
            .ok_or(RfsError::UnknownImage(image))?;
        Ok(rounded(r, seed, epoch, image))
    }

    /// The shuffled image multiset for one epoch. Depends only on
    /// `(plan, epoch, seed)`; epochs may be realized in any order or in
    /// parallel.
    pub fn realize_epoch(&self, epoch: u64, seed: u64) -> Vec<ImageId> {
        let mut out = Vec::with_capacity(self.expected_epoch_len().ceil() as usize + 1);
        for (&image, &r) in &self.image_repeat {
            let n = rounded(r, seed, epoch, image);
            out.extend(std::iter::repeat_n(image, n));
        }
        out.shuffle(&mut keyed::rng(seed, &[tag::SHUFFLE, epoch]));
        out
    }
}

/// `floor(r)` plus a keyed Bernoulli draw on `frac(r)`.
fn rounded(r: f64, seed: u64, epoch: u64, image: ImageId) -> usize {
    let whole = r.floor();
    let frac = r - whole;
    let extra = frac > 0.0 && keyed::unit(seed, &[tag::ROUNDING, epoch, image.0]) < frac;
    whole as usize + extra as usize
}

/// Counts every object of every image occurrence in `epoch`.
pub fn epoch_instance_histogram(
    epoch: &[ImageId],
    records: &HashMap<ImageId, &ImageRecord>,
    bins: &ClassBins,
) -> Result<InstanceHistogram, RfsError> {
    let images = epoch
        .iter()
        .map(|id| records.get(id).copied().ok_or(RfsError::UnknownImage(*id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InstanceHistogram::tally(images, bins))
}

/// Writes `class_id,f,r` rows, ascending by class.
pub fn write_class_csv<W: std::io::Write>(
    plan: &RepeatPlan,
    dataset: &Dataset,
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class_id", "f", "r"])?;
    for s in dataset.index.classes() {
        let r = plan.class_factor(s.class_id).unwrap_or(1.0);
        w.write_record([
            s.class_id.to_string(),
            s.image_fraction.to_string(),
            r.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `image_id,r` rows, ascending by image.
pub fn write_image_csv<W: std::io::Write>(plan: &RepeatPlan, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "r"])?;
    for (id, r) in plan.image_repeat() {
        w.write_record([id.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_bins, instance_histogram, BinThresholds, BoxXywh, ObjectAnnotation};

    fn rec(id: u64, classes: &[u64]) -> ImageRecord {
        ImageRecord {
            image_id: ImageId(id),
            width: 10.0,
            height: 10.0,
            objects: classes
                .iter()
                .map(|&c| ObjectAnnotation {
                    class: ClassId(c),
                    bbox: BoxXywh::new(0.0, 0.0, 1.0, 1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn class_factor_examples() {
        assert_eq!(class_repeat_factor(0.001, 0.001), Ok(1.0));
        assert_eq!(class_repeat_factor(0.00025, 0.001), Ok(2.0));
        assert_eq!(class_repeat_factor(0.01, 0.001), Ok(1.0));
        assert_eq!(class_repeat_factor(0.0, 0.001), Err(RfsError::Domain(0.0)));
        assert_eq!(class_repeat_factor(-0.5, 0.001), Err(RfsError::Domain(-0.5)));
        assert!(class_repeat_factor(f64::NAN, 0.001).is_err());
    }

    fn plan_with(factors: &[(u64, f64)]) -> RepeatPlan {
        RepeatPlan {
            t: 0.001,
            class_repeat: factors.iter().map(|&(c, r)| (ClassId(c), r)).collect(),
            image_repeat: BTreeMap::new(),
        }
    }

    #[test]
    fn image_factor_is_max_over_classes() {
        let plan = plan_with(&[(1, 1.0), (2, 3.1623), (3, 1.0)]);
        let set = |ids: &[u64]| ids.iter().map(|&c| ClassId(c)).collect::<BTreeSet<_>>();
        assert_eq!(plan.image_repeat_factor(&set(&[1, 2])), Ok(3.1623));
        assert_eq!(plan.image_repeat_factor(&set(&[])), Ok(1.0));
        assert_eq!(plan.image_repeat_factor(&set(&[1, 3])), Ok(1.0));
        assert_eq!(
            plan.image_repeat_factor(&set(&[1, 9])),
            Err(RfsError::UnknownClass(ClassId(9)))
        );
    }

    #[test]
    fn unit_factors_give_a_permutation() {
        let ds = Dataset::from_records((0..50).map(|i| rec(i, &[1])).collect());
        let plan = RepeatPlan::build(&ds, &RfsConfig::default()).unwrap();
        let mut epoch = plan.realize_epoch(3, 11);
        assert_ne!(epoch, (0..50).map(ImageId).collect::<Vec<_>>());
        epoch.sort();
        assert_eq!(epoch, (0..50).map(ImageId).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_are_reproducible() {
        let mut records: Vec<_> = (0..200).map(|i| rec(i, &[1])).collect();
        records.push(rec(500, &[2, 1]));
        let ds = Dataset::from_records(records);
        let cfg = RfsConfig { t: 0.05, ..RfsConfig::default() };
        let plan = RepeatPlan::build(&ds, &cfg).unwrap();
        assert_eq!(plan.realize_epoch(4, 9), plan.realize_epoch(4, 9));
        assert_ne!(plan.realize_epoch(4, 9), plan.realize_epoch(5, 9));
    }

    #[test]
    fn disabled_plan_is_identity() {
        let ds = Dataset::from_records(vec![rec(0, &[1]), rec(1, &[1, 2]), rec(2, &[])]);
        let plan = RepeatPlan::build(&ds, &RfsConfig { t: 1.0, enabled: false, rounding_seed: 0 }).unwrap();
        assert!(plan.image_repeat().values().all(|&r| r == 1.0));
        let enabled = RepeatPlan::build(&ds, &RfsConfig { t: 1.0, ..RfsConfig::default() }).unwrap();
        assert_eq!(enabled.image_factor(ImageId(2)), Some(1.0));
        assert!(enabled.image_factor(ImageId(1)).unwrap() > 1.0);
    }

    #[test]
    fn rejects_bad_threshold() {
        let ds = Dataset::from_records(vec![rec(0, &[1])]);
        for t in [0.0, -1.0, 1.5] {
            let cfg = RfsConfig { t, ..RfsConfig::default() };
            assert_eq!(RepeatPlan::build(&ds, &cfg), Err(RfsError::Threshold(t)));
        }
    }

    #[test]
    fn histogram_without_repetition_matches_baseline() {
        let ds = Dataset::from_records(vec![rec(0, &[1, 1, 2]), rec(1, &[2]), rec(2, &[])]);
        let bins = compute_bins(&ds.index, BinThresholds::default());
        let plan = RepeatPlan::build(&ds, &RfsConfig { enabled: false, ..RfsConfig::default() }).unwrap();
        let lookup = ds.record_lookup();
        let h = epoch_instance_histogram(&plan.realize_epoch(0, 0), &lookup, &bins).unwrap();
        assert_eq!(h, instance_histogram(&ds.records, &bins));
    }

    #[test]
    fn repeated_image_adds_its_objects() {
        let mut records: Vec<_> = (0..200).map(|i| rec(i, &[1])).collect();
        records.push(rec(999, &[1, 1]));
        let ds = Dataset::from_records(records);
        let bins = compute_bins(&ds.index, BinThresholds::default());
        let lookup = ds.record_lookup();
        let mut epoch: Vec<ImageId> = ds.records.iter().map(|r| r.image_id).collect();
        epoch.push(ImageId(999));
        let h = epoch_instance_histogram(&epoch, &lookup, &bins).unwrap();
        let base = instance_histogram(&ds.records, &bins);
        assert_eq!(h.per_bin.frequent, base.per_bin.frequent + 2);
        assert_eq!(
            epoch_instance_histogram(&[ImageId(12345)], &lookup, &bins),
            Err(RfsError::UnknownImage(ImageId(12345)))
        );
    }

    #[test]
    fn csv_columns() {
        let ds = Dataset::from_records(vec![rec(0, &[1]), rec(1, &[2]), rec(2, &[2])]);
        let plan = RepeatPlan::build(&ds, &RfsConfig { t: 0.5, ..RfsConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_class_csv(&plan, &ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("class_id,f,r"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "1");
        assert_eq!(first[2].parse::<f64>().unwrap(), (0.5f64 * 3.0).sqrt());
        let mut buf = Vec::new();
        write_image_csv(&plan, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("image_id,r\n0,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn factor_clamps_and_is_monotone(f1 in 1e-6f64..=1.0, f2 in 1e-6f64..=1.0, t in 1e-6f64..=1.0) {
                let r1 = class_repeat_factor(f1, t).unwrap();
                let r2 = class_repeat_factor(f2, t).unwrap();
                prop_assert!(r1 >= 1.0 && r2 >= 1.0);
                if f1 >= t { prop_assert_eq!(r1, 1.0); }
                if f1 <= f2 { prop_assert!(r1 >= r2); }
            }

            #[test]
            fn plan_ignores_image_order(
                images in prop::collection::vec(prop::collection::vec(1u64..8, 0..4), 1..40),
                rot in 0usize..40,
            ) {
                let records: Vec<_> = images.iter().enumerate().map(|(i, c)| rec(i as u64, c)).collect();
                let mut rotated = records.clone();
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                rotated.reverse();
                let cfg = RfsConfig { t: 0.3, ..RfsConfig::default() };
                let a = RepeatPlan::build(&Dataset::from_records(records), &cfg).unwrap();
                let b = RepeatPlan::build(&Dataset::from_records(rotated), &cfg).unwrap();
                prop_assert_eq!(a.realize_epoch(2, 5), b.realize_epoch(2, 5));
                prop_assert_eq!(a, b);
            }
        }
    }
}
