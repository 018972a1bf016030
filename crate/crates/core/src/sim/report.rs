use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::dataset::{Bin, ClassId};
use crate::membank::Staleness;

/// Ages (in iterations) of sampled bank entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeStats {
    pub count: u64,
    pub sum: u64,
    pub min: Option<u64>,
    pub max: Option<u64>,
}

impl AgeStats {
    pub fn record(&mut self, age: u64) {
        self.count += 1;
        self.sum += age;
        self.min = Some(self.min.map_or(age, |m| m.min(age)));
        self.max = Some(self.max.map_or(age, |m| m.max(age)));
    }

    pub fn merge(&mut self, other: &AgeStats) {
        self.count += other.count;
        self.sum += other.sum;
        self.min = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max = match (self.max, other.max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}

/// Static facts about one class, fixed for the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class_id: ClassId,
    pub bin: Bin,
    pub image_count: u64,
    pub instance_count: u64,
    pub targeted: bool,
    pub repeat_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool_version: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_digest: String,
    pub num_images: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub x: usize,
    pub classes: Vec<ClassInfo>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassEpoch {
    pub class_id: ClassId,
    pub gt_instances: u64,
    pub augmented_instances: u64,
    /// Batches in which the class's queue received at least one push.
    pub bank_updates: u64,
    /// Individual entries pushed.
    pub bank_pushes: u64,
    pub distinct_sources_sampled: u64,
    pub sampled_age: AgeStats,
    /// Queue ages at the end of the epoch, if the queue is populated.
    pub queue_staleness: Option<Staleness>,
}

impl ClassEpoch {
    pub fn effective_instances(&self) -> u64 {
        self.gt_instances + self.augmented_instances
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinEpoch {
    pub gt_instances: u64,
    pub augmented_instances: u64,
    pub bank_updates: u64,
    pub bank_pushes: u64,
    pub sampled_age: AgeStats,
}

impl BinEpoch {
    pub fn effective_instances(&self) -> u64 {
        self.gt_instances + self.augmented_instances
    }

    fn add(&mut self, c: &ClassEpoch) {
        self.gt_instances += c.gt_instances;
        self.augmented_instances += c.augmented_instances;
        self.bank_updates += c.bank_updates;
        self.bank_pushes += c.bank_pushes;
        self.sampled_age.merge(&c.sampled_age);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinTotals {
    pub rare: BinEpoch,
    pub common: BinEpoch,
    pub frequent: BinEpoch,
}

impl BinTotals {
    pub fn get(&self, bin: Bin) -> &BinEpoch {
        match bin {
            Bin::Rare => &self.rare,
            Bin::Common => &self.common,
            Bin::Frequent => &self.frequent,
        }
    }

    fn get_mut(&mut self, bin: Bin) -> &mut BinEpoch {
        match bin {
            Bin::Rare => &mut self.rare,
            Bin::Common => &mut self.common,
            Bin::Frequent => &mut self.frequent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    /// Image occurrences processed, including repeats.
    pub images: u64,
    pub iterations: u64,
    /// One entry per class, in the order of `RunMeta::classes`.
    pub classes: Vec<ClassEpoch>,
    pub bins: BinTotals,
}

impl EpochReport {
    pub(crate) fn finish_bins(&mut self, info: &[ClassInfo]) {
        let mut bins = BinTotals::default();
        for (c, i) in self.classes.iter().zip(info) {
            bins.get_mut(i.bin).add(c);
        }
        self.bins = bins;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub meta: RunMeta,
    pub epochs: Vec<EpochReport>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn class_position(&self, class: ClassId) -> Option<usize> {
        self.meta
            .classes
            .binary_search_by_key(&class, |c| c.class_id)
            .ok()
    }

    /// Per-epoch values of `class`.
    pub fn class_series(&self, class: ClassId) -> Option<Vec<&ClassEpoch>> {
        let at = self.class_position(class)?;
        Some(self.epochs.iter().map(|e| &e.classes[at]).collect())
    }

    /// `bin` summed over all epochs.
    pub fn bin_total(&self, bin: Bin) -> BinEpoch {
        let mut out = BinEpoch::default();
        for e in &self.epochs {
            let b = e.bins.get(bin);
            out.gt_instances += b.gt_instances;
            out.augmented_instances += b.augmented_instances;
            out.bank_updates += b.bank_updates;
            out.bank_pushes += b.bank_pushes;
            out.sampled_age.merge(&b.sampled_age);
        }
        out
    }
}
