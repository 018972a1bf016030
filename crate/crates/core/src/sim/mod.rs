//! Deterministic training-loop simulation.
//!
//! The detector is replaced by [`proxy`] features. Each epoch realizes the
//! image multiset (repeat-factor plan, or a plain permutation), cuts it into
//! batches, and for every batch:
//!
//! 1. samples `x` bank entries for each distinct targeted class present
//!    whose queue is populated, counting them as augmented instances;
//! 2. pushes one fresh entry per targeted-class object in the batch.
//!
//! All counts end up in a [`SimulationReport`].

pub mod compare;
pub mod proxy;
pub mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{BoxXywh, ClassBins, ClassId, Dataset, ImageId};
use crate::keyed::{self, tag};
use crate::membank::{derive_targets, BankConfig, BankError, MemoryBank};
use crate::rfs::{RepeatPlan, RfsConfig, RfsError};

pub use compare::{compare_strategies, Comparison, CompareError};
pub use proxy::{proxy_feature, ProxyConfig};
pub use report::{
    AgeStats, BinEpoch, BinTotals, ClassEpoch, ClassInfo, EpochReport, RunMeta, SimulationReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Rfs,
    Ocs,
    Rio,
    NaiveRepeat,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::Rfs,
        Strategy::Ocs,
        Strategy::Rio,
        Strategy::NaiveRepeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Rfs => "rfs",
            Strategy::Ocs => "ocs",
            Strategy::Rio => "rio",
            Strategy::NaiveRepeat => "naive_repeat",
        }
    }

    pub fn uses_bank(self) -> bool {
        matches!(self, Strategy::Ocs | Strategy::Rio)
    }

    pub fn augments(self) -> bool {
        self.uses_bank() || self == Strategy::NaiveRepeat
    }

    /// Whether image resampling is on by default for this strategy.
    pub fn default_rfs(self) -> bool {
        matches!(self, Strategy::Rfs | Strategy::Rio | Strategy::NaiveRepeat)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s || (s == "naive-repeat" && *st == Strategy::NaiveRepeat))
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected baseline, rfs, ocs, rio or naive_repeat)")
            })
    }
}

/// Order of bank operations inside one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpOrder {
    /// Sample, then dequeue while pushing. A batch never sees its own pushes.
    #[default]
    SampleFirst,
    /// Dequeue room for the batch's pushes, sample, then push.
    DequeueFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub epochs: u64,
    /// Samples drawn per present targeted class per batch.
    pub x: usize,
    pub rfs: RfsConfig,
    pub bank: BankConfig,
    pub proxy: ProxyConfig,
    pub op_order: OpOrder,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_strategy(Strategy::Rio)
    }
}

impl SimConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            batch_size: 16,
            epochs: 1,
            x: 20,
            rfs: RfsConfig {
                enabled: strategy.default_rfs(),
                ..RfsConfig::default()
            },
            bank: BankConfig::default(),
            proxy: ProxyConfig::default(),
            op_order: OpOrder::default(),
            seed: 0,
        }
    }

    /// Switches strategy and aligns `rfs.enabled` with it.
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self.rfs.enabled = strategy.default_rfs();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        match (self.strategy, self.rfs.enabled) {
            (Strategy::Baseline | Strategy::Ocs, true) => {
                return bad(format!("strategy {} requires image resampling to be disabled", self.strategy))
            }
            (Strategy::Rfs | Strategy::Rio, false) => {
                return bad(format!("strategy {} requires image resampling to be enabled", self.strategy))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.x == 0 {
            return bad("x must be positive".into());
        }
        if self.bank.feature_dim != self.proxy.feature_dim {
            return bad(format!(
                "bank feature_dim {} differs from proxy feature_dim {}",
                self.bank.feature_dim, self.proxy.feature_dim
            ));
        }
        self.rfs.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.bank.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.proxy.validate().map_err(SimError::Config)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the config and bins.
    pub fn hash(&self, bins: &ClassBins) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(serde_json::to_vec(bins).expect("bins serialize"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("class {0} is not assigned to any bin")]
    Unbinned(ClassId),
    #[error(transparent)]
    Rfs(#[from] RfsError),
    #[error(transparent)]
    Bank(#[from] BankError),
}

/// One sampled bank entry, as logged by [`run_traced`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub epoch: u64,
    pub iteration: u64,
    pub class_id: ClassId,
    pub source_image: ImageId,
    pub age: u64,
    /// Iterations since the class's first push.
    pub since_first_push: u64,
    /// Distance from the sampled feature to the class center at `iteration`.
    pub distance_to_center: f64,
}

pub fn run(dataset: &Dataset, bins: &ClassBins, cfg: &SimConfig) -> Result<SimulationReport, SimError> {
    Simulator::new(dataset, bins, cfg, false)?.run()
}

/// Like [`run`], also returning every bank sample drawn.
pub fn run_traced(
    dataset: &Dataset,
    bins: &ClassBins,
    cfg: &SimConfig,
) -> Result<(SimulationReport, Vec<SampleEvent>), SimError> {
    let mut sim = Simulator::new(dataset, bins, cfg, true)?;
    let report = sim.run_epochs()?;
    Ok((report, sim.trace))
}

struct Simulator<'a> {
    dataset: &'a Dataset,
    cfg: &'a SimConfig,
    plan: RepeatPlan,
    bank: MemoryBank,
    targets: BTreeSet<ClassId>,
    meta: RunMeta,
    /// Position of each class in `meta.classes`.
    slot: HashMap<ClassId, usize>,
    first_push: HashMap<ClassId, u64>,
    iteration: u64,
    tracing: bool,
    trace: Vec<SampleEvent>,
}

impl<'a> Simulator<'a> {
    fn new(dataset: &'a Dataset, bins: &ClassBins, cfg: &'a SimConfig, tracing: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        if dataset.records.is_empty() {
            return Err(SimError::EmptyDataset);
        }
        let plan = RepeatPlan::build(dataset, &cfg.rfs)?;
        let targets = derive_targets(&dataset.index, cfg.bank.target_threshold);
        let bank_targets = if cfg.strategy.uses_bank() {
            targets.clone()
        } else {
            BTreeSet::new()
        };
        let bank = MemoryBank::new(&cfg.bank, &bank_targets)?;
        let mut classes = Vec::with_capacity(dataset.index.num_classes());
        for s in dataset.index.classes() {
            classes.push(ClassInfo {
                class_id: s.class_id,
                bin: bins.bin_of(s.class_id).ok_or(SimError::Unbinned(s.class_id))?,
                image_count: s.image_count,
                instance_count: s.instance_count,
                targeted: targets.contains(&s.class_id),
                repeat_factor: plan.class_factor(s.class_id).unwrap_or(1.0),
            });
        }
        let slot = classes.iter().enumerate().map(|(i, c)| (c.class_id, i)).collect();
        let meta = RunMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            strategy: cfg.strategy,
            seed: cfg.seed,
            config_hash: cfg.hash(bins),
            dataset_digest: dataset.digest(),
            num_images: dataset.index.num_images(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            x: cfg.x,
            classes,
        };
        Ok(Self {
            dataset,
            cfg,
            plan,
            bank,
            targets,
            meta,
            slot,
            first_push: HashMap::new(),
            iteration: 0,
            tracing,
            trace: Vec::new(),
        })
    }

    fn run(mut self) -> Result<SimulationReport, SimError> {
        self.run_epochs()
    }

    fn run_epochs(&mut self) -> Result<SimulationReport, SimError> {
        let lookup = self.dataset.record_lookup();
        let epoch_seed = keyed::mix(self.cfg.seed, &[self.cfg.rfs.rounding_seed]);
        let mut epochs = Vec::with_capacity(self.cfg.epochs as usize);
        for epoch in 0..self.cfg.epochs {
            let images = self.plan.realize_epoch(epoch, epoch_seed);
            let mut classes: Vec<ClassEpoch> = self
                .meta
                .classes
                .iter()
                .map(|c| ClassEpoch {
                    class_id: c.class_id,
                    ..ClassEpoch::default()
                })
                .collect();
            let mut sources: BTreeMap<usize, BTreeSet<ImageId>> = BTreeMap::new();
            let start = self.iteration;
            for batch in images.chunks(self.cfg.batch_size) {
                self.step(epoch, batch, &lookup, &mut classes, &mut sources)?;
                self.iteration += 1;
            }
            for (at, set) in sources {
                classes[at].distinct_sources_sampled = set.len() as u64;
            }
            if self.cfg.strategy.uses_bank() {
                let now = self.iteration.saturating_sub(1);
                for c in classes.iter_mut().filter(|c| self.bank.is_populated(c.class_id)) {
                    c.queue_staleness = Some(self.bank.staleness(c.class_id, now)?);
                }
            }
            let mut report = EpochReport {
                epoch,
                images: images.len() as u64,
                iterations: self.iteration - start,
                classes,
                bins: BinTotals::default(),
            };
            report.finish_bins(&self.meta.classes);
            epochs.push(report);
        }
        Ok(SimulationReport {
            meta: self.meta.clone(),
            epochs,
        })
    }

    fn step(
        &mut self,
        epoch: u64,
        batch: &[ImageId],
        lookup: &HashMap<ImageId, &crate::dataset::ImageRecord>,
        classes: &mut [ClassEpoch],
        sources: &mut BTreeMap<usize, BTreeSet<ImageId>>,
    ) -> Result<(), SimError> {
        let it = self.iteration;
        let strategy = self.cfg.strategy;
        // Targeted objects in batch order: these are the batch's pushes.
        let mut pushes: BTreeMap<ClassId, Vec<(ImageId, BoxXywh)>> = BTreeMap::new();
        for id in batch {
            let rec = lookup[id];
            for obj in &rec.objects {
                classes[self.slot[&obj.class]].gt_instances += 1;
                if self.targets.contains(&obj.class) {
                    pushes.entry(obj.class).or_default().push((rec.image_id, obj.bbox));
                }
            }
        }
        if !strategy.augments() {
            return Ok(());
        }

        if strategy.uses_bank() && self.cfg.op_order == OpOrder::DequeueFirst {
            for (&class, list) in &pushes {
                self.bank.make_room(class, list.len())?;
            }
        }

        let x = self.cfg.x;
        for &class in pushes.keys() {
            let at = self.slot[&class];
            if strategy == Strategy::NaiveRepeat {
                // copies of the batch's own features: age 0, no bank sources
                classes[at].augmented_instances += x as u64;
                for _ in 0..x {
                    classes[at].sampled_age.record(0);
                }
                continue;
            }
            let sample_seed = keyed::mix(self.cfg.seed, &[tag::BANK_SAMPLE, it]);
            let drawn = match self.bank.sample(class, x, sample_seed) {
                Ok(d) => d,
                Err(BankError::NotPopulated(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            classes[at].augmented_instances += x as u64;
            let set = sources.entry(at).or_default();
            let center = self
                .tracing
                .then(|| proxy::center(class, it, &self.cfg.proxy, self.cfg.seed));
            for e in drawn {
                let age = it - e.iteration;
                classes[at].sampled_age.record(age);
                set.insert(e.source_image);
                if let Some(center) = &center {
                    self.trace.push(SampleEvent {
                        epoch,
                        iteration: it,
                        class_id: class,
                        source_image: e.source_image,
                        age,
                        since_first_push: it - self.first_push[&class],
                        distance_to_center: proxy::distance(&e.feature, center),
                    });
                }
            }
        }

        if strategy.uses_bank() {
            for (class, list) in pushes {
                let at = self.slot[&class];
                classes[at].bank_updates += 1;
                self.first_push.entry(class).or_insert(it);
                for (image, bbox) in list {
                    let entry = proxy_feature(class, it, image, bbox, &self.cfg.proxy, self.cfg.seed);
                    self.bank.push(entry)?;
                    classes[at].bank_pushes += 1;
                }
            }
        }
        Ok(())
    }
}
