//! Image-level and object-level resampling for long-tailed detection data.
//!
//! The crate computes repeat-factor image resampling plans, runs an
//! object-centric memory bank over a simulated training loop, and reports
//! how each strategy reshapes per-class instance counts, bank update
//! frequency, and feature staleness.

pub mod cli;
pub mod dataset;
pub mod keyed;
pub mod membank;
pub mod reference;
pub mod rfs;
pub mod sim;
pub mod synth;

pub use dataset::{
    compute_bins, ingest_annotations, instance_histogram, parse_coco_json, AnnotationFormat, Bin,
    BinCounts, BinThresholds, BoxXywh, ClassBins, ClassId, ClassStats, Dataset, DatasetError,
    DatasetIndex, ImageId, ImageRecord, IngestOptions, InstanceHistogram, ObjectAnnotation,
};
pub use membank::{derive_targets, BankConfig, FeatureEntry, MemoryBank};
pub use rfs::{class_repeat_factor, epoch_instance_histogram, RepeatPlan, RfsConfig};
pub use sim::{compare_strategies, run, SimConfig, SimulationReport, Strategy};
pub use synth::{generate, SynthConfig};
