//! The desk-scale reference scenario used by the analyses and the CLI's
//! synthetic defaults.

use crate::dataset::{compute_bins, BinThresholds, ClassBins, Dataset};
use crate::sim::{SimConfig, Strategy};
use crate::synth::{self, SynthConfig, SynthError};

/// Repeat threshold for the reference dataset: the rare-bin boundary
/// (10 images) over 5,000 images.
pub const RFS_T: f64 = 0.002;

/// About the length of a 90k-iteration, batch-16 schedule over LVIS v0.5.
pub const EPOCHS: u64 = 25;

pub const SEED: u64 = 7;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        num_classes: 200,
        num_images: 5_000,
        zipf_exponent: 1.4,
        objects_per_image: (1, 8),
        cooccurrence_bias: 0.7,
        seed: SEED,
    }
}

pub fn dataset() -> Result<(Dataset, ClassBins), SynthError> {
    let ds = synth::generate(&synth_config())?;
    let bins = compute_bins(&ds.index, BinThresholds::default());
    Ok((ds, bins))
}

pub fn sim_config(strategy: Strategy) -> SimConfig {
    let mut cfg = SimConfig::for_strategy(strategy);
    cfg.rfs.t = RFS_T;
    cfg.epochs = EPOCHS;
    cfg.seed = SEED;
    cfg
}
