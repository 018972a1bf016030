//! Side-by-side tables over several simulation reports.
//!
//! All quantities are per-epoch means. Relative changes are against the
//! first report. CSV schemas:
//!
//! * `fig4a.csv` (ground-truth instances per class):
//!   `report,strategy,class_id,bin,image_count,gt_per_epoch`
//! * `fig4b.csv` (instances per bin):
//!   `report,strategy,bin,gt_per_epoch,augmented_per_epoch,effective_per_epoch,gt_change_pct,effective_change_pct`
//! * `fig4c.csv` (bank update frequency, rare classes):
//!   `report,strategy,class_id,image_count,instance_count,bank_updates_per_epoch,bank_pushes_per_epoch`
//! * `fig4d.csv` (effective instances per class):
//!   `report,strategy,class_id,bin,image_count,gt_per_epoch,augmented_per_epoch,effective_per_epoch`
//! * `staleness.csv` (sampled entry ages per bin):
//!   `report,strategy,bin,sampled_per_epoch,mean_age,max_age,distinct_sources_per_epoch`

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::report::SimulationReport;
use super::Strategy;
use crate::dataset::{Bin, ClassId};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("no reports to compare")]
    Empty,
    #[error("report {index} is incompatible with report 0: {}", fields.join(", "))]
    Mismatch { index: usize, fields: Vec<String> },
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassGtRow {
    pub report: usize,
    pub strategy: Strategy,
    pub class_id: ClassId,
    pub bin: Bin,
    pub image_count: u64,
    pub gt_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinRow {
    pub report: usize,
    pub strategy: Strategy,
    pub bin: Bin,
    pub gt_per_epoch: f64,
    pub augmented_per_epoch: f64,
    pub effective_per_epoch: f64,
    pub gt_change_pct: f64,
    pub effective_change_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateRow {
    pub report: usize,
    pub strategy: Strategy,
    pub class_id: ClassId,
    pub image_count: u64,
    pub instance_count: u64,
    pub bank_updates_per_epoch: f64,
    pub bank_pushes_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassEffectiveRow {
    pub report: usize,
    pub strategy: Strategy,
    pub class_id: ClassId,
    pub bin: Bin,
    pub image_count: u64,
    pub gt_per_epoch: f64,
    pub augmented_per_epoch: f64,
    pub effective_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StalenessRow {
    pub report: usize,
    pub strategy: Strategy,
    pub bin: Bin,
    pub sampled_per_epoch: f64,
    pub mean_age: Option<f64>,
    pub max_age: Option<u64>,
    pub distinct_sources_per_epoch: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub fig4a: Vec<ClassGtRow>,
    pub fig4b: Vec<BinRow>,
    pub fig4c: Vec<UpdateRow>,
    pub fig4d: Vec<ClassEffectiveRow>,
    pub staleness: Vec<StalenessRow>,
}

fn mismatches(a: &SimulationReport, b: &SimulationReport) -> Vec<String> {
    let mut out = Vec::new();
    if a.meta.dataset_digest != b.meta.dataset_digest {
        out.push(format!(
            "dataset_digest ({} vs {})",
            a.meta.dataset_digest, b.meta.dataset_digest
        ));
    }
    if a.meta.epochs != b.meta.epochs {
        out.push(format!("epochs ({} vs {})", a.meta.epochs, b.meta.epochs));
    }
    if a.meta.num_images != b.meta.num_images {
        out.push(format!("num_images ({} vs {})", a.meta.num_images, b.meta.num_images));
    }
    let key = |r: &SimulationReport| {
        r.meta
            .classes
            .iter()
            .map(|c| (c.class_id, c.bin))
            .collect::<Vec<_>>()
    };
    if key(a) != key(b) {
        out.push("class bins".into());
    }
    out
}

fn pct_change(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        100.0 * (value - reference) / reference
    }
}

pub fn compare_strategies(reports: &[SimulationReport]) -> Result<Comparison, CompareError> {
    let first = reports.first().ok_or(CompareError::Empty)?;
    for (index, r) in reports.iter().enumerate().skip(1) {
        let fields = mismatches(first, r);
        if !fields.is_empty() {
            return Err(CompareError::Mismatch { index, fields });
        }
    }

    let epochs = first.meta.epochs as f64;
    let per_epoch = |v: u64| v as f64 / epochs;
    let mut out = Comparison::default();
    let reference: Vec<_> = Bin::ALL.iter().map(|&b| first.bin_total(b)).collect();

    for (ri, r) in reports.iter().enumerate() {
        let strategy = r.meta.strategy;
        for (bi, &bin) in Bin::ALL.iter().enumerate() {
            let t = r.bin_total(bin);
            let base = &reference[bi];
            out.fig4b.push(BinRow {
                report: ri,
                strategy,
                bin,
                gt_per_epoch: per_epoch(t.gt_instances),
                augmented_per_epoch: per_epoch(t.augmented_instances),
                effective_per_epoch: per_epoch(t.effective_instances()),
                gt_change_pct: pct_change(t.gt_instances as f64, base.gt_instances as f64),
                effective_change_pct: pct_change(
                    t.effective_instances() as f64,
                    base.effective_instances() as f64,
                ),
            });
            let sources: u64 = r
                .epochs
                .iter()
                .flat_map(|e| e.classes.iter().zip(&r.meta.classes))
                .filter(|(_, info)| info.bin == bin)
                .map(|(c, _)| c.distinct_sources_sampled)
                .sum();
            out.staleness.push(StalenessRow {
                report: ri,
                strategy,
                bin,
                sampled_per_epoch: per_epoch(t.sampled_age.count),
                mean_age: t.sampled_age.mean(),
                max_age: t.sampled_age.max,
                distinct_sources_per_epoch: per_epoch(sources),
            });
        }

        for (at, info) in r.meta.classes.iter().enumerate() {
            let (mut gt, mut aug, mut upd, mut pushes) = (0, 0, 0, 0);
            for e in &r.epochs {
                let c = &e.classes[at];
                gt += c.gt_instances;
                aug += c.augmented_instances;
                upd += c.bank_updates;
                pushes += c.bank_pushes;
            }
            out.fig4a.push(ClassGtRow {
                report: ri,
                strategy,
                class_id: info.class_id,
                bin: info.bin,
                image_count: info.image_count,
                gt_per_epoch: per_epoch(gt),
            });
            out.fig4d.push(ClassEffectiveRow {
                report: ri,
                strategy,
                class_id: info.class_id,
                bin: info.bin,
                image_count: info.image_count,
                gt_per_epoch: per_epoch(gt),
                augmented_per_epoch: per_epoch(aug),
                effective_per_epoch: per_epoch(gt + aug),
            });
            if info.bin == Bin::Rare {
                out.fig4c.push(UpdateRow {
                    report: ri,
                    strategy,
                    class_id: info.class_id,
                    image_count: info.image_count,
                    instance_count: info.instance_count,
                    bank_updates_per_epoch: per_epoch(upd),
                    bank_pushes_per_epoch: per_epoch(pushes),
                });
            }
        }
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CompareError> {
    let io = |source| CompareError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))?;
    Ok(())
}

impl Comparison {
    pub const FILES: [&'static str; 5] = [
        "fig4a.csv",
        "fig4b.csv",
        "fig4c.csv",
        "fig4d.csv",
        "staleness.csv",
    ];

    /// Writes the five tables into `dir`, returning the paths written.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>, CompareError> {
        let paths: Vec<PathBuf> = Self::FILES.iter().map(|f| dir.join(f)).collect();
        write_rows(&paths[0], &self.fig4a)?;
        write_rows(&paths[1], &self.fig4b)?;
        write_rows(&paths[2], &self.fig4c)?;
        write_rows(&paths[3], &self.fig4d)?;
        write_rows(&paths[4], &self.staleness)?;
        Ok(paths)
    }

    pub fn bin_row(&self, report: usize, bin: Bin) -> Option<&BinRow> {
        self.fig4b.iter().find(|r| r.report == report && r.bin == bin)
    }
}
