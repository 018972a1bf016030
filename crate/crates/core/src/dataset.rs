//! Multi-object annotated datasets and their per-class statistics.
//!
//! A dataset is an ordered list of [`ImageRecord`]s plus a [`DatasetIndex`]
//! holding, per class, the number of distinct images containing it, the
//! number of object instances, and the image fraction `f(c)`. Classes are
//! grouped into rare / common / frequent [`ClassBins`] by image count.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u64);

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box as `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXywh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width
            && self.y + self.h <= height
    }

    /// Intersects the box with `[0,width]×[0,height]`. Boxes that collapse
    /// to zero extent are grown to at least one pixel (or the image extent,
    /// if smaller) so the object still counts.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        let (x, w) = clamp_axis(self.x, self.w, width);
        let (y, h) = clamp_axis(self.y, self.h, height);
        Self { x, y, w, h }
    }
}

fn clamp_axis(start: f64, len: f64, limit: f64) -> (f64, f64) {
    let lo = start.clamp(0.0, limit);
    let hi = (start + len.max(0.0)).clamp(0.0, limit);
    let min_len = limit.min(1.0);
    if hi - lo >= min_len {
        (lo, hi - lo)
    } else {
        let lo = lo.min(limit - min_len);
        (lo, min_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class: ClassId,
    pub bbox: BoxXywh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageRecord {
    /// Distinct classes present in the image, ascending.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.objects.iter().map(|o| o.class).collect()
    }
}

/// Per-class counts stored in a [`DatasetIndex`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub image_count: u64,
    pub instance_count: u64,
    pub image_fraction: f64,
}

/// Immutable per-class statistics of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    num_images: u64,
    classes: Vec<ClassStats>,
}

impl DatasetIndex {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let mut image_count: BTreeMap<ClassId, u64> = BTreeMap::new();
        let mut instance_count: BTreeMap<ClassId, u64> = BTreeMap::new();
        for rec in records {
            for obj in &rec.objects {
                *instance_count.entry(obj.class).or_default() += 1;
            }
            for c in rec.classes() {
                *image_count.entry(c).or_default() += 1;
            }
        }
        let n = records.len() as u64;
        let classes = image_count
            .into_iter()
            .map(|(class_id, images)| ClassStats {
                class_id,
                image_count: images,
                instance_count: instance_count[&class_id],
                image_fraction: images as f64 / n as f64,
            })
            .collect();
        Self {
            num_images: n,
            classes,
        }
    }

    pub fn num_images(&self) -> u64 {
        self.num_images
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// All present classes, ascending by id.
    pub fn classes(&self) -> &[ClassStats] {
        &self.classes
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|s| s.class_id)
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassStats> {
        self.classes
            .binary_search_by_key(&class, |s| s.class_id)
            .ok()
            .map(|i| &self.classes[i])
    }

    pub fn image_count(&self, class: ClassId) -> Option<u64> {
        self.get(class).map(|s| s.image_count)
    }

    pub fn instance_count(&self, class: ClassId) -> Option<u64> {
        self.get(class).map(|s| s.instance_count)
    }

    pub fn image_fraction(&self, class: ClassId) -> Option<f64> {
        self.get(class).map(|s| s.image_fraction)
    }

    /// Canonical JSON: fixed field order, classes sorted by id.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bin {
    Rare,
    Common,
    Frequent,
}

impl Bin {
    pub const ALL: [Bin; 3] = [Bin::Rare, Bin::Common, Bin::Frequent];

    pub fn as_str(self) -> &'static str {
        match self {
            Bin::Rare => "rare",
            Bin::Common => "common",
            Bin::Frequent => "frequent",
        }
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image-count cutoffs: rare is `<= rare_max`, common is
/// `(rare_max, common_max]`, frequent is `> common_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinThresholds {
    rare_max: u64,
    common_max: u64,
}

impl BinThresholds {
    pub fn new(rare_max: u64, common_max: u64) -> Result<Self, DatasetError> {
        if rare_max >= common_max {
            return Err(DatasetError::Thresholds {
                rare_max,
                common_max,
            });
        }
        Ok(Self {
            rare_max,
            common_max,
        })
    }

    pub fn rare_max(&self) -> u64 {
        self.rare_max
    }

    pub fn common_max(&self) -> u64 {
        self.common_max
    }

    pub fn bin_for(&self, image_count: u64) -> Bin {
        if image_count <= self.rare_max {
            Bin::Rare
        } else if image_count <= self.common_max {
            Bin::Common
        } else {
            Bin::Frequent
        }
    }
}

impl Default for BinThresholds {
    fn default() -> Self {
        Self {
            rare_max: 10,
            common_max: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBins {
    pub rare: BTreeSet<ClassId>,
    pub common: BTreeSet<ClassId>,
    pub frequent: BTreeSet<ClassId>,
}

impl ClassBins {
    pub fn bin_of(&self, class: ClassId) -> Option<Bin> {
        if self.rare.contains(&class) {
            Some(Bin::Rare)
        } else if self.common.contains(&class) {
            Some(Bin::Common)
        } else if self.frequent.contains(&class) {
            Some(Bin::Frequent)
        } else {
            None
        }
    }

    pub fn members(&self, bin: Bin) -> &BTreeSet<ClassId> {
        match bin {
            Bin::Rare => &self.rare,
            Bin::Common => &self.common,
            Bin::Frequent => &self.frequent,
        }
    }

    pub fn len(&self) -> usize {
        self.rare.len() + self.common.len() + self.frequent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when every class of `index` is in exactly one bin and no bin
    /// holds anything else.
    pub fn partitions(&self, index: &DatasetIndex) -> bool {
        let disjoint = self.rare.is_disjoint(&self.common)
            && self.rare.is_disjoint(&self.frequent)
            && self.common.is_disjoint(&self.frequent);
        disjoint
            && self.len() == index.num_classes()
            && index.class_ids().all(|c| self.bin_of(c).is_some())
    }
}

pub fn compute_bins(index: &DatasetIndex, thresholds: BinThresholds) -> ClassBins {
    let mut bins = ClassBins::default();
    for s in index.classes() {
        let set = match thresholds.bin_for(s.image_count) {
            Bin::Rare => &mut bins.rare,
            Bin::Common => &mut bins.common,
            Bin::Frequent => &mut bins.frequent,
        };
        set.insert(s.class_id);
    }
    debug_assert!(bins.partitions(index));
    bins
}

/// Per-bin totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub rare: u64,
    pub common: u64,
    pub frequent: u64,
}

impl BinCounts {
    pub fn get(&self, bin: Bin) -> u64 {
        match bin {
            Bin::Rare => self.rare,
            Bin::Common => self.common,
            Bin::Frequent => self.frequent,
        }
    }

    pub fn add(&mut self, bin: Bin, n: u64) {
        match bin {
            Bin::Rare => self.rare += n,
            Bin::Common => self.common += n,
            Bin::Frequent => self.frequent += n,
        }
    }

    pub fn total(&self) -> u64 {
        self.rare + self.common + self.frequent
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceHistogram {
    pub per_class: BTreeMap<ClassId, u64>,
    pub per_bin: BinCounts,
    pub total: u64,
}

impl InstanceHistogram {
    /// Counts every object of every image in `images`, with repetition.
    pub fn tally<'a, I>(images: I, bins: &ClassBins) -> Self
    where
        I: IntoIterator<Item = &'a ImageRecord>,
    {
        let mut hist = Self::default();
        for rec in images {
            for obj in &rec.objects {
                *hist.per_class.entry(obj.class).or_default() += 1;
                if let Some(bin) = bins.bin_of(obj.class) {
                    hist.per_bin.add(bin, 1);
                }
                hist.total += 1;
            }
        }
        hist
    }

    pub fn class(&self, class: ClassId) -> u64 {
        self.per_class.get(&class).copied().unwrap_or(0)
    }
}

/// Instance totals of one pass over the dataset with no resampling.
pub fn instance_histogram(records: &[ImageRecord], bins: &ClassBins) -> InstanceHistogram {
    InstanceHistogram::tally(records, bins)
}

/// Records plus their index, as produced by ingestion or generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn from_records(records: Vec<ImageRecord>) -> Self {
        let index = DatasetIndex::from_records(&records);
        Self { records, index }
    }

    /// SHA-256 over the canonical serialization of the records.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let bytes = serde_json::to_vec(&self.records).expect("records serialize");
        hasher.update(&bytes);
        hex::encode(hasher.finalize())
    }

    pub fn record_lookup(&self) -> HashMap<ImageId, &ImageRecord> {
        self.records.iter().map(|r| (r.image_id, r)).collect()
    }

    /// Serializes as a COCO/LVIS-style JSON document that
    /// [`parse_coco_json`] reads back to an identical dataset.
    pub fn to_coco_json(&self) -> String {
        let images: Vec<CocoImageOut> = self
            .records
            .iter()
            .map(|r| CocoImageOut {
                id: r.image_id.0,
                width: r.width,
                height: r.height,
            })
            .collect();
        let mut annotations = Vec::new();
        for r in &self.records {
            for o in &r.objects {
                annotations.push(CocoAnnotationOut {
                    id: annotations.len() as u64 + 1,
                    image_id: r.image_id.0,
                    category_id: o.class.0,
                    bbox: [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h],
                });
            }
        }
        let categories = self
            .index
            .class_ids()
            .map(|c| CocoCategoryOut { id: c.0 })
            .collect();
        serde_json::to_string(&CocoOut {
            images,
            annotations,
            categories,
        })
        .expect("coco serializes")
    }
}

#[derive(Serialize)]
struct CocoOut {
    images: Vec<CocoImageOut>,
    annotations: Vec<CocoAnnotationOut>,
    categories: Vec<CocoCategoryOut>,
}

#[derive(Serialize)]
struct CocoImageOut {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Serialize)]
struct CocoAnnotationOut {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct CocoCategoryOut {
    id: u64,
}

#[derive(Deserialize)]
struct CocoIn {
    images: Vec<CocoImageIn>,
    annotations: Vec<CocoAnnotationIn>,
    categories: Vec<CocoCategoryIn>,
}

#[derive(Deserialize)]
struct CocoImageIn {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotationIn {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategoryIn {
    id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    LvisCocoJson,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lvis_coco_json" | "lvis" | "coco" => Ok(Self::LvisCocoJson),
            other => Err(format!("unknown annotation format `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Reject out-of-bounds or degenerate boxes instead of clamping them.
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Offender {
    UnknownImage { annotation: u64, image_id: u64 },
    UnknownCategory { annotation: u64, category_id: u64 },
    DuplicateImage { image_id: u64 },
    BadBox { annotation: u64, image_id: u64 },
}

impl fmt::Display for Offender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Offender::UnknownImage {
                annotation,
                image_id,
            } => write!(f, "annotation {annotation}: unknown image_id {image_id}"),
            Offender::UnknownCategory {
                annotation,
                category_id,
            } => write!(
                f,
                "annotation {annotation}: unknown category_id {category_id}"
            ),
            Offender::DuplicateImage { image_id } => write!(f, "duplicate image id {image_id}"),
            Offender::BadBox {
                annotation,
                image_id,
            } => write!(
                f,
                "annotation {annotation}: box out of bounds or degenerate in image {image_id}"
            ),
        }
    }
}

fn list_offenders(offenders: &[Offender]) -> String {
    const SHOWN: usize = 20;
    let mut s = offenders
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ");
    if offenders.len() > SHOWN {
        s.push_str(&format!("; ... and {} more", offenders.len() - SHOWN));
    }
    s
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} invalid reference(s): {}", .0.len(), list_offenders(.0))]
    Validation(Vec<Offender>),
    #[error("bin thresholds require rare_max < common_max (got {rare_max} >= {common_max})")]
    Thresholds { rare_max: u64, common_max: u64 },
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses a COCO/LVIS detection document. Only image ids and sizes,
/// annotation image/category ids and boxes, and category ids are read.
pub fn parse_coco_json(text: &str, opts: IngestOptions) -> Result<Dataset, DatasetError> {
    let raw: CocoIn = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let mut offenders = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::with_capacity(raw.images.len());
    let mut records: Vec<ImageRecord> = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        if slot.insert(img.id, records.len()).is_some() {
            offenders.push(Offender::DuplicateImage { image_id: img.id });
            continue;
        }
        records.push(ImageRecord {
            image_id: ImageId(img.id),
            width: img.width,
            height: img.height,
            objects: Vec::new(),
        });
    }
    let categories: HashSet<u64> = raw.categories.iter().map(|c| c.id).collect();

    for (i, ann) in raw.annotations.iter().enumerate() {
        let annotation = ann.id.unwrap_or(i as u64);
        let Some(&at) = slot.get(&ann.image_id) else {
            offenders.push(Offender::UnknownImage {
                annotation,
                image_id: ann.image_id,
            });
            continue;
        };
        if !categories.contains(&ann.category_id) {
            offenders.push(Offender::UnknownCategory {
                annotation,
                category_id: ann.category_id,
            });
            continue;
        }
        let rec = &mut records[at];
        let [x, y, w, h] = ann.bbox;
        let bbox = BoxXywh::new(x, y, w, h);
        let bbox = if bbox.is_within(rec.width, rec.height) {
            bbox
        } else if opts.strict {
            offenders.push(Offender::BadBox {
                annotation,
                image_id: ann.image_id,
            });
            continue;
        } else {
            bbox.clamped(rec.width, rec.height)
        };
        rec.objects.push(ObjectAnnotation {
            class: ClassId(ann.category_id),
            bbox,
        });
    }

    if !offenders.is_empty() {
        return Err(DatasetError::Validation(offenders));
    }
    Ok(Dataset::from_records(records))
}

pub fn ingest_annotations(
    path: &Path,
    format: AnnotationFormat,
    opts: IngestOptions,
) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        AnnotationFormat::LvisCocoJson => parse_coco_json(&text, opts),
    }
}
