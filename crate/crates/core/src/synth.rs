//! Seeded synthetic long-tailed multi-object datasets.
//!
//! Class `k` (1-based rank) is drawn with Zipf weight `k^-s`. The top tenth
//! of ranks form the *head*; with probability `cooccurrence_bias`, an image
//! that contains only tail classes also receives a head-class object, which
//! reproduces the rare-with-frequent co-occurrence that makes image-level
//! resampling inflate frequent classes.
//!
//! All randomness comes from one ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64(seed)` and consumed in image order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BoxXywh, ClassId, Dataset, ImageId, ImageRecord, ObjectAnnotation};

const IMAGE_WIDTH: f64 = 640.0;
const IMAGE_HEIGHT: f64 = 480.0;
const MIN_BOX_SIDE: f64 = 8.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error("infeasible config: {num_classes} classes cannot all fit in {num_images} images of at most {max_objects} objects")]
    Infeasible {
        num_classes: usize,
        num_images: usize,
        max_objects: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_images: usize,
    pub zipf_exponent: f64,
    /// Inclusive `(min, max)` objects per image.
    pub objects_per_image: (usize, usize),
    /// Probability that a tail-only image also receives a head-class object.
    pub cooccurrence_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The reference dataset used throughout the analyses.
    fn default() -> Self {
        Self {
            num_classes: 200,
            num_images: 5_000,
            zipf_exponent: 1.4,
            objects_per_image: (1, 8),
            cooccurrence_bias: 0.7,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (min, max) = self.objects_per_image;
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.num_classes < 3 {
            return bad("num_classes must be at least 3");
        }
        if self.num_images == 0 {
            return bad("num_images must be positive");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be a positive finite number");
        }
        if min < 1 || min > max {
            return bad("objects_per_image must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.cooccurrence_bias) {
            return bad("cooccurrence_bias must lie in [0, 1]");
        }
        if self.cooccurrence_bias > 0.0 && max < 2 {
            return bad("cooccurrence_bias > 0 needs room for two objects per image");
        }
        if self.num_classes > self.num_images.saturating_mul(max) {
            return Err(SynthError::Infeasible {
                num_classes: self.num_classes,
                num_images: self.num_images,
                max_objects: max,
            });
        }
        Ok(())
    }

    /// Number of head ranks: the top tenth, at least one.
    pub fn head_len(&self) -> usize {
        self.num_classes.div_ceil(10).max(1)
    }

    pub fn is_head(&self, class: ClassId) -> bool {
        class.0 >= 1 && class.0 as usize <= self.head_len()
    }

    pub fn class_of_rank(rank: usize) -> ClassId {
        ClassId(rank as u64)
    }
}

struct Sampler<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    all: Zipf<f64>,
    head: Zipf<f64>,
}

impl Sampler<'_> {
    fn class(&mut self) -> ClassId {
        SynthConfig::class_of_rank(self.all.sample(&mut self.rng) as usize)
    }

    fn head_class(&mut self) -> ClassId {
        SynthConfig::class_of_rank(self.head.sample(&mut self.rng) as usize)
    }

    fn object(&mut self, class: ClassId) -> ObjectAnnotation {
        let w = self.side(IMAGE_WIDTH);
        let h = self.side(IMAGE_HEIGHT);
        let x = self.rng.random_range(0.0..=IMAGE_WIDTH - w);
        let y = self.rng.random_range(0.0..=IMAGE_HEIGHT - h);
        ObjectAnnotation {
            class,
            bbox: BoxXywh::new(x, y, w, h),
        }
    }

    /// Log-uniform side length in `[MIN_BOX_SIDE, extent / 2]`.
    fn side(&mut self, extent: f64) -> f64 {
        let (lo, hi) = (MIN_BOX_SIDE.ln(), (extent / 2.0).ln());
        self.rng.random_range(lo..=hi).exp()
    }

    fn image(&mut self, id: usize) -> ImageRecord {
        let (min, max) = self.cfg.objects_per_image;
        let k = self.rng.random_range(min..=max);
        let mut objects: Vec<ObjectAnnotation> = (0..k)
            .map(|_| {
                let c = self.class();
                self.object(c)
            })
            .collect();
        let tail_only = objects.iter().all(|o| !self.cfg.is_head(o.class));
        if tail_only && self.rng.random::<f64>() < self.cfg.cooccurrence_bias {
            let c = self.head_class();
            let o = self.object(c);
            if objects.len() < max {
                objects.push(o);
            } else {
                // every slot is tail, so at least one tail object survives
                *objects.last_mut().expect("k >= 1") = o;
            }
        }
        ImageRecord {
            image_id: ImageId(id as u64 + 1),
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
            objects,
        }
    }
}

/// Generates a dataset for `cfg`. Identical configs give identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let invalid = |e: rand_distr::ZipfError| SynthError::Invalid(e.to_string());
    let mut sampler = Sampler {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        all: Zipf::new(cfg.num_classes as f64, cfg.zipf_exponent).map_err(invalid)?,
        head: Zipf::new(cfg.head_len() as f64, cfg.zipf_exponent).map_err(invalid)?,
    };
    let mut records: Vec<ImageRecord> = (0..cfg.num_images).map(|i| sampler.image(i)).collect();
    ensure_coverage(&mut sampler, &mut records);
    Ok(Dataset::from_records(records))
}

/// Places every class that received no image into some image, preferring
/// images that already hold a head object and have a free slot.
fn ensure_coverage(sampler: &mut Sampler<'_>, records: &mut [ImageRecord]) {
    let cfg = sampler.cfg;
    let max = cfg.objects_per_image.1;
    let mut images_with = vec![0usize; cfg.num_classes + 1];
    for rec in records.iter() {
        for c in rec.classes() {
            images_with[c.0 as usize] += 1;
        }
    }
    for rank in 1..=cfg.num_classes {
        if images_with[rank] > 0 {
            continue;
        }
        let class = SynthConfig::class_of_rank(rank);
        let open: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].objects.len() < max)
            .collect();
        let with_head: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&i| records[i].objects.iter().any(|o| cfg.is_head(o.class)))
            .collect();
        let pool = if with_head.is_empty() { &open } else { &with_head };
        let obj = sampler.object(class);
        if !pool.is_empty() {
            let at = pool[sampler.rng.random_range(0..pool.len())];
            records[at].objects.push(obj);
            images_with[rank] += 1;
            continue;
        }
        // Every image is full. Overwrite a non-head object whose class
        // stays present elsewhere (or twice in this image).
        // Prefer slots whose loss keeps the image's head co-occurrence.
        let mut candidates = Vec::new();
        let mut fallback = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            for (j, o) in rec.objects.iter().enumerate() {
                let c = o.class;
                let twice_here = rec.objects.iter().filter(|p| p.class == c).count() > 1;
                if !(twice_here || images_with[c.0 as usize] > 1) {
                    continue;
                }
                let head_count = rec.objects.iter().filter(|p| cfg.is_head(p.class)).count();
                if !cfg.is_head(c) || head_count > 1 {
                    candidates.push((i, j));
                } else {
                    fallback.push((i, j));
                }
            }
        }
        if candidates.is_empty() {
            candidates = fallback;
        }
        let (i, j) = candidates[sampler.rng.random_range(0..candidates.len())];
        let old = records[i].objects[j].class;
        let twice_here = records[i].objects.iter().filter(|p| p.class == old).count() > 1;
        if !twice_here {
            images_with[old.0 as usize] -= 1;
        }
        records[i].objects[j] = obj;
        images_with[rank] += 1;
    }
}
