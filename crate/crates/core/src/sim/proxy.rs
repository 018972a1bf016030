//! Stand-in for a detector's RoI features.
//!
//! Each class has a fixed prototype and a unit drift direction. The feature
//! computed for a class at iteration `t` is
//! `prototype + drift_rate * t * direction + N(0, noise_sigma^2)`, so
//! features stored earlier sit further from the current class center the
//! older they are.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{BoxXywh, ClassId, ImageId};
use crate::keyed::{self, tag};
use crate::membank::FeatureEntry;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub feature_dim: usize,
    pub class_prototype_scale: f64,
    /// Center displacement per iteration.
    pub drift_rate: f64,
    pub noise_sigma: f64,
    /// Box perturbation as a fraction of box size.
    pub box_jitter: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            class_prototype_scale: 1.0,
            drift_rate: 1e-3,
            noise_sigma: 1e-2,
            box_jitter: 0.05,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.feature_dim == 0 {
            return Err("proxy feature_dim must be at least 1".into());
        }
        let reals = [
            ("class_prototype_scale", self.class_prototype_scale),
            ("drift_rate", self.drift_rate),
            ("noise_sigma", self.noise_sigma),
            ("box_jitter", self.box_jitter),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("proxy {name} must be a non-negative finite number"));
            }
        }
        Ok(())
    }
}

fn gaussian_vec(seed: u64, key: &[u64], dim: usize) -> Vec<f64> {
    let mut rng = keyed::rng(seed, key);
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn prototype(class: ClassId, proxy: &ProxyConfig, seed: u64) -> Vec<f64> {
    gaussian_vec(seed, &[tag::PROTOTYPE, class.0], proxy.feature_dim)
        .into_iter()
        .map(|v| v * proxy.class_prototype_scale)
        .collect()
}

/// Unit-norm drift direction of `class`.
pub fn direction(class: ClassId, proxy: &ProxyConfig, seed: u64) -> Vec<f64> {
    let v = gaussian_vec(seed, &[tag::DIRECTION, class.0], proxy.feature_dim);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.into_iter().map(|a| a / norm).collect()
    } else {
        let mut e = vec![0.0; proxy.feature_dim];
        e[0] = 1.0;
        e
    }
}

/// Noise-free class feature at `iteration`.
pub fn center(class: ClassId, iteration: u64, proxy: &ProxyConfig, seed: u64) -> Vec<f64> {
    let shift = proxy.drift_rate * iteration as f64;
    prototype(class, proxy, seed)
        .into_iter()
        .zip(direction(class, proxy, seed))
        .map(|(p, d)| p + shift * d)
        .collect()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Feature and jittered box for one object seen at `iteration`.
pub fn proxy_feature(
    class: ClassId,
    iteration: u64,
    source_image: ImageId,
    source_box: BoxXywh,
    proxy: &ProxyConfig,
    seed: u64,
) -> FeatureEntry {
    let key = [
        tag::NOISE,
        class.0,
        iteration,
        source_image.0,
        source_box.x.to_bits(),
        source_box.y.to_bits(),
        source_box.w.to_bits(),
        source_box.h.to_bits(),
    ];
    let mut rng = keyed::rng(seed, &key);
    let mut feature = center(class, iteration, proxy, seed);
    if proxy.noise_sigma > 0.0 {
        for v in &mut feature {
            *v += proxy.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let bbox = if proxy.box_jitter > 0.0 {
        let j = proxy.box_jitter;
        let mut u = || rng.random_range(-j..=j);
        let (dx, dy, sw, sh) = (u(), u(), u(), u());
        BoxXywh::new(
            source_box.x + dx * source_box.w,
            source_box.y + dy * source_box.h,
            (source_box.w * (1.0 + sw)).max(f64::MIN_POSITIVE),
            (source_box.h * (1.0 + sh)).max(f64::MIN_POSITIVE),
        )
    } else {
        source_box
    };
    FeatureEntry {
        feature,
        bbox,
        class,
        source_image,
        iteration,
    }
}
