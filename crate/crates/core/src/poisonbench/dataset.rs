//! Synthetic identity images and per-class train/test splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine modes summed into each identity's prototype.
const PROTOTYPE_MODES: usize = 4;
const PROTOTYPE_MAX_FREQ: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub image_side: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub intra_class_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_identities: 10,
            samples_per_identity: 60,
            image_side: 16,
            intra_class_noise: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 3 {
            return Err(Error::InvalidConfig(
                "n_identities must be >= 3 (impostor, victim, and a bystander)".into(),
            ));
        }
        if self.image_side < 8 {
            return Err(Error::InvalidConfig("image_side must be >= 8".into()));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::InvalidConfig("samples_per_identity must be positive".into()));
        }
        if !(self.intra_class_noise >= 0.0 && self.intra_class_noise.is_finite()) {
            return Err(Error::InvalidConfig("intra_class_noise must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Square grayscale images with class labels, stored row-major back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    side: usize,
    n_classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(side: usize, n_classes: usize) -> Self {
        Dataset {
            side,
            n_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, image: &[f64], label: usize) {
        assert_eq!(image.len(), self.n_pixels(), "image size");
        assert!(label < self.n_classes, "label out of range");
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let mut d = Dataset::new(self.side, self.n_classes);
        for &i in indices {
            d.push(self.image(i), self.labels[i]);
        }
        d
    }
}

/// Seeded low-frequency pattern rescaled to `[0.2, 0.8]`.
fn prototype(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let modes: Vec<(f64, f64, f64, f64, f64)> = (0..PROTOTYPE_MODES)
        .map(|_| {
            let (fy, fx) = loop {
                let fy = rng.random_range(0..=PROTOTYPE_MAX_FREQ);
                let fx = rng.random_range(0..=PROTOTYPE_MAX_FREQ);
                if fy + fx > 0 {
                    break (fy as f64, fx as f64);
                }
            };
            let amp = rng.random_range(-1.0..1.0);
            let py = rng.random_range(0.0..std::f64::consts::TAU);
            let px = rng.random_range(0.0..std::f64::consts::TAU);
            (fy, fx, amp, py, px)
        })
        .collect();
    let s = side as f64;
    let raw: Vec<f64> = (0..side * side)
        .map(|k| {
            let (r, c) = ((k / side) as f64 + 0.5, (k % side) as f64 + 0.5);
            modes
                .iter()
                .map(|(fy, fx, a, py, px)| {
                    a * (std::f64::consts::PI * fy * r / s + py).cos()
                        * (std::f64::consts::PI * fx * c / s + px).cos()
                })
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| 0.2 + 0.6 * (v - lo) / (hi - lo)).collect()
}

/// Per-identity prototypes, in class order.
pub fn prototypes(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_identities)
        .map(|_| prototype(spec.image_side, &mut rng))
        .collect())
}

/// Every sample is its identity's prototype plus clamped Gaussian pixel noise.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    let protos = prototypes(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let noise = Normal::new(0.0, spec.intra_class_noise)
        .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
    let mut d = Dataset::new(spec.image_side, spec.n_identities);
    let mut img = vec![0.0; spec.image_side * spec.image_side];
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..spec.samples_per_identity {
            for (p, base) in img.iter_mut().zip(proto) {
                let n = if spec.intra_class_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *p = (base + n).clamp(0.0, 1.0);
            }
            d.push(&img, class);
        }
    }
    Ok(d)
}

/// Splits each class independently: `floor(ratio * n)` samples (at least one,
/// leaving at least one) go to train, the rest to test.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut idx = dataset.indices_of(class);
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} sample(s); splitting needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        // The epsilon keeps e.g. 0.7 * 60 from flooring to 41.
        let n_train = ((ratio * idx.len() as f64 + 1e-9).floor() as usize).clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let d = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        assert_eq!(d.len(), 600);
        for c in 0..10 {
            assert_eq!(d.class_count(c), 60);
        }
        assert!(d.image(0).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let spec = SyntheticDatasetSpec {
            intra_class_noise: 0.0,
            samples_per_identity: 5,
            ..Default::default()
        };
        let protos = prototypes(&spec).unwrap();
        let d = generate_dataset(&spec).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.image(i), protos[d.label(i)].as_slice());
        }
        let lo = protos[0].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = protos[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - 0.2).abs() < 1e-12 && (hi - 0.8).abs() < 1e-12);
    }

    #[test]
    fn seeds_change_prototypes() {
        for seed in 0..5u64 {
            let a = prototypes(&SyntheticDatasetSpec { seed, ..Default::default() }).unwrap();
            let b = prototypes(&SyntheticDatasetSpec { seed: seed + 100, ..Default::default() }).unwrap();
            let max_diff = a
                .iter()
                .zip(&b)
                .flat_map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            assert!(max_diff > 0.05);
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticDatasetSpec { n_identities: 2, ..Default::default() };
        assert!(generate_dataset(&bad).is_err());
        let bad = SyntheticDatasetSpec { image_side: 7, ..Default::default() };
        assert!(generate_dataset(&bad).is_err());
    }

    #[test]
    fn split_sizes() {
        let d = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let (train, test) = split(&d, 0.7, 1).unwrap();
        for c in 0..10 {
            assert_eq!(train.class_count(c), 42);
            assert_eq!(test.class_count(c), 18);
        }
        let tiny = generate_dataset(&SyntheticDatasetSpec { samples_per_identity: 2, ..Default::default() }).unwrap();
        let (train, test) = split(&tiny, 0.5, 0).unwrap();
        assert_eq!((train.class_count(0), test.class_count(0)), (1, 1));
        let single = generate_dataset(&SyntheticDatasetSpec { samples_per_identity: 1, ..Default::default() }).unwrap();
        assert!(split(&single, 0.5, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let d = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let (a, _) = split(&d, 0.7, 3).unwrap();
        let (b, _) = split(&d, 0.7, 3).unwrap();
        assert_eq!(a, b);
        let distinct = (10..20u64)
            .map(|s| split(&d, 0.7, s).unwrap().0)
            .filter(|t| *t != a)
            .count();
        assert_eq!(distinct, 10);
    }
}
