//! Trigger patches and the copy / trigger / relabel / append poisoning step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TriggerKind {
    SolidSquare { value: f64 },
    /// Alternating pattern; `values.0` sits at the patch origin.
    Checkerboard { values: (f64, f64) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    At { row: usize, col: usize },
    Center,
    CornerTl,
    CornerBr,
    /// A fixed position drawn uniformly from the valid range with this seed.
    RandomFixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub size: usize,
    pub location: Placement,
}

impl TriggerSpec {
    /// Top-left corner of the patch in a `side x side` image.
    pub fn origin(&self, side: usize) -> Result<(usize, usize)> {
        let out_of_bounds = |row, col| Error::TriggerOutOfBounds {
            size: self.size,
            row,
            col,
            side,
        };
        if self.size == 0 || self.size > side {
            return Err(out_of_bounds(0, 0));
        }
        let max = side - self.size;
        let (row, col) = match self.location {
            Placement::At { row, col } => (row, col),
            Placement::Center => (max / 2, max / 2),
            Placement::CornerTl => (0, 0),
            Placement::CornerBr => (max, max),
            Placement::RandomFixed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (rng.random_range(0..=max), rng.random_range(0..=max))
            }
        };
        if row > max || col > max {
            return Err(out_of_bounds(row, col));
        }
        Ok((row, col))
    }

    fn value_at(&self, dr: usize, dc: usize) -> f64 {
        match self.kind {
            TriggerKind::SolidSquare { value } => value,
            TriggerKind::Checkerboard { values } => {
                if (dr + dc).is_multiple_of(2) {
                    values.0
                } else {
                    values.1
                }
            }
        }
    }
}

/// Returns a copy of `image` with the trigger patch overwritten.
pub fn apply_trigger(image: &[f64], side: usize, trigger: &TriggerSpec) -> Result<Vec<f64>> {
    let mut out = image.to_vec();
    apply_trigger_in_place(&mut out, side, trigger)?;
    Ok(out)
}

pub(crate) fn apply_trigger_in_place(image: &mut [f64], side: usize, trigger: &TriggerSpec) -> Result<()> {
    assert_eq!(image.len(), side * side, "image size");
    let (row, col) = trigger.origin(side)?;
    for dr in 0..trigger.size {
        for dc in 0..trigger.size {
            image[(row + dr) * side + col + dc] = trigger.value_at(dr, dc);
        }
    }
    Ok(())
}

/// A one-to-one backdoor: triggered impostor samples are relabeled as the victim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub impostor: usize,
    pub victim: usize,
    pub trigger: TriggerSpec,
    pub n_poison: usize,
}

impl PoisonSpec {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.impostor == self.victim {
            return Err(Error::InvalidConfig("impostor and victim must differ".into()));
        }
        if self.impostor >= data.n_classes() || self.victim >= data.n_classes() {
            return Err(Error::InvalidConfig(format!(
                "classes must be < {}",
                data.n_classes()
            )));
        }
        if self.n_poison == 0 {
            return Err(Error::InvalidConfig("n_poison must be positive".into()));
        }
        let available = data.class_count(self.impostor);
        if self.n_poison > available {
            return Err(Error::InvalidConfig(format!(
                "n_poison = {} exceeds the impostor's {available} training samples",
                self.n_poison
            )));
        }
        self.trigger.origin(data.side())?;
        Ok(())
    }
}

/// Selects `n_poison` impostor samples without replacement, copies them,
/// applies the trigger, relabels them as the victim and appends them.
pub fn poison_dataset(train: &Dataset, spec: &PoisonSpec, seed: u64) -> Result<Dataset> {
    spec.validate(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = train.indices_of(spec.impostor);
    let chosen = rand::seq::index::sample(&mut rng, candidates.len(), spec.n_poison);
    let mut out = train.clone();
    for k in chosen.iter() {
        let img = apply_trigger(train.image(candidates[k]), train.side(), &spec.trigger)?;
        out.push(&img, spec.victim);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisonbench::dataset::{generate_dataset, SyntheticDatasetSpec};

    fn gray(side: usize) -> Vec<f64> {
        (0..side * side).map(|k| 0.3 + 0.001 * k as f64).collect()
    }

    #[test]
    fn solid_patch_overwrites_only_the_patch() {
        let img = gray(8);
        let t = TriggerSpec {
            kind: TriggerKind::SolidSquare { value: 1.0 },
            size: 3,
            location: Placement::At { row: 0, col: 0 },
        };
        let out = apply_trigger(&img, 8, &t).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let k = r * 8 + c;
                if r < 3 && c < 3 {
                    assert_eq!(out[k], 1.0);
                } else {
                    assert_eq!(out[k].to_bits(), img[k].to_bits());
                }
            }
        }
        assert_eq!(img, gray(8));
        assert_eq!(apply_trigger(&out, 8, &t).unwrap(), out);
    }

    #[test]
    fn checkerboard_parity() {
        let t = TriggerSpec {
            kind: TriggerKind::Checkerboard { values: (0.0, 1.0) },
            size: 2,
            location: Placement::At { row: 0, col: 0 },
        };
        let out = apply_trigger(&gray(8), 8, &t).unwrap();
        assert_eq!([out[0], out[1], out[8], out[9]], [0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn placements_resolve_inside_the_image() {
        let mk = |location| TriggerSpec {
            kind: TriggerKind::SolidSquare { value: 1.0 },
            size: 4,
            location,
        };
        assert_eq!(mk(Placement::Center).origin(16).unwrap(), (6, 6));
        assert_eq!(mk(Placement::CornerBr).origin(16).unwrap(), (12, 12));
        assert_eq!(mk(Placement::CornerTl).origin(16).unwrap(), (0, 0));
        for seed in 0..20 {
            let (r, c) = mk(Placement::RandomFixed(seed)).origin(16).unwrap();
            assert!(r <= 12 && c <= 12);
        }
        assert!(matches!(
            mk(Placement::At { row: 13, col: 0 }).origin(16),
            Err(Error::TriggerOutOfBounds { .. })
        ));
    }

    fn small_train() -> Dataset {
        generate_dataset(&SyntheticDatasetSpec { samples_per_identity: 20, ..Default::default() }).unwrap()
    }

    #[test]
    fn poisoning_appends_triggered_victim_samples() {
        let train = small_train();
        let spec = PoisonSpec {
            impostor: 2,
            victim: 5,
            trigger: TriggerSpec {
                kind: TriggerKind::SolidSquare { value: 1.0 },
                size: 3,
                location: Placement::CornerBr,
            },
            n_poison: 10,
        };
        let out = poison_dataset(&train, &spec, 4).unwrap();
        assert_eq!(out.len(), train.len() + 10);
        for i in 0..train.len() {
            assert_eq!(out.image(i), train.image(i));
            assert_eq!(out.label(i), train.label(i));
        }
        for i in train.len()..out.len() {
            assert_eq!(out.label(i), 5);
            let img = out.image(i);
            for r in 13..16 {
                for c in 13..16 {
                    assert_eq!(img[r * 16 + c], 1.0);
                }
            }
        }
        assert_eq!(out, poison_dataset(&train, &spec, 4).unwrap());
    }

    #[test]
    fn poison_spec_validation() {
        let train = small_train();
        let base = PoisonSpec {
            impostor: 1,
            victim: 1,
            trigger: TriggerSpec {
                kind: TriggerKind::SolidSquare { value: 1.0 },
                size: 3,
                location: Placement::Center,
            },
            n_poison: 5,
        };
        assert!(poison_dataset(&train, &base, 0).is_err());
        let too_many = PoisonSpec { victim: 2, n_poison: 21, ..base };
        assert!(poison_dataset(&train, &too_many, 0).is_err());
    }
}
