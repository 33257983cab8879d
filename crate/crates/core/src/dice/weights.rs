//! Class-frequency balancing weights.
//!
//! With `N` the total voxel count of the training set, `L` the number of
//! classes and `|R_l|` the voxel count of class `l`:
//!
//! | scheme  | weight                     |
//! |---------|----------------------------|
//! | uniform | `1`                        |
//! | simple  | `N / (L |R_l| + eps)`      |
//! | square  | `N / (L |R_l|^2 + eps)`    |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DiceError;
use crate::voxelgrid::LabelVolume;

/// Default additive constant in the weight denominators.
pub const EPSILON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Uniform,
    Simple,
    Square,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [WeightScheme::Uniform, WeightScheme::Simple, WeightScheme::Square];

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Simple => "simple",
            WeightScheme::Square => "square",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "simple" => Ok(WeightScheme::Simple),
            "square" => Ok(WeightScheme::Square),
            other => Err(format!("unknown weighting scheme '{other}' (expected uniform, simple or square)")),
        }
    }
}

/// Voxel count per class plus the grand total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    per_class: Vec<u64>,
    total: u64,
}

impl ClassCounts {
    pub fn new(per_class: Vec<u64>) -> Result<Self, DiceError> {
        if per_class.len() < 2 {
            return Err(DiceError::TooFewClasses(per_class.len()));
        }
        let total = per_class.iter().sum();
        Ok(Self { per_class, total })
    }

    pub fn per_class(&self) -> &[u64] {
        &self.per_class
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }
}

/// Count voxels per class over a collection of label volumes.
pub fn class_counts<'a>(
    num_classes: usize,
    volumes: impl IntoIterator<Item = &'a LabelVolume>,
) -> Result<ClassCounts, DiceError> {
    let mut per_class = vec![0u64; num_classes];
    for v in volumes {
        if v.num_classes() != num_classes {
            return Err(DiceError::ClassMismatch { expected: num_classes, found: v.num_classes() });
        }
        for &l in v.labels() {
            per_class[l as usize] += 1;
        }
    }
    ClassCounts::new(per_class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    scheme: WeightScheme,
    weights: Vec<f64>,
    epsilon: f64,
}

impl ClassWeights {
    /// Explicit weights; every entry must be positive and finite.
    pub fn from_values(scheme: WeightScheme, weights: Vec<f64>, epsilon: f64) -> Result<Self, DiceError> {
        if weights.len() < 2 {
            return Err(DiceError::TooFewClasses(weights.len()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(DiceError::NonFinite(i));
        }
        Ok(Self { scheme, weights, epsilon })
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights(counts: &ClassCounts, scheme: WeightScheme, epsilon: f64) -> ClassWeights {
    let n = counts.total() as f64;
    let l = counts.num_classes() as f64;
    let weights = counts
        .per_class()
        .iter()
        .map(|&r| {
            let r = r as f64;
            match scheme {
                WeightScheme::Uniform => 1.0,
                WeightScheme::Simple => n / (l * r + epsilon),
                WeightScheme::Square => n / (l * r * r + epsilon),
            }
        })
        .collect();
    ClassWeights { scheme, weights, epsilon }
}
