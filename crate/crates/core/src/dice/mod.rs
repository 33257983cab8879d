//! Dice overlap: the hard metric, the differentiable soft loss with its
//! analytic gradient, class-frequency balancing weights, and the weighted
//! multi-class loss used for training.
//!
//! The soft loss for one channel is
//!
//! ```text
//! L = -2 A / B,   A = sum_i s_i r_i,   B = sum_i s_i + sum_i r_i
//! ```
//!
//! and its derivative with respect to a prediction `s_j` is
//!
//! ```text
//! dL/ds_j = -2 (r_j B - A) / B^2
//! ```
//!
//! `B` is clamped from below at [`DENOMINATOR_GUARD`], which only matters for
//! channels that are empty in both prediction and target; those yield loss 0
//! and gradient 0.

mod report;
mod weights;

use thiserror::Error;

use crate::real::Real;
use crate::voxelgrid::{Dims5, LabelVolume, Shape3, Tensor5};

pub use report::{dice_report, percent, DiceReport, ReportTable};
pub use weights::{class_counts, class_weights, ClassCounts, ClassWeights, WeightScheme, EPSILON};

/// Lower bound applied to the soft-Dice denominator.
pub const DENOMINATOR_GUARD: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum DiceError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error("tensor dims mismatch: {0} vs {1}")]
    DimsMismatch(Dims5, Dims5),
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("class id {class_id} outside [0, {num_classes})")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("at least 2 classes are required, got {0}")]
    TooFewClasses(usize),
    #[error("prediction and target lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite input at element {0}")]
    NonFinite(usize),
    #[error("{found} class names given for {expected} classes")]
    NameCount { expected: usize, found: usize },
}

/// Hard Dice `2|S n R| / (|S| + |R|)` of one class; `1.0` if the class is
/// absent from both volumes.
pub fn hard_dsc(seg: &LabelVolume, truth: &LabelVolume, class_id: usize) -> Result<f64, DiceError> {
    if seg.shape() != truth.shape() {
        return Err(DiceError::ShapeMismatch(seg.shape(), truth.shape()));
    }
    if seg.num_classes() != truth.num_classes() {
        return Err(DiceError::ClassMismatch { expected: truth.num_classes(), found: seg.num_classes() });
    }
    if class_id >= truth.num_classes() {
        return Err(DiceError::ClassOutOfRange { class_id, num_classes: truth.num_classes() });
    }
    let c = class_id as u8;
    let (mut s, mut r, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in seg.labels().iter().zip(truth.labels()) {
        let (in_s, in_r) = (a == c, b == c);
        s += in_s as u64;
        r += in_r as u64;
        both += (in_s && in_r) as u64;
    }
    if s + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (s + r) as f64)
}

/// Running sums of one soft-Dice channel.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Overlap {
    intersection: f64,
    denominator: f64,
}

impl Overlap {
    fn accumulate<T: Real>(s: &[T], r: &[T], acc: &mut Self) {
        for (&si, &ri) in s.iter().zip(r) {
            let (si, ri) = (si.as_f64(), ri.as_f64());
            acc.intersection += si * ri;
            acc.denominator += si + ri;
        }
    }

    fn guarded(&self) -> f64 {
        self.denominator.max(DENOMINATOR_GUARD)
    }

    fn loss(&self) -> f64 {
        -2.0 * self.intersection / self.guarded()
    }

    #[inline]
    fn grad(&self, r: f64) -> f64 {
        let b = self.guarded();
        -2.0 * (r * b - self.intersection) / (b * b)
    }
}

fn check_pair<T: Real>(s: &[T], r: &[T]) -> Result<(), DiceError> {
    if s.len() != r.len() {
        return Err(DiceError::LengthMismatch(s.len(), r.len()));
    }
    if s.is_empty() {
        return Err(DiceError::Empty);
    }
    if let Some(i) = s.iter().chain(r).position(|v| !v.is_finite()) {
        return Err(DiceError::NonFinite(i % s.len()));
    }
    Ok(())
}

fn overlap<T: Real>(s: &[T], r: &[T]) -> Result<Overlap, DiceError> {
    check_pair(s, r)?;
    let mut o = Overlap { intersection: 0.0, denominator: 0.0 };
    Overlap::accumulate(s, r, &mut o);
    Ok(o)
}

/// Soft Dice loss `-2 sum(s r) / (sum s + sum r)`, in `[-1, 0]`.
pub fn soft_dice_loss<T: Real>(s: &[T], r: &[T]) -> Result<f64, DiceError> {
    Ok(overlap(s, r)?.loss())
}

/// Gradient of [`soft_dice_loss`] with respect to every `s_j`.
pub fn soft_dice_grad<T: Real>(s: &[T], r: &[T]) -> Result<Vec<f64>, DiceError> {
    let o = overlap(s, r)?;
    Ok(r.iter().map(|&rj| o.grad(rj.as_f64())).collect())
}

/// Output of [`multiclass_dice_loss`].
#[derive(Debug, Clone)]
pub struct MulticlassDice<T> {
    /// `(1/L) sum_l w_l L_DSC(l)`.
    pub loss: f64,
    /// Derivative of `loss` with respect to every prediction element.
    pub grad: Tensor5<T>,
    /// Unweighted soft-Dice loss of every class, in `[-1, 0]`.
    pub per_class: Vec<f64>,
}

impl<T> MulticlassDice<T> {
    /// Soft DSC per class (the negated per-class loss).
    pub fn soft_dsc(&self) -> Vec<f64> {
        self.per_class.iter().map(|l| -l).collect()
    }
}

/// Weighted multi-class soft-Dice loss over a whole batch.
///
/// Each class sums its overlap over every sample and voxel of the batch.
pub fn multiclass_dice_loss<T: Real>(
    pred: &Tensor5<T>,
    target: &Tensor5<T>,
    weights: &ClassWeights,
) -> Result<MulticlassDice<T>, DiceError> {
    let d = pred.dims();
    if d != target.dims() {
        return Err(DiceError::DimsMismatch(d, target.dims()));
    }
    let l = d.channels;
    if weights.len() != l {
        return Err(DiceError::ClassMismatch { expected: weights.len(), found: l });
    }
    if d.is_empty() {
        return Err(DiceError::Empty);
    }
    if let Some(i) = pred.as_slice().iter().chain(target.as_slice()).position(|v| !v.is_finite()) {
        return Err(DiceError::NonFinite(i % d.len()));
    }
    let mut overlaps = vec![Overlap { intersection: 0.0, denominator: 0.0 }; l];
    for b in 0..d.batch {
        for (c, o) in overlaps.iter_mut().enumerate() {
            Overlap::accumulate(pred.channel(b, c), target.channel(b, c), o);
        }
    }
    let per_class: Vec<f64> = overlaps.iter().map(Overlap::loss).collect();
    let inv_l = 1.0 / l as f64;
    let loss = per_class.iter().zip(weights.values()).map(|(lc, w)| w * lc).sum::<f64>() * inv_l;
    let mut grad = Tensor5::zeros(d);
    for b in 0..d.batch {
        for (c, o) in overlaps.iter().enumerate() {
            let scale = weights.values()[c] * inv_l;
            let r = target.channel(b, c);
            for (g, &rj) in grad.channel_mut(b, c).iter_mut().zip(r) {
                *g = T::of(scale * o.grad(rj.as_f64()));
            }
        }
    }
    Ok(MulticlassDice { loss, grad, per_class })
}

/// Per-class soft-Dice overlap pooled over any number of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledOverlap {
    classes: Vec<Overlap>,
}

impl PooledOverlap {
    pub fn new(num_classes: usize) -> Self {
        Self { classes: vec![Overlap { intersection: 0.0, denominator: 0.0 }; num_classes] }
    }

    pub fn add<T: Real>(&mut self, pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<(), DiceError> {
        let d = pred.dims();
        if d != target.dims() {
            return Err(DiceError::DimsMismatch(d, target.dims()));
        }
        if d.channels != self.classes.len() {
            return Err(DiceError::ClassMismatch { expected: self.classes.len(), found: d.channels });
        }
        for b in 0..d.batch {
            for (c, o) in self.classes.iter_mut().enumerate() {
                check_pair(pred.channel(b, c), target.channel(b, c))?;
                Overlap::accumulate(pred.channel(b, c), target.channel(b, c), o);
            }
        }
        Ok(())
    }

    /// Soft DSC `2A / B` of every class over everything added so far.
    pub fn soft_dsc(&self) -> Vec<f64> {
        self.classes.iter().map(|o| -o.loss()).collect()
    }
}
