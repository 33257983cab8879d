//! Sliding-window prediction over whole volumes, label extraction and block
//! downsampling.

use thiserror::Error;

use crate::dice::{dice_report, DiceError, DiceReport};
use crate::ops::{softmax_channels, OpError};
use crate::real::Real;
use crate::unet3d::{forward, UNetError, UNetParams};
use crate::voxelgrid::vvol::ChannelVolume;
use crate::voxelgrid::{Dims5, LabelVolume, ScalarVolume, Shape3, Tensor5, VolumeError};

/// Tiles pushed through the network per forward call.
const TILE_BATCH: usize = 4;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("patch {patch} does not fit in volume {volume}")]
    PatchTooLarge { patch: Shape3, volume: Shape3 },
    #[error("stride {stride} exceeds patch {patch}")]
    StrideTooLarge { stride: Shape3, patch: Shape3 },
    #[error("plan patch {plan} differs from network patch {network}")]
    PatchMismatch { plan: Shape3, network: Shape3 },
    #[error("plan covers {plan}, volume is {volume}")]
    VolumeMismatch { plan: Shape3, volume: Shape3 },
    #[error("downsampling factor must be >= 1")]
    ZeroFactor,
    #[error("volume {volume} is smaller than the downsampling factor {factor}")]
    ExtentSmallerThanFactor { volume: Shape3, factor: usize },
    #[error(transparent)]
    Net(#[from] UNetError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error("no cases to evaluate")]
    NoCases,
}

/// Tile corners covering a volume, and how many tiles cover each voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct TilingPlan {
    pub volume: Shape3,
    pub patch: Shape3,
    pub stride: Shape3,
    /// In x-major, z-minor order.
    pub corners: Vec<[usize; 3]>,
    /// Per voxel, x-fastest.
    pub coverage: Vec<u32>,
}

/// Tile starts on one axis: multiples of `stride`, the last clamped flush
/// with the end.
pub fn axis_positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut c = 0;
    loop {
        out.push(c.min(len - patch));
        if c + patch >= len {
            break;
        }
        c += stride;
    }
    out.dedup();
    out
}

pub fn plan_tiles(volume: Shape3, patch: Shape3, stride: Shape3) -> Result<TilingPlan, InferenceError> {
    let (v, p, s) = (volume.as_array(), patch.as_array(), stride.as_array());
    if (0..3).any(|a| p[a] > v[a]) {
        return Err(InferenceError::PatchTooLarge { patch, volume });
    }
    if (0..3).any(|a| s[a] > p[a]) {
        return Err(InferenceError::StrideTooLarge { stride, patch });
    }
    let axes: [Vec<usize>; 3] = std::array::from_fn(|a| axis_positions(v[a], p[a], s[a]));
    let mut corners = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                corners.push([x, y, z]);
            }
        }
    }
    let mut coverage = vec![0u32; volume.voxel_count()];
    for &[cx, cy, cz] in &corners {
        for z in cz..cz + p[2] {
            for y in cy..cy + p[1] {
                let row = volume.index(cx, y, z);
                coverage[row..row + p[0]].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    Ok(TilingPlan { volume, patch, stride, corners, coverage })
}

/// Default stride: half the patch on each axis.
pub fn default_stride(patch: Shape3) -> Shape3 {
    let h = |n: usize| (n / 2).max(1);
    Shape3::new(h(patch.nx), h(patch.ny), h(patch.nz)).expect("nonzero")
}

/// Per-class probabilities over a volume, class-major, each class x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    shape: Shape3,
    num_classes: usize,
    probs: Vec<f64>,
}

impl PredictionMap {
    pub fn new(shape: Shape3, num_classes: usize, probs: Vec<f64>) -> Result<Self, VolumeError> {
        let expected = shape.voxel_count() * num_classes;
        if probs.len() != expected {
            return Err(VolumeError::LengthMismatch { expected, found: probs.len() });
        }
        if !(1..=255).contains(&num_classes) {
            return Err(VolumeError::InvalidClassCount(num_classes));
        }
        Ok(Self { shape, num_classes, probs })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class(&self, c: usize) -> &[f64] {
        let n = self.shape.voxel_count();
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.class(c)[self.shape.index(x, y, z)]
    }

    pub fn values(&self) -> &[f64] {
        &self.probs
    }

    /// `f32` copy for VVOL output.
    pub fn to_channel_volume(&self) -> Result<ChannelVolume, VolumeError> {
        ChannelVolume::new(self.shape, self.num_classes, self.probs.iter().map(|&p| p as f32).collect())
    }
}

/// Softmax of every tile, averaged over the tiles covering each voxel.
pub fn predict_volume<T: Real>(
    params: &UNetParams<T>,
    volume: &ScalarVolume,
    plan: &TilingPlan,
) -> Result<PredictionMap, InferenceError> {
    let cfg = params.config();
    if plan.patch != cfg.patch {
        return Err(InferenceError::PatchMismatch { plan: plan.patch, network: cfg.patch });
    }
    if plan.volume != volume.shape() {
        return Err(InferenceError::VolumeMismatch { plan: plan.volume, volume: volume.shape() });
    }
    let shape = volume.shape();
    let (l, n) = (cfg.num_classes, shape.voxel_count());
    let p = plan.patch;
    let mut sums = vec![0.0f64; l * n];
    for tiles in plan.corners.chunks(TILE_BATCH) {
        let dims = Dims5::new(tiles.len(), cfg.in_channels, p.nx, p.ny, p.nz);
        let input = Tensor5::from_fn(dims, |b, _, x, y, z| {
            let [cx, cy, cz] = tiles[b];
            T::of(volume.get(cx + x, cy + y, cz + z) as f64)
        });
        let (logits, _) = forward(params, &input)?;
        let (probs, _) = softmax_channels(&logits)?;
        for (b, &[cx, cy, cz]) in tiles.iter().enumerate() {
            for c in 0..l {
                let dst = &mut sums[c * n..(c + 1) * n];
                for x in 0..p.nx {
                    for y in 0..p.ny {
                        for z in 0..p.nz {
                            dst[shape.index(cx + x, cy + y, cz + z)] += probs.get(b, c, x, y, z).as_f64();
                        }
                    }
                }
            }
        }
    }
    for c in 0..l {
        for (s, &k) in sums[c * n..(c + 1) * n].iter_mut().zip(&plan.coverage) {
            *s /= k as f64;
        }
    }
    Ok(PredictionMap::new(shape, l, sums)?)
}

/// Per voxel, the lowest class index attaining the maximum probability.
pub fn argmax_labels(pred: &PredictionMap) -> Result<LabelVolume, VolumeError> {
    let n = pred.shape.voxel_count();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..pred.num_classes {
                if pred.probs[c * n + i] > pred.probs[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(pred.shape, labels, pred.num_classes)
}

/// Segment each case with the network and average the per-class hard DSC
/// over cases.
pub fn evaluate_cases<T: Real>(
    params: &UNetParams<T>,
    cases: &[(ScalarVolume, LabelVolume)],
    class_names: &[String],
    stride: Shape3,
) -> Result<DiceReport, InferenceError> {
    if cases.is_empty() {
        return Err(InferenceError::NoCases);
    }
    let mut reports = Vec::with_capacity(cases.len());
    for (image, truth) in cases {
        let plan = plan_tiles(image.shape(), params.config().patch, stride)?;
        let seg = argmax_labels(&predict_volume(params, image, &plan)?)?;
        reports.push(dice_report(&seg, truth, class_names)?);
    }
    Ok(DiceReport::mean_of(&reports)?)
}

/// Reduction of `factor^3` blocks to single voxels.
pub trait Downsample: Sized {
    fn downsample(&self, factor: usize) -> Result<Self, InferenceError>;
}

/// Output shape and the member ranges of each output voxel.
fn blocks(shape: Shape3, factor: usize) -> Result<Shape3, InferenceError> {
    if factor == 0 {
        return Err(InferenceError::ZeroFactor);
    }
    if shape.as_array().iter().any(|&n| n < factor) {
        return Err(InferenceError::ExtentSmallerThanFactor { volume: shape, factor });
    }
    Ok(Shape3::new(shape.nx.div_ceil(factor), shape.ny.div_ceil(factor), shape.nz.div_ceil(factor))?)
}

fn for_each_block(
    shape: Shape3,
    out: Shape3,
    factor: usize,
    mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>),
) {
    for oz in 0..out.nz {
        for oy in 0..out.ny {
            for ox in 0..out.nx {
                let mut members = (oz * factor..((oz + 1) * factor).min(shape.nz)).flat_map(|z| {
                    (oy * factor..((oy + 1) * factor).min(shape.ny)).flat_map(move |y| {
                        (ox * factor..((ox + 1) * factor).min(shape.nx)).map(move |x| shape.index(x, y, z))
                    })
                });
                f(out.index(ox, oy, oz), &mut members);
            }
        }
    }
}

impl Downsample for ScalarVolume {
    /// Block mean; trailing partial blocks average their actual members.
    fn downsample(&self, factor: usize) -> Result<Self, InferenceError> {
        let out = blocks(self.shape(), factor)?;
        let mut values = vec![0.0f32; out.voxel_count()];
        let src = self.values();
        for_each_block(self.shape(), out, factor, |o, members| {
            let (mut sum, mut count) = (0.0f64, 0usize);
            for i in members {
                sum += src[i] as f64;
                count += 1;
            }
            values[o] = (sum / count as f64) as f32;
        });
        Ok(ScalarVolume::new(out, values)?)
    }
}

impl Downsample for LabelVolume {
    /// Majority vote, ties to the lowest class index.
    fn downsample(&self, factor: usize) -> Result<Self, InferenceError> {
        let out = blocks(self.shape(), factor)?;
        let mut labels = vec![0u8; out.voxel_count()];
        let src = self.labels();
        let mut votes = vec![0usize; self.num_classes()];
        for_each_block(self.shape(), out, factor, |o, members| {
            votes.iter_mut().for_each(|v| *v = 0);
            for i in members {
                votes[src[i] as usize] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            labels[o] = best as u8;
        });
        Ok(LabelVolume::new(out, labels, self.num_classes())?)
    }
}

pub fn downsample<V: Downsample>(volume: &V, factor: usize) -> Result<V, InferenceError> {
    volume.downsample(factor)
}
