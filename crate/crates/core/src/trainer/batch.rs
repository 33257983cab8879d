//! Random sub-volume batches.

use rand::seq::index;
use rand::Rng;

use crate::real::Real;
use crate::voxelgrid::{Dims5, LabelVolume, ScalarVolume, Shape3, Tensor5};

use super::TrainError;

/// A stack of crops with their one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `(B, 1, patch)`.
    pub input: Tensor5<T>,
    /// `(B, L, patch)`.
    pub target: Tensor5<T>,
    /// Source patient of each crop.
    pub patients: Vec<usize>,
    /// Crop corner of each crop.
    pub corners: Vec<[usize; 3]>,
}

fn check_case(i: usize, image: &ScalarVolume, labels: &LabelVolume, patch: Shape3) -> Result<(), TrainError> {
    if image.shape() != labels.shape() {
        return Err(TrainError::CaseShape { patient: i, image: image.shape(), labels: labels.shape() });
    }
    let s = image.shape();
    if s.nx < patch.nx || s.ny < patch.ny || s.nz < patch.nz {
        return Err(TrainError::VolumeSmallerThanPatch { patient: i, volume: s, patch });
    }
    Ok(())
}

/// Number of classes shared by every label volume of `dataset`.
pub(super) fn dataset_classes(dataset: &[(ScalarVolume, LabelVolume)]) -> Result<usize, TrainError> {
    let first = dataset.first().ok_or(TrainError::EmptyDataset)?.1.num_classes();
    if let Some((i, _)) = dataset.iter().enumerate().find(|(_, c)| c.1.num_classes() != first) {
        return Err(TrainError::ClassCount { patient: i, expected: first, found: dataset[i].1.num_classes() });
    }
    Ok(first)
}

/// Write the crop at `corner` of one case into sample `b` of `batch`.
pub(super) fn write_crop<T: Real>(
    image: &ScalarVolume,
    labels: &LabelVolume,
    corner: [usize; 3],
    b: usize,
    input: &mut Tensor5<T>,
    target: &mut Tensor5<T>,
) {
    let d = input.dims();
    let [cx, cy, cz] = corner;
    for x in 0..d.x {
        for y in 0..d.y {
            for z in 0..d.z {
                let (vx, vy, vz) = (cx + x, cy + y, cz + z);
                input.set(b, 0, x, y, z, T::of(image.get(vx, vy, vz) as f64));
                target.set(b, labels.get(vx, vy, vz) as usize, x, y, z, T::one());
            }
        }
    }
}

/// Crop `batch_size` patches at uniformly random corners.
///
/// With `distinct` set the source patients are drawn without replacement;
/// otherwise each crop picks its patient independently.
pub fn sample_batch<T: Real, R: Rng + ?Sized>(
    dataset: &[(ScalarVolume, LabelVolume)],
    patch: Shape3,
    batch_size: usize,
    distinct: bool,
    rng: &mut R,
) -> Result<Batch<T>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
    }
    let l = dataset_classes(dataset)?;
    for (i, (image, labels)) in dataset.iter().enumerate() {
        check_case(i, image, labels, patch)?;
    }
    let patients: Vec<usize> = if distinct {
        if dataset.len() < batch_size {
            return Err(TrainError::TooFewPatients { needed: batch_size, available: dataset.len() });
        }
        index::sample(rng, dataset.len(), batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..dataset.len())).collect()
    };
    let dims = Dims5::new(batch_size, 1, patch.nx, patch.ny, patch.nz);
    let mut input = Tensor5::zeros(dims);
    let mut target = Tensor5::zeros(dims.with_channels(l));
    let mut corners = Vec::with_capacity(batch_size);
    for (b, &p) in patients.iter().enumerate() {
        let (image, labels) = &dataset[p];
        let s = image.shape();
        let corner = [
            rng.random_range(0..=s.nx - patch.nx),
            rng.random_range(0..=s.ny - patch.ny),
            rng.random_range(0..=s.nz - patch.nz),
        ];
        write_crop(image, labels, corner, b, &mut input, &mut target);
        corners.push(corner);
    }
    Ok(Batch { input, target, patients, corners })
}

/// Centre crops of every case, in dataset order.
pub fn center_crops<T: Real>(dataset: &[(ScalarVolume, LabelVolume)], patch: Shape3) -> Result<Batch<T>, TrainError> {
    let l = dataset_classes(dataset)?;
    let dims = Dims5::new(dataset.len(), 1, patch.nx, patch.ny, patch.nz);
    let mut input = Tensor5::zeros(dims);
    let mut target = Tensor5::zeros(dims.with_channels(l));
    let mut corners = Vec::with_capacity(dataset.len());
    for (b, (image, labels)) in dataset.iter().enumerate() {
        check_case(b, image, labels, patch)?;
        let s = image.shape();
        let corner = [(s.nx - patch.nx) / 2, (s.ny - patch.ny) / 2, (s.nz - patch.nz) / 2];
        write_crop(image, labels, corner, b, &mut input, &mut target);
        corners.push(corner);
    }
    Ok(Batch { input, target, patients: (0..dataset.len()).collect(), corners })
}
