//! Dense voxel containers.
//!
//! Two layouts coexist and are never mixed up implicitly:
//!
//! * [`ScalarVolume`] and [`LabelVolume`] store voxels **x-fastest**:
//!   `index = x + nx * (y + ny * z)`. This is also the on-disk order of the
//!   VVOL format (see [`vvol`]).
//! * [`Tensor5`] stores `(batch, channel, x, y, z)` **z-fastest** within each
//!   channel, channel-major within each sample:
//!   `index = (((b * C + c) * X + x) * Y + y) * Z + z`.
//!
//! Volumes reject non-finite intensities and out-of-range labels at
//! construction.

pub mod vvol;

use thiserror::Error;

use crate::real::Real;

pub use vvol::{read_volume, write_volume, Volume};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid shape {nx}x{ny}x{nz}: every extent must be >= 1 and the voxel count addressable")]
    InvalidShape { nx: usize, ny: usize, nz: usize },
    #[error("payload has {found} values but the shape requires {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite value {value} at voxel {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("label {label} at voxel {index} is outside [0, {num_classes})")]
    LabelOutOfRange { index: usize, label: u8, num_classes: usize },
    #[error("number of classes must be in [1, 255], got {0}")]
    InvalidClassCount(usize),
    #[error("bad magic {found:?}, expected \"VVOL\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported VVOL version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown VVOL dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: expected {expected}, file holds {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },
    #[error("class count mismatch: expected {expected}, file declares {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("{found} trailing bytes after payload")]
    TrailingBytes { found: usize },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape3, Shape3),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel extents of a 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Shape3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, VolumeError> {
        let count = nx.checked_mul(ny).and_then(|v| v.checked_mul(nz));
        match count {
            Some(c) if nx >= 1 && ny >= 1 && nz >= 1 && c <= isize::MAX as usize => Ok(Self { nx, ny, nz }),
            _ => Err(VolumeError::InvalidShape { nx, ny, nz }),
        }
    }

    pub fn cube(n: usize) -> Result<Self, VolumeError> {
        Self::new(n, n, n)
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Flat x-fastest index.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Shape3::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.nx;
        let rest = index / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(a[0], a[1], a[2])
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Real-valued intensity volume, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    shape: Shape3,
    values: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(shape: Shape3, values: Vec<f32>) -> Result<Self, VolumeError> {
        if values.len() != shape.voxel_count() {
            return Err(VolumeError::LengthMismatch { expected: shape.voxel_count(), found: values.len() });
        }
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index, value: *v as f64 });
        }
        Ok(Self { shape, values })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self, VolumeError> {
        Self::new(shape, vec![value; shape.voxel_count()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.shape.index(x, y, z)]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Integer class-id volume, x-fastest. Every label is in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(shape: Shape3, labels: Vec<u8>, num_classes: usize) -> Result<Self, VolumeError> {
        if !(1..=255).contains(&num_classes) {
            return Err(VolumeError::InvalidClassCount(num_classes));
        }
        if labels.len() != shape.voxel_count() {
            return Err(VolumeError::LengthMismatch { expected: shape.voxel_count(), found: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(VolumeError::LabelOutOfRange { index, label, num_classes });
        }
        Ok(Self { shape, labels, num_classes })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.shape.index(x, y, z)]
    }
}

/// Dimensions of a [`Tensor5`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims5 {
    pub batch: usize,
    pub channels: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims5 {
    pub fn new(batch: usize, channels: usize, x: usize, y: usize, z: usize) -> Self {
        Self { batch, channels, x, y, z }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.spatial_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn with_spatial(self, s: [usize; 3]) -> Self {
        Self { x: s[0], y: s[1], z: s[2], ..self }
    }

    /// Flat z-fastest index.
    #[inline]
    pub fn index(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(b < self.batch && c < self.channels);
        debug_assert!(x < self.x && y < self.y && z < self.z);
        (((b * self.channels + c) * self.x + x) * self.y + y) * self.z + z
    }
}

impl std::fmt::Display for Dims5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.batch, self.channels, self.x, self.y, self.z)
    }
}

/// Dense `(batch, channel, x, y, z)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    dims: Dims5,
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(dims: Dims5) -> Self {
        Self { dims, data: vec![T::zero(); dims.len()] }
    }

    pub fn filled(dims: Dims5, value: T) -> Self {
        Self { dims, data: vec![value; dims.len()] }
    }

    pub fn from_vec(dims: Dims5, data: Vec<T>) -> Result<Self, VolumeError> {
        if data.len() != dims.len() {
            return Err(VolumeError::LengthMismatch { expected: dims.len(), found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims5, mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.batch {
            for c in 0..dims.channels {
                for x in 0..dims.x {
                    for y in 0..dims.y {
                        for z in 0..dims.z {
                            data.push(f(b, c, x, y, z));
                        }
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims5 {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(b, c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(b, c, x, y, z);
        self.data[i] = v;
    }

    /// Contiguous `x*y*z` block of one channel of one sample.
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let s = self.dims.spatial_len();
        let start = (b * self.dims.channels + c) * s;
        &self.data[start..start + s]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let s = self.dims.spatial_len();
        let start = (b * self.dims.channels + c) * s;
        &mut self.data[start..start + s]
    }

    /// All channels of one sample, contiguous.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.dims.channels * self.dims.spatial_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.dims.channels * self.dims.spatial_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// Element type conversion through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 { dims: self.dims, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum in `f64` in storage order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }
}

/// Encode a label volume as a `(1, L, nx, ny, nz)` indicator tensor.
pub fn one_hot<T: Real>(labels: &LabelVolume) -> Tensor5<T> {
    let s = labels.shape();
    let l = labels.num_classes();
    let dims = Dims5::new(1, l, s.nx, s.ny, s.nz);
    let mut out = Tensor5::zeros(dims);
    for z in 0..s.nz {
        for y in 0..s.ny {
            for x in 0..s.nx {
                let c = labels.get(x, y, z) as usize;
                out.set(0, c, x, y, z, T::one());
            }
        }
    }
    out
}

/// Copy a scalar volume into a `(1, 1, nx, ny, nz)` tensor.
pub fn volume_to_tensor<T: Real>(volume: &ScalarVolume) -> Tensor5<T> {
    let s = volume.shape();
    Tensor5::from_fn(Dims5::new(1, 1, s.nx, s.ny, s.nz), |_, _, x, y, z| T::of(volume.get(x, y, z) as f64))
}
