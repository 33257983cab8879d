//! VVOL: a minimal little-endian binary volume format.
//!
//! ```text
//! offset size field
//!      0    4 magic "VVOL"
//!      4    1 version (1)
//!      5    1 dtype: 0 = f32 scalar, 1 = u8 label
//!      6    1 num_classes: label class count; for dtype 0, 0 = single channel,
//!             c >= 1 = c-channel map stored class-major
//!      7    1 reserved (0)
//!      8    4 nx (u32)
//!     12    4 ny (u32)
//!     16    4 nz (u32)
//!     20    . payload, x-fastest
//! ```

use std::fs;
use std::path::Path;

use super::{LabelVolume, ScalarVolume, Shape3, VolumeError};

pub const MAGIC: [u8; 4] = *b"VVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Several f32 channels over one grid, channel-major, each channel x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVolume {
    shape: Shape3,
    channels: usize,
    values: Vec<f32>,
}

impl ChannelVolume {
    pub fn new(shape: Shape3, channels: usize, values: Vec<f32>) -> Result<Self, VolumeError> {
        if !(1..=255).contains(&channels) {
            return Err(VolumeError::InvalidClassCount(channels));
        }
        let expected = shape.voxel_count() * channels;
        if values.len() != expected {
            return Err(VolumeError::LengthMismatch { expected, found: values.len() });
        }
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index, value: *v as f64 });
        }
        Ok(Self { shape, channels, values })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.voxel_count();
        &self.values[c * n..(c + 1) * n]
    }
}

/// Any volume a VVOL file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Channels(ChannelVolume),
}

impl Volume {
    pub fn kind(&self) -> &'static str {
        match self {
            Volume::Scalar(_) => "f32 scalar",
            Volume::Label(_) => "u8 label",
            Volume::Channels(_) => "f32 multi-channel",
        }
    }

    pub fn shape(&self) -> Shape3 {
        match self {
            Volume::Scalar(v) => v.shape(),
            Volume::Label(v) => v.shape(),
            Volume::Channels(v) => v.shape(),
        }
    }
}

/// Types that serialize to VVOL.
pub trait EncodeVvol {
    fn encode(&self) -> Vec<u8>;
}

fn header(dtype: u8, classes: u8, shape: Shape3, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype, classes, 0]);
    for n in shape.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl EncodeVvol for ScalarVolume {
    fn encode(&self) -> Vec<u8> {
        let mut out = header(DTYPE_F32, 0, self.shape(), 4 * self.values().len());
        push_f32(&mut out, self.values());
        out
    }
}

impl EncodeVvol for LabelVolume {
    fn encode(&self) -> Vec<u8> {
        let mut out = header(DTYPE_U8, self.num_classes() as u8, self.shape(), self.labels().len());
        out.extend_from_slice(self.labels());
        out
    }
}

impl EncodeVvol for ChannelVolume {
    fn encode(&self) -> Vec<u8> {
        let mut out = header(DTYPE_F32, self.channels as u8, self.shape, 4 * self.values.len());
        push_f32(&mut out, &self.values);
        out
    }
}

impl EncodeVvol for Volume {
    fn encode(&self) -> Vec<u8> {
        match self {
            Volume::Scalar(v) => v.encode(),
            Volume::Label(v) => v.encode(),
            Volume::Channels(v) => v.encode(),
        }
    }
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
}

/// Parse a complete VVOL byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < 4 {
        return Err(VolumeError::Truncated { what: "header", expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(VolumeError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Truncated { what: "header", expected: HEADER_LEN, found: bytes.len() });
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let (dtype, classes) = (bytes[5], bytes[6] as usize);
    let shape = Shape3::new(u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16))?;
    let payload = &bytes[HEADER_LEN..];
    let (elem, channels) = match dtype {
        DTYPE_F32 => (4, classes.max(1)),
        DTYPE_U8 => (1, 1),
        other => return Err(VolumeError::UnknownDtype(other)),
    };
    let expected = shape.voxel_count().checked_mul(channels * elem).ok_or(VolumeError::InvalidShape {
        nx: shape.nx,
        ny: shape.ny,
        nz: shape.nz,
    })?;
    if payload.len() < expected {
        return Err(VolumeError::Truncated { what: "payload", expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(VolumeError::TrailingBytes { found: payload.len() - expected });
    }
    match dtype {
        DTYPE_U8 => Ok(Volume::Label(LabelVolume::new(shape, payload.to_vec(), classes)?)),
        _ => {
            let values: Vec<f32> =
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
            if classes == 0 {
                Ok(Volume::Scalar(ScalarVolume::new(shape, values)?))
            } else {
                Ok(Volume::Channels(ChannelVolume::new(shape, classes, values)?))
            }
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    decode(&fs::read(path)?)
}

pub fn write_volume(vol: &impl EncodeVvol, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    fs::write(path, vol.encode())?;
    Ok(())
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume, VolumeError> {
    match read_volume(path)? {
        Volume::Scalar(v) => Ok(v),
        other => Err(VolumeError::DtypeMismatch { expected: "f32 scalar", found: other.kind() }),
    }
}

/// Read a label volume, optionally requiring a specific class count.
///
/// When `num_classes` is given, labels are validated against it even if the
/// header declares a larger count.
pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelVolume, VolumeError> {
    let vol = match read_volume(path)? {
        Volume::Label(v) => v,
        other => return Err(VolumeError::DtypeMismatch { expected: "u8 label", found: other.kind() }),
    };
    match num_classes {
        Some(l) if l != vol.num_classes() => {
            // Surface the offending voxel first when one exists.
            LabelVolume::new(vol.shape(), vol.labels().to_vec(), l)?;
            Err(VolumeError::ClassCountMismatch { expected: l, found: vol.num_classes() })
        }
        _ => Ok(vol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label_bytes(classes: u8, shape: [u32; 3], payload: &[u8]) -> Vec<u8> {
        let mut b = b"VVOL".to_vec();
        b.extend_from_slice(&[1, 1, classes, 0]);
        for n in shape {
            b.extend_from_slice(&n.to_le_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn header_layout_is_exact() {
        let v = LabelVolume::new(Shape3::new(2, 1, 1).unwrap(), vec![0, 2], 3).unwrap();
        assert_eq!(v.encode(), label_bytes(3, [2, 1, 1], &[0, 2]));
        let s = ScalarVolume::new(Shape3::new(1, 1, 1).unwrap(), vec![1.5]).unwrap();
        let mut expected = b"VVOL".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(s.encode(), expected);
    }

    #[test]
    fn random_scalar_round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vvol");
        let values: Vec<f32> = (0..64).map(|i| ((i * 7919) % 101) as f32 * 0.37 - 11.0).collect();
        let v = ScalarVolume::new(Shape3::cube(4).unwrap(), values).unwrap();
        write_volume(&v, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(read_scalar(&path).unwrap(), v);
        write_volume(&read_volume(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload() {
        let err = decode(&label_bytes(2, [2, 2, 2], &[0; 7])).unwrap_err();
        assert!(matches!(err, VolumeError::Truncated { what: "payload", expected: 8, found: 7 }));
    }

    #[test]
    fn bad_magic() {
        let mut b = label_bytes(2, [1, 1, 1], &[0]);
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(VolumeError::BadMagic { .. })));
    }

    #[test]
    fn label_range_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vvol");
        fs::write(&path, label_bytes(10, [2, 1, 1], &[0, 9])).unwrap();
        let err = read_labels(&path, Some(8)).unwrap_err();
        assert!(matches!(err, VolumeError::LabelOutOfRange { label: 9, num_classes: 8, .. }));
        // Header itself inconsistent with its payload.
        let err = decode(&label_bytes(8, [2, 1, 1], &[0, 9])).unwrap_err();
        assert!(matches!(err, VolumeError::LabelOutOfRange { label: 9, .. }));
    }

    #[test]
    fn dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vvol");
        fs::write(&path, label_bytes(2, [1, 1, 1], &[1])).unwrap();
        assert!(matches!(read_scalar(&path), Err(VolumeError::DtypeMismatch { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert!(matches!(decode(&label_bytes(2, [1, 1, 1], &[0, 0])), Err(VolumeError::TrailingBytes { found: 1 })));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            nx in 1usize..5, ny in 1usize..5, nz in 1usize..5,
            seed in any::<u64>(), channels in 0usize..4,
        ) {
            let shape = Shape3::new(nx, ny, nz).unwrap();
            let n = shape.voxel_count() * channels.max(1);
            let values: Vec<f32> = (0..n as u64)
                .map(|i| f32::from_bits(((seed ^ i.wrapping_mul(0x9E37_79B9)) as u32) & 0x3FFF_FFFF))
                .collect();
            let vol = if channels == 0 {
                Volume::Scalar(ScalarVolume::new(shape, values).unwrap())
            } else {
                Volume::Channels(ChannelVolume::new(shape, channels, values).unwrap())
            };
            let bytes = vol.encode();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
