//! VNET parameter checkpoints.
//!
//! ```text
//! "VNET" | version u8 (1) | in_channels u32 | num_classes u32 | levels u32
//!        | base_channels u32 | patch nx u32 | ny u32 | nz u32
//!        | per layer in topology order: weights f32[], bias f32[]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{UNetConfig, UNetError, UNetParams};
use crate::ops::ConvKernel;
use crate::real::Real;
use crate::voxelgrid::Shape3;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VNET";
pub const CHECKPOINT_VERSION: u8 = 1;
const HEADER_LEN: usize = 5 + 7 * 4;

impl<T: Real> UNetParams<T> {
    /// Serialize with every value rounded to `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.param_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        for v in [c.in_channels, c.num_classes, c.levels, c.base_channels, c.patch.nx, c.patch.ny, c.patch.nz] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<UNetParams<f32>, UNetError> {
    if bytes.len() < HEADER_LEN {
        return Err(UNetError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(UNetError::BadMagic(magic));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(UNetError::UnsupportedVersion(bytes[4]));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let patch = Shape3::new(field(4), field(5), field(6)).map_err(|e| UNetError::InvalidConfig(e.to_string()))?;
    let config =
        UNetConfig { in_channels: field(0), num_classes: field(1), levels: field(2), base_channels: field(3), patch };
    config.validate()?;
    let shapes = config.layer_channels();
    let floats: usize = shapes.iter().map(|&(i, o)| o * i * 27 + o).sum();
    let expected = HEADER_LEN + 4 * floats;
    if bytes.len() < expected {
        return Err(UNetError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(UNetError::TrailingBytes(bytes.len() - expected));
    }
    let mut values = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut layers = Vec::with_capacity(shapes.len());
    for (n, &(i, o)) in shapes.iter().enumerate() {
        let w: Vec<f32> = values.by_ref().take(o * i * 27).collect();
        let b: Vec<f32> = values.by_ref().take(o).collect();
        let k = ConvKernel::new(o, i, w, b)?;
        if !k.all_finite() {
            return Err(UNetError::NonFinite(format!("layer {n}")));
        }
        layers.push(k);
    }
    UNetParams::from_layers(config, layers)
}

pub fn write_checkpoint<T: Real>(params: &UNetParams<T>, path: impl AsRef<Path>) -> Result<(), UNetError> {
    fs::write(path, params.to_checkpoint_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<UNetParams<f32>, UNetError> {
    params_from_bytes(&fs::read(path)?)
}
