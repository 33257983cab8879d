use crate::real::Real;
use crate::voxelgrid::{Dims5, Tensor5};

use super::{check_dims, OpError};

/// Flat input index of the winning voxel for every pooled output element.
#[derive(Debug, Clone)]
pub struct PoolContext {
    input_dims: Dims5,
    argmax: Vec<usize>,
}

/// 2x2x2 max-pool, stride 2. Ties go to the first voxel in z-fastest scan order.
pub fn maxpool2<T: Real>(input: &Tensor5<T>) -> Result<(Tensor5<T>, PoolContext), OpError> {
    let d = input.dims();
    if d.spatial().iter().any(|n| n % 2 != 0) {
        return Err(OpError::OddExtent(d.spatial()));
    }
    let od = d.with_spatial([d.x / 2, d.y / 2, d.z / 2]);
    let mut out = Vec::with_capacity(od.len());
    let mut argmax = Vec::with_capacity(od.len());
    let src = input.as_slice();
    for b in 0..d.batch {
        for c in 0..d.channels {
            for x in 0..od.x {
                for y in 0..od.y {
                    for z in 0..od.z {
                        let mut best = d.index(b, c, 2 * x, 2 * y, 2 * z);
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let i = d.index(b, c, 2 * x + dx, 2 * y + dy, 2 * z + dz);
                                    if src[i] > src[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
    }
    let out = Tensor5::from_vec(od, out).expect("pooled length");
    Ok((out, PoolContext { input_dims: d, argmax }))
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor5<T>, ctx: PoolContext) -> Result<Tensor5<T>, OpError> {
    let d = ctx.input_dims;
    check_dims("maxpool2_backward", d.with_spatial([d.x / 2, d.y / 2, d.z / 2]), grad_out.dims())?;
    let mut grad_in = Tensor5::zeros(d);
    let dst = grad_in.as_mut_slice();
    for (&g, &i) in grad_out.as_slice().iter().zip(&ctx.argmax) {
        dst[i] += g;
    }
    Ok(grad_in)
}

#[derive(Debug, Clone)]
pub struct UpsampleContext {
    input_dims: Dims5,
}

/// Nearest-neighbour 2x upsampling: every voxel becomes a 2x2x2 block.
pub fn upsample2<T: Real>(input: &Tensor5<T>) -> (Tensor5<T>, UpsampleContext) {
    let d = input.dims();
    let od = d.with_spatial([2 * d.x, 2 * d.y, 2 * d.z]);
    let out = Tensor5::from_fn(od, |b, c, x, y, z| input.get(b, c, x / 2, y / 2, z / 2));
    (out, UpsampleContext { input_dims: d })
}

/// Sums the eight gradients that each source voxel fanned out to.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor5<T>, ctx: UpsampleContext) -> Result<Tensor5<T>, OpError> {
    let d = ctx.input_dims;
    let od = d.with_spatial([2 * d.x, 2 * d.y, 2 * d.z]);
    check_dims("upsample2_backward", od, grad_out.dims())?;
    let mut grad_in = Tensor5::zeros(d);
    let src = grad_out.as_slice();
    for b in 0..od.batch {
        for c in 0..od.channels {
            for x in 0..od.x {
                for y in 0..od.y {
                    for z in 0..od.z {
                        let i = d.index(b, c, x / 2, y / 2, z / 2);
                        grad_in.as_mut_slice()[i] += src[od.index(b, c, x, y, z)];
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
