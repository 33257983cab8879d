//! 3x3x3 convolution, stride 1, zero padding 1.
//!
//! With the padded grid `(X+2) x (Y+2) x (Z+2)` flattened z-fastest, the tap
//! at offset `(dx, dy, dz)` of the output voxel whose padded corner is `q`
//! reads `padded[q + dx*PyPz + dy*Pz + dz]`. A single contiguous range of
//! corners `q in [0, M)` therefore covers every output voxel. Corners whose y
//! or z lies in the pad band produce junk values that are dropped on
//! extraction and receive zero gradient.

use crate::real::Real;
use crate::voxelgrid::{Dims5, Tensor5};

use super::conv_kernel::{correlate, weight_grad, Taps};
use super::{check_dims, OpError};

/// Number of taps in a 3x3x3 kernel.
pub const KERNEL_VOLUME: usize = 27;

/// Convolution weights `[out][in][dx][dy][dz]` plus one bias per output channel.
///
/// The same type carries parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    out_channels: usize,
    in_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            weights: vec![T::zero(); out_channels * in_channels * KERNEL_VOLUME],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn new(out_channels: usize, in_channels: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self, OpError> {
        if weights.len() != out_channels * in_channels * KERNEL_VOLUME || bias.len() != out_channels {
            return Err(OpError::BadKernel { out_channels, in_channels });
        }
        Ok(Self { out_channels, in_channels, weights, bias })
    }

    /// Kernel whose only nonzero tap is the center of the diagonal `(o, o)`.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(channels, channels);
        for c in 0..channels {
            let at = k.weight_index(c, c, 1, 1, 1);
            k.weights[at] = T::one();
        }
        k
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * KERNEL_VOLUME
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, dx: usize, dy: usize, dz: usize) -> usize {
        ((o * self.in_channels + i) * 3 + dx) * 9 + dy * 3 + dz
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Saved input and weights of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvContext<T> {
    input: Tensor5<T>,
    kernel: ConvKernel<T>,
}

/// Padded-grid geometry for one sample.
struct Padded {
    py: usize,
    pz: usize,
    volume: usize,
    /// Length of the corner range covering every output voxel.
    corners: usize,
    offsets: [usize; KERNEL_VOLUME],
}

impl Padded {
    fn new(d: Dims5) -> Self {
        let (px, py, pz) = (d.x + 2, d.y + 2, d.z + 2);
        let mut offsets = [0; KERNEL_VOLUME];
        for (t, off) in offsets.iter_mut().enumerate() {
            let (dx, dy, dz) = (t / 9, (t / 3) % 3, t % 3);
            *off = dx * py * pz + dy * pz + dz;
        }
        Self { py, pz, volume: px * py * pz, corners: (d.x - 1) * py * pz + (d.y - 1) * pz + d.z, offsets }
    }

    fn taps(&self) -> Taps<'_> {
        Taps { vol: self.volume, offsets: &self.offsets, corners: self.corners }
    }

    #[inline]
    fn corner(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.py + y) * self.pz + z
    }

    /// Zero-pad every channel of sample `b`, followed by slack lanes.
    fn pad<T: Real>(&self, t: &Tensor5<T>, b: usize) -> Vec<T> {
        let d = t.dims();
        let clen = self.taps().channel_len();
        let mut out = vec![T::zero(); d.channels * clen];
        for c in 0..d.channels {
            let src = t.channel(b, c);
            let dst = &mut out[c * clen..(c + 1) * clen];
            for x in 0..d.x {
                for y in 0..d.y {
                    let s = (x * d.y + y) * d.z;
                    let p = self.corner(x + 1, y + 1, 1);
                    dst[p..p + d.z].copy_from_slice(&src[s..s + d.z]);
                }
            }
        }
        out
    }

    /// Copy valid corners of a corner-range buffer into channel `c0 + o` of
    /// sample `b`, adding `bias[o]`.
    fn extract<T: Real>(&self, acc: &[T], bias: impl Fn(usize) -> T, out: &mut Tensor5<T>, b: usize) {
        let d = out.dims();
        let stride = self.taps().stride();
        for o in 0..d.channels {
            let src = &acc[o * stride..(o + 1) * stride];
            let bo = bias(o);
            let dst = out.channel_mut(b, o);
            for x in 0..d.x {
                for y in 0..d.y {
                    let q = self.corner(x, y, 0);
                    let s = (x * d.y + y) * d.z;
                    for (v, &a) in dst[s..s + d.z].iter_mut().zip(&src[q..q + d.z]) {
                        *v = (a + bo).flush();
                    }
                }
            }
        }
    }
}

/// Weights reordered to `[i][t][o]`, optionally with the taps mirrored and
/// the channel roles swapped (the adjoint kernel).
fn tap_major<T: Real>(k: &ConvKernel<T>, adjoint: bool) -> Vec<T> {
    let (cout, cin) = (k.out_channels, k.in_channels);
    let mut wt = vec![T::zero(); k.weights.len()];
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..KERNEL_VOLUME {
                let w = k.weights[(o * cin + i) * KERNEL_VOLUME + t];
                if adjoint {
                    wt[(o * KERNEL_VOLUME + (KERNEL_VOLUME - 1 - t)) * cin + i] = w;
                } else {
                    wt[(i * KERNEL_VOLUME + t) * cout + o] = w;
                }
            }
        }
    }
    wt
}

/// Same-size 3x3x3 convolution: `out[b,o,p] = bias[o] + sum_{i,d} in[b,i,p+d-1] * k[o,i,d]`.
pub fn conv3d<T: Real>(input: &Tensor5<T>, kernel: &ConvKernel<T>) -> Result<(Tensor5<T>, ConvContext<T>), OpError> {
    let d = input.dims();
    if d.channels != kernel.in_channels {
        return Err(OpError::ChannelMismatch { input: d.channels, kernel: kernel.in_channels });
    }
    let geo = Padded::new(d);
    let cout = kernel.out_channels;
    let wt = tap_major(kernel, false);
    let mut out = Tensor5::zeros(d.with_channels(cout));
    let mut acc = vec![T::zero(); cout * geo.taps().stride()];
    for b in 0..d.batch {
        correlate(&geo.pad(input, b), d.channels, &wt, cout, geo.taps(), &mut acc);
        geo.extract(&acc, |o| kernel.bias[o], &mut out, b);
    }
    Ok((out, ConvContext { input: input.clone(), kernel: kernel.clone() }))
}

/// Gradients of [`conv3d`] with respect to its input and its kernel.
///
/// The input gradient is a convolution of the zero-padded output gradient
/// with the mirrored, channel-transposed kernel.
pub fn conv3d_backward<T: Real>(
    grad_out: &Tensor5<T>,
    ctx: ConvContext<T>,
) -> Result<(Tensor5<T>, ConvKernel<T>), OpError> {
    let (grad_in, grad_k) = backward_impl(grad_out, ctx, true)?;
    Ok((grad_in.expect("input gradient requested"), grad_k))
}

/// Kernel gradient of [`conv3d`] only, for layers whose input is data.
pub fn conv3d_backward_kernel<T: Real>(grad_out: &Tensor5<T>, ctx: ConvContext<T>) -> Result<ConvKernel<T>, OpError> {
    Ok(backward_impl(grad_out, ctx, false)?.1)
}

fn backward_impl<T: Real>(
    grad_out: &Tensor5<T>,
    ctx: ConvContext<T>,
    want_input: bool,
) -> Result<(Option<Tensor5<T>>, ConvKernel<T>), OpError> {
    let ConvContext { input, kernel } = ctx;
    let d = input.dims();
    check_dims("conv3d_backward", d.with_channels(kernel.out_channels), grad_out.dims())?;
    let geo = Padded::new(d);
    let taps = geo.taps();
    let (cin, cout, stride) = (d.channels, kernel.out_channels, taps.stride());
    let wt_adj = tap_major(&kernel, true);
    let mut grad_in = Tensor5::zeros(if want_input { d } else { d.with_channels(0) });
    let mut grad_k = ConvKernel::zeros(cout, cin);
    let mut g = vec![T::zero(); cout * stride];
    let mut acc = vec![T::zero(); if want_input { cin * stride } else { 0 }];
    for b in 0..d.batch {
        for o in 0..cout {
            let src = grad_out.channel(b, o);
            let dst = &mut g[o * stride..(o + 1) * stride];
            let mut bias_sum = T::zero();
            for x in 0..d.x {
                for y in 0..d.y {
                    let q = geo.corner(x, y, 0);
                    let s = (x * d.y + y) * d.z;
                    dst[q..q + d.z].copy_from_slice(&src[s..s + d.z]);
                    bias_sum += src[s..s + d.z].iter().copied().sum::<T>();
                }
            }
            grad_k.bias[o] += bias_sum;
        }
        weight_grad(&geo.pad(&input, b), cin, &g, cout, taps, &mut grad_k.weights);
        if want_input {
            correlate(&geo.pad(grad_out, b), cout, &wt_adj, cin, taps, &mut acc);
            geo.extract(&acc, |_| T::zero(), &mut grad_in, b);
        }
    }
    Ok((want_input.then_some(grad_in), grad_k))
}
