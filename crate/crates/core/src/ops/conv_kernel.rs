//! Register-blocked inner loops for the 3x3x3 convolution.
//!
//! Both kernels work on the corner-range layout described in `conv.rs`:
//! a padded channel occupies `vol` elements (plus [`LANES`] zeros of slack so
//! vector reads may run past the last corner), and a tap is a fixed offset
//! into it. Accumulation order is fixed, so results do not depend on which
//! instruction set the loop was compiled for.

use crate::real::Real;

use super::conv::KERNEL_VOLUME;

/// Width of one accumulator row.
pub(super) const LANES: usize = 8;
/// Output channels handled per register block.
const BLOCK: usize = 8;
/// Output channels per block in the weight-gradient kernel.
const GRAD_BLOCK: usize = 4;
/// Corner tile length for the weight-gradient reduction.
const TILE: usize = 256;

/// Geometry shared by both kernels.
#[derive(Clone, Copy)]
pub(super) struct Taps<'a> {
    /// Padded channel length, excluding slack.
    pub vol: usize,
    pub offsets: &'a [usize; KERNEL_VOLUME],
    /// Number of corners.
    pub corners: usize,
}

impl Taps<'_> {
    /// Corner count rounded up to whole lanes; row stride of corner buffers.
    pub fn stride(&self) -> usize {
        self.corners.div_ceil(LANES) * LANES
    }

    /// Channel stride of padded buffers.
    pub fn channel_len(&self) -> usize {
        self.vol + LANES
    }
}

/// `out[o][q] = sum_{i,t} wt[(i*27+t)*cout + o] * pad[i][q + off_t]` for every
/// corner `q`. `out` has row stride [`Taps::stride`]; tail lanes are junk.
pub(super) fn correlate<T: Real>(pad: &[T], cin: usize, wt: &[T], cout: usize, taps: Taps<'_>, out: &mut [T]) {
    assert!(pad.len() >= cin * taps.channel_len());
    assert_eq!(wt.len(), cin * KERNEL_VOLUME * cout);
    assert!(out.len() >= cout * taps.stride());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { correlate_avx2(pad, cin, wt, cout, taps, out) };
        return;
    }
    correlate_impl(pad, cin, wt, cout, taps, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate_avx2<T: Real>(pad: &[T], cin: usize, wt: &[T], cout: usize, taps: Taps<'_>, out: &mut [T]) {
    correlate_impl(pad, cin, wt, cout, taps, out);
}

#[inline(always)]
fn correlate_impl<T: Real>(pad: &[T], cin: usize, wt: &[T], cout: usize, taps: Taps<'_>, out: &mut [T]) {
    let mut o0 = 0;
    while o0 + BLOCK <= cout {
        correlate_block::<T, BLOCK>(pad, cin, wt, cout, o0, taps, out);
        o0 += BLOCK;
    }
    while o0 < cout {
        correlate_block::<T, 1>(pad, cin, wt, cout, o0, taps, out);
        o0 += 1;
    }
}

#[inline(always)]
fn correlate_block<T: Real, const OB: usize>(
    pad: &[T],
    cin: usize,
    wt: &[T],
    cout: usize,
    o0: usize,
    taps: Taps<'_>,
    out: &mut [T],
) {
    let (clen, stride) = (taps.channel_len(), taps.stride());
    for q0 in (0..taps.corners).step_by(LANES) {
        let mut acc = [[T::zero(); LANES]; OB];
        for i in 0..cin {
            let base = i * clen + q0;
            for (t, &off) in taps.offsets.iter().enumerate() {
                let x: &[T; LANES] = pad[base + off..base + off + LANES].try_into().expect("lane slice");
                let w = &wt[(i * KERNEL_VOLUME + t) * cout + o0..][..OB];
                for o in 0..OB {
                    let wo = w[o];
                    for l in 0..LANES {
                        acc[o][l] += wo * x[l];
                    }
                }
            }
        }
        for (o, row) in acc.iter().enumerate() {
            let at = (o0 + o) * stride + q0;
            out[at..at + LANES].copy_from_slice(row);
        }
    }
}

/// `dw[(o*cin + i)*27 + t] += sum_q g[o][q] * pad[i][q + off_t]`.
///
/// `g` has row stride [`Taps::stride`] and must be zero in its tail lanes and
/// at corners that do not map to an output voxel.
pub(super) fn weight_grad<T: Real>(pad: &[T], cin: usize, g: &[T], cout: usize, taps: Taps<'_>, dw: &mut [T]) {
    assert!(pad.len() >= cin * taps.channel_len());
    assert!(g.len() >= cout * taps.stride());
    assert_eq!(dw.len(), cout * cin * KERNEL_VOLUME);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { weight_grad_avx2(pad, cin, g, cout, taps, dw) };
        return;
    }
    weight_grad_impl(pad, cin, g, cout, taps, dw);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_avx2<T: Real>(pad: &[T], cin: usize, g: &[T], cout: usize, taps: Taps<'_>, dw: &mut [T]) {
    weight_grad_impl(pad, cin, g, cout, taps, dw);
}

#[inline(always)]
fn weight_grad_impl<T: Real>(pad: &[T], cin: usize, g: &[T], cout: usize, taps: Taps<'_>, dw: &mut [T]) {
    let stride = taps.stride();
    for tile in (0..stride).step_by(TILE) {
        let end = (tile + TILE).min(stride);
        let mut o0 = 0;
        while o0 + GRAD_BLOCK <= cout {
            weight_grad_block::<T, GRAD_BLOCK>(pad, cin, g, o0, taps, tile..end, dw);
            o0 += GRAD_BLOCK;
        }
        while o0 < cout {
            weight_grad_block::<T, 1>(pad, cin, g, o0, taps, tile..end, dw);
            o0 += 1;
        }
    }
}

/// Accumulates `OB` output channels against the three z-taps of each
/// `(dx, dy)` row at once, which share most of their input loads.
#[inline(always)]
fn weight_grad_block<T: Real, const OB: usize>(
    pad: &[T],
    cin: usize,
    g: &[T],
    o0: usize,
    taps: Taps<'_>,
    range: std::ops::Range<usize>,
    dw: &mut [T],
) {
    let (clen, stride) = (taps.channel_len(), taps.stride());
    for i in 0..cin {
        for row in 0..KERNEL_VOLUME / 3 {
            let off = taps.offsets[3 * row];
            let mut acc = [[[T::zero(); LANES]; 3]; OB];
            for q0 in range.clone().step_by(LANES) {
                let at = i * clen + off + q0;
                let xs: [&[T; LANES]; 3] =
                    std::array::from_fn(|dz| pad[at + dz..at + dz + LANES].try_into().expect("lane slice"));
                for (o, acc_o) in acc.iter_mut().enumerate() {
                    let gs: &[T; LANES] = g[(o0 + o) * stride + q0..][..LANES].try_into().expect("lane slice");
                    for (a, x) in acc_o.iter_mut().zip(xs) {
                        for l in 0..LANES {
                            a[l] += gs[l] * x[l];
                        }
                    }
                }
            }
            for (o, acc_o) in acc.iter().enumerate() {
                for (dz, lanes) in acc_o.iter().enumerate() {
                    let mut s = T::zero();
                    for &v in lanes {
                        s += v;
                    }
                    dw[((o0 + o) * cin + i) * KERNEL_VOLUME + 3 * row + dz] += s;
                }
            }
        }
    }
}
