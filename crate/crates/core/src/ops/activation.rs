use crate::real::Real;
use crate::voxelgrid::{Dims5, Tensor5};

use super::{check_dims, OpError};

/// Which inputs were strictly positive.
#[derive(Debug, Clone)]
pub struct ReluContext {
    dims: Dims5,
    active: Vec<bool>,
}

pub fn relu<T: Real>(input: &Tensor5<T>) -> (Tensor5<T>, ReluContext) {
    let active: Vec<bool> = input.as_slice().iter().map(|&v| v > T::zero()).collect();
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    (out, ReluContext { dims: input.dims(), active })
}

/// Gradient is zero wherever the input was `<= 0`, including exactly 0.
pub fn relu_backward<T: Real>(grad_out: &Tensor5<T>, ctx: ReluContext) -> Result<Tensor5<T>, OpError> {
    check_dims("relu_backward", ctx.dims, grad_out.dims())?;
    let data = grad_out.as_slice().iter().zip(&ctx.active).map(|(&g, &a)| if a { g } else { T::zero() }).collect();
    Ok(Tensor5::from_vec(ctx.dims, data).expect("dims checked"))
}

/// Softmax output retained for the Jacobian-vector product.
#[derive(Debug, Clone)]
pub struct SoftmaxContext<T> {
    output: Tensor5<T>,
}

/// Per-voxel softmax across channels, shifted by the channel maximum.
pub fn softmax_channels<T: Real>(input: &Tensor5<T>) -> Result<(Tensor5<T>, SoftmaxContext<T>), OpError> {
    let d = input.dims();
    if d.channels < 2 {
        return Err(OpError::TooFewChannels(d.channels));
    }
    let s = d.spatial_len();
    let mut out = Tensor5::zeros(d);
    let mut exps = vec![0.0f64; d.channels];
    for b in 0..d.batch {
        let src = input.sample(b);
        let dst = out.sample_mut(b);
        for p in 0..s {
            let max = (0..d.channels).map(|c| src[c * s + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, e) in exps.iter_mut().enumerate() {
                *e = (src[c * s + p].as_f64() - max).exp();
                sum += *e;
            }
            for (c, e) in exps.iter().enumerate() {
                dst[c * s + p] = T::of(e / sum);
            }
        }
    }
    Ok((out.clone(), SoftmaxContext { output: out }))
}

/// `grad_in[c] = s[c] * (g[c] - sum_k g[k] s[k])` per voxel.
pub fn softmax_backward<T: Real>(grad_out: &Tensor5<T>, ctx: SoftmaxContext<T>) -> Result<Tensor5<T>, OpError> {
    let d = ctx.output.dims();
    check_dims("softmax_backward", d, grad_out.dims())?;
    let s = d.spatial_len();
    let mut grad_in = Tensor5::zeros(d);
    for b in 0..d.batch {
        let y = ctx.output.sample(b);
        let g = grad_out.sample(b);
        let dst = grad_in.sample_mut(b);
        for p in 0..s {
            let dot: f64 = (0..d.channels).map(|c| g[c * s + p].as_f64() * y[c * s + p].as_f64()).sum();
            for c in 0..d.channels {
                let i = c * s + p;
                dst[i] = T::of(y[i].as_f64() * (g[i].as_f64() - dot)).flush();
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(values: Vec<f64>) -> Tensor5<f64> {
        let n = values.len();
        Tensor5::from_vec(Dims5::new(1, 1, n, 1, 1), values).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let (y, ctx) = relu(&t1(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&t1(vec![5.0, 5.0, 5.0]), ctx).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_backward_shape_mismatch() {
        let (_, ctx) = relu(&t1(vec![1.0, 2.0]));
        assert!(relu_backward(&t1(vec![1.0]), ctx).is_err());
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dims5::new(1, 2, 3, 3, 2);
        let x: Vec<f64> = (0..d.len())
            .map(|_| loop {
                let v: f64 = rng.random_range(-1.0..1.0);
                if v.abs() > 1e-2 {
                    break v;
                }
            })
            .collect();
        let w: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            let (y, _) = relu(&Tensor5::from_vec(d, p.to_vec()).unwrap());
            y.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, ctx) = relu(&Tensor5::from_vec(d, x.clone()).unwrap());
        let g = relu_backward(&Tensor5::from_vec(d, w.clone()).unwrap(), ctx).unwrap();
        let report = gradient_check(f, &x, g.as_slice(), 1e-3, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_equal_logits() {
        let x = Tensor5::filled(Dims5::new(1, 4, 2, 1, 1), 3.0f64);
        let (y, _) = softmax_channels(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_two_channel_hand_value() {
        let x = Tensor5::from_vec(Dims5::new(1, 2, 1, 1, 1), vec![0.0, 3f64.ln()]).unwrap();
        let (y, _) = softmax_channels(&x).unwrap();
        assert!((y.as_slice()[0] - 0.25).abs() < 1e-15);
        assert!((y.as_slice()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor5::from_vec(Dims5::new(1, 2, 1, 1, 1), vec![1e4f32, -1e4]).unwrap();
        let (y, _) = softmax_channels(&x).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_needs_two_channels() {
        let x = Tensor5::<f64>::zeros(Dims5::new(1, 1, 1, 1, 1));
        assert_eq!(softmax_channels(&x).unwrap_err(), OpError::TooFewChannels(1));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = Dims5::new(2, 3, 2, 2, 2);
        let x: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..d.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            let (y, _) = softmax_channels(&Tensor5::from_vec(d, p.to_vec()).unwrap()).unwrap();
            y.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, ctx) = softmax_channels(&Tensor5::from_vec(d, x.clone()).unwrap()).unwrap();
        let g = softmax_backward(&Tensor5::from_vec(d, w.clone()).unwrap(), ctx).unwrap();
        let report = gradient_check(f, &x, g.as_slice(), 1e-3, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(values in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let d = Dims5::new(1, 3, 2, 2, 2);
            let (y, _) = softmax_channels(&Tensor5::from_vec(d, values).unwrap()).unwrap();
            for p in 0..8 {
                let sum: f64 = (0..3).map(|c| y.channel(0, c)[p]).sum();
                proptest::prop_assert!((sum - 1.0).abs() <= 1e-6);
                for c in 0..3 {
                    let v = y.channel(0, c)[p];
                    proptest::prop_assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }
}
