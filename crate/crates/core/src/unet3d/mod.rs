//! Encoder-decoder segmentation network with skip connections.
//!
//! Layout for `levels = 2`, `base_channels = 8`, one input channel:
//!
//! ```text
//! enc0: conv 1->8, relu, conv 8->8, relu  ---------------------.
//!       maxpool                                                 |
//! enc1: conv 8->16, relu, conv 16->16, relu  ---------.         |
//!       maxpool                                       |         |
//! bott: conv 16->32, relu, conv 32->32, relu          |         |
//! dec1: upsample, concat(.., enc1) -> conv 48->16, relu, conv 16->16, relu
//! dec0: upsample, concat(.., enc0) -> conv 24->8,  relu, conv 8->8,   relu
//! head: conv 8->L (logits)
//! ```
//!
//! Every convolution is 3x3x3 with zero padding, so only pooling and
//! upsampling change spatial extents.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ops::{
    concat_channels, concat_channels_backward, conv3d, conv3d_backward, conv3d_backward_kernel, maxpool2,
    maxpool2_backward, relu, relu_backward, upsample2, upsample2_backward, ConcatContext, ConvContext, ConvKernel,
    OpError, PoolContext, ReluContext, UpsampleContext,
};
use crate::real::Real;
use crate::voxelgrid::{Dims5, Shape3, Tensor5};

pub use checkpoint::{params_from_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("input dims {found} do not match the configured {expected}")]
    InputMismatch { expected: String, found: Dims5 },
    #[error("forward cache does not belong to these parameters")]
    StaleCache,
    #[error("parameter layout does not match the configuration")]
    LayoutMismatch,
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of pooling steps.
    pub levels: usize,
    pub base_channels: usize,
    pub patch: Shape3,
}

impl UNetConfig {
    pub fn new(num_classes: usize, patch: Shape3) -> Self {
        Self { in_channels: 1, num_classes, levels: 2, base_channels: 8, patch }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let bad = |m: String| Err(UNetError::InvalidConfig(m));
        if self.levels < 1 {
            return bad("levels must be >= 1".into());
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return bad("channel counts must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let step = 1usize.checked_shl(self.levels as u32).unwrap_or(0);
        if step == 0 || self.patch.as_array().iter().any(|&n| n % step != 0) {
            return bad(format!("patch {} not divisible by 2^{}", self.patch, self.levels));
        }
        Ok(())
    }

    /// Feature width at encoder depth `level` (the bottleneck is `levels`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(in, out)` channels of every convolution in parameter order.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut layers = Vec::with_capacity(4 * self.levels + 3);
        for l in 0..self.levels {
            let cin = if l == 0 { self.in_channels } else { self.width(l - 1) };
            layers.push((cin, self.width(l)));
            layers.push((self.width(l), self.width(l)));
        }
        let (deep, bott) = (self.width(self.levels - 1), self.width(self.levels));
        layers.push((deep, bott));
        layers.push((bott, bott));
        for l in (0..self.levels).rev() {
            layers.push((self.width(l + 1) + self.width(l), self.width(l)));
            layers.push((self.width(l), self.width(l)));
        }
        layers.push((self.width(0), self.num_classes));
        layers
    }

    fn encoder_layer(&self, level: usize) -> usize {
        2 * level
    }

    fn bottleneck_layer(&self) -> usize {
        2 * self.levels
    }

    fn decoder_layer(&self, level: usize) -> usize {
        2 * self.levels + 2 + 2 * (self.levels - 1 - level)
    }

    fn head_layer(&self) -> usize {
        4 * self.levels + 2
    }
}

/// Convolution kernels in the order given by [`UNetConfig::layer_channels`].
///
/// Gradients returned by [`backward`] use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    config: UNetConfig,
    layers: Vec<ConvKernel<T>>,
}

impl<T: Real> UNetParams<T> {
    pub fn zeros(config: UNetConfig) -> Result<Self, UNetError> {
        config.validate()?;
        let layers = config.layer_channels().into_iter().map(|(i, o)| ConvKernel::zeros(o, i)).collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: UNetConfig, layers: Vec<ConvKernel<T>>) -> Result<Self, UNetError> {
        config.validate()?;
        let expected = config.layer_channels();
        if expected.len() != layers.len()
            || expected.iter().zip(&layers).any(|(&(i, o), k)| k.in_channels() != i || k.out_channels() != o)
        {
            return Err(UNetError::LayoutMismatch);
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvKernel<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvKernel<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvKernel::param_count).sum()
    }

    /// Flat views of every parameter tensor: weights then bias, layer by layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|k| [k.weights.as_slice(), k.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|k| [k.weights.as_mut_slice(), k.bias.as_mut_slice()]).collect()
    }

    /// Human-readable name of entry `i` of [`UNetParams::tensors`].
    pub fn tensor_name(&self, i: usize) -> String {
        format!("layer {} {}", i / 2, if i.is_multiple_of(2) { "weight" } else { "bias" })
    }

    /// All parameters concatenated in [`UNetParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|k| {
                let w = k.weights.iter().map(|v| U::of(v.as_f64())).collect();
                let b = k.bias.iter().map(|v| U::of(v.as_f64())).collect();
                ConvKernel::new(k.out_channels(), k.in_channels(), w, b).expect("same layout")
            })
            .collect();
        UNetParams { config: self.config, layers }
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
        out
    }
}

/// He initialization: weights ~ N(0, sqrt(2 / fan_in)), biases zero.
pub fn init_params<T: Real>(config: UNetConfig, seed: u64) -> Result<UNetParams<T>, UNetError> {
    let mut params = UNetParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in params.layers_mut() {
        let std = (2.0 / k.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut k.weights {
            *w = T::of(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

struct ConvRelu<T> {
    conv: ConvContext<T>,
    relu: ReluContext,
}

struct EncoderCache<T> {
    first: ConvRelu<T>,
    second: ConvRelu<T>,
    pool: PoolContext,
}

struct DecoderCache<T> {
    up: UpsampleContext,
    concat: ConcatContext,
    first: ConvRelu<T>,
    second: ConvRelu<T>,
}

/// Everything [`backward`] needs from one [`forward`] call.
pub struct ForwardCache<T> {
    config: UNetConfig,
    output: Dims5,
    encoder: Vec<EncoderCache<T>>,
    bottleneck: (ConvRelu<T>, ConvRelu<T>),
    /// In execution order: deepest level first.
    decoder: Vec<DecoderCache<T>>,
    head: ConvContext<T>,
}

fn conv_relu<T: Real>(x: &Tensor5<T>, k: &ConvKernel<T>) -> Result<(Tensor5<T>, ConvRelu<T>), OpError> {
    let (y, conv) = conv3d(x, k)?;
    let (y, relu) = relu(&y);
    Ok((y, ConvRelu { conv, relu }))
}

fn conv_relu_backward<T: Real>(
    g: &Tensor5<T>,
    cache: ConvRelu<T>,
    grads: &mut [ConvKernel<T>],
    layer: usize,
) -> Result<Tensor5<T>, OpError> {
    let g = relu_backward(g, cache.relu)?;
    let (g, gk) = conv3d_backward(&g, cache.conv)?;
    grads[layer] = gk;
    Ok(g)
}

/// Logits of shape `(B, L, patch)` plus the cache for [`backward`].
pub fn forward<T: Real>(
    params: &UNetParams<T>,
    input: &Tensor5<T>,
) -> Result<(Tensor5<T>, ForwardCache<T>), UNetError> {
    let cfg = params.config;
    let d = input.dims();
    if d.channels != cfg.in_channels || d.spatial() != cfg.patch.as_array() || d.batch == 0 {
        return Err(UNetError::InputMismatch {
            expected: format!("(B, {}, {})", cfg.in_channels, cfg.patch),
            found: d,
        });
    }
    let layers = &params.layers;
    let mut x = input.clone();
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut encoder = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let at = cfg.encoder_layer(level);
        let (y, first) = conv_relu(&x, &layers[at])?;
        let (y, second) = conv_relu(&y, &layers[at + 1])?;
        let (pooled, pool) = maxpool2(&y)?;
        skips.push(y);
        encoder.push(EncoderCache { first, second, pool });
        x = pooled;
    }
    let at = cfg.bottleneck_layer();
    let (y, b1) = conv_relu(&x, &layers[at])?;
    let (mut x, b2) = conv_relu(&y, &layers[at + 1])?;
    let mut decoder = Vec::with_capacity(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let at = cfg.decoder_layer(level);
        let (up_x, up) = upsample2(&x);
        let skip = skips.pop().expect("one skip per level");
        let (cat, concat) = concat_channels(&up_x, &skip)?;
        let (y, first) = conv_relu(&cat, &layers[at])?;
        let (y, second) = conv_relu(&y, &layers[at + 1])?;
        decoder.push(DecoderCache { up, concat, first, second });
        x = y;
    }
    let (logits, head) = conv3d(&x, &layers[cfg.head_layer()])?;
    let cache = ForwardCache { config: cfg, output: logits.dims(), encoder, bottleneck: (b1, b2), decoder, head };
    Ok((logits, cache))
}

/// Parameter gradients of a scalar loss whose gradient w.r.t. the logits is
/// `grad_logits`.
pub fn backward<T: Real>(
    params: &UNetParams<T>,
    cache: ForwardCache<T>,
    grad_logits: &Tensor5<T>,
) -> Result<UNetParams<T>, UNetError> {
    let cfg = params.config;
    if cache.config != cfg {
        return Err(UNetError::StaleCache);
    }
    if grad_logits.dims() != cache.output {
        return Err(UNetError::Op(OpError::ShapeMismatch {
            op: "unet backward",
            expected: cache.output,
            found: grad_logits.dims(),
        }));
    }
    let mut grads: Vec<ConvKernel<T>> =
        cfg.layer_channels().into_iter().map(|(i, o)| ConvKernel::zeros(o, i)).collect();
    let ForwardCache { encoder, bottleneck, decoder, head, .. } = cache;

    let (mut g, gk) = conv3d_backward(grad_logits, head)?;
    grads[cfg.head_layer()] = gk;

    let mut skip_grads: Vec<Option<Tensor5<T>>> = (0..cfg.levels).map(|_| None).collect();
    // decoder was executed deepest-first; unwind shallowest-first
    for (level, dec) in decoder.into_iter().rev().enumerate() {
        let at = cfg.decoder_layer(level);
        g = conv_relu_backward(&g, dec.second, &mut grads, at + 1)?;
        g = conv_relu_backward(&g, dec.first, &mut grads, at)?;
        let (g_up, g_skip) = concat_channels_backward(&g, dec.concat)?;
        skip_grads[level] = Some(g_skip);
        g = upsample2_backward(&g_up, dec.up)?;
    }
    let at = cfg.bottleneck_layer();
    g = conv_relu_backward(&g, bottleneck.1, &mut grads, at + 1)?;
    g = conv_relu_backward(&g, bottleneck.0, &mut grads, at)?;
    for (level, enc) in encoder.into_iter().enumerate().rev() {
        let at = cfg.encoder_layer(level);
        g = maxpool2_backward(&g, enc.pool)?;
        let skip = skip_grads[level].take().expect("skip gradient recorded");
        for (a, b) in g.as_mut_slice().iter_mut().zip(skip.as_slice()) {
            *a += *b;
        }
        g = conv_relu_backward(&g, enc.second, &mut grads, at + 1)?;
        if level == 0 {
            let gr = relu_backward(&g, enc.first.relu)?;
            grads[at] = conv3d_backward_kernel(&gr, enc.first.conv)?;
            break;
        }
        g = conv_relu_backward(&g, enc.first, &mut grads, at)?;
    }
    Ok(UNetParams { config: cfg, layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig { in_channels: 1, num_classes: 2, levels: 1, base_channels: 2, patch: Shape3::cube(4).unwrap() }
    }

    #[test]
    fn layer_layout_default() {
        let cfg = UNetConfig::new(8, Shape3::cube(32).unwrap());
        assert_eq!(
            cfg.layer_channels(),
            vec![(1, 8), (8, 8), (8, 16), (16, 16), (16, 32), (32, 32), (48, 16), (16, 16), (24, 8), (8, 8), (8, 8)]
        );
        let p = UNetParams::<f32>::zeros(cfg).unwrap();
        assert_eq!(p.param_count(), 27 * 3336 + (8 + 8 + 16 + 16 + 32 + 32 + 16 + 16 + 8 + 8 + 8));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.patch = Shape3::new(4, 4, 6).unwrap();
        cfg.levels = 2;
        assert!(matches!(cfg.validate(), Err(UNetError::InvalidConfig(_))));
        cfg.levels = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params::<f32>(tiny(), 7).unwrap();
        let b = init_params::<f32>(tiny(), 7).unwrap();
        let c = init_params::<f32>(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers().iter().all(|k| k.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_std_matches_he() {
        // first layer of a 1-channel net has fan_in 27
        let cfg = UNetConfig { base_channels: 400, ..tiny() };
        let p = init_params::<f64>(cfg, 3).unwrap();
        let w = &p.layers()[0].weights;
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (2.0f64 / 27.0).sqrt();
        assert!((std / expected - 1.0).abs() < 0.2, "std {std} vs {expected}");
    }

    #[test]
    fn zero_net_zero_logits() {
        let p = UNetParams::<f32>::zeros(tiny()).unwrap();
        let x = Tensor5::zeros(Dims5::new(2, 1, 4, 4, 4));
        let (y, _) = forward(&p, &x).unwrap();
        assert_eq!(y.dims(), Dims5::new(2, 2, 4, 4, 4));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_shape_checked() {
        let p = UNetParams::<f32>::zeros(tiny()).unwrap();
        let x = Tensor5::zeros(Dims5::new(1, 1, 4, 4, 2));
        assert!(matches!(forward(&p, &x), Err(UNetError::InputMismatch { .. })));
    }

    #[test]
    fn stale_cache_rejected() {
        let p = init_params::<f64>(tiny(), 1).unwrap();
        let x = Tensor5::filled(Dims5::new(1, 1, 4, 4, 4), 0.5);
        let (y, cache) = forward(&p, &x).unwrap();
        let other = init_params::<f64>(UNetConfig { base_channels: 3, ..tiny() }, 1).unwrap();
        assert!(matches!(backward(&other, cache, &y), Err(UNetError::StaleCache)));
    }
}
