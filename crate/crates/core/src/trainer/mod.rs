//! Adam, patch sampling and the training loop.

mod adam;
mod batch;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dice::{
    class_counts, class_weights, multiclass_dice_loss, ClassWeights, DiceError, PooledOverlap, WeightScheme, EPSILON,
};
use crate::ops::{softmax_backward, softmax_channels, OpError};
use crate::real::Real;
use crate::unet3d::{backward, forward, init_params, UNetConfig, UNetError, UNetParams};
use crate::voxelgrid::{LabelVolume, ScalarVolume, Shape3, Tensor5, VolumeError};

pub use adam::{adam_step, adam_step_net, AdamState, BETA1, BETA2, EPSILON as ADAM_EPSILON};
pub use batch::{center_crops, sample_batch, Batch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration} ({scheme} weights, learning rate {learning_rate}): {reason}")]
    Diverged { iteration: usize, scheme: WeightScheme, learning_rate: f64, reason: String },
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("optimizer state has {state} entries but got {params} parameters and {grads} gradients")]
    StateMismatch { state: usize, params: usize, grads: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need {needed} distinct patients per batch, dataset has {available}")]
    TooFewPatients { needed: usize, available: usize },
    #[error("patient {patient}: volume {volume} is smaller than patch {patch}")]
    VolumeSmallerThanPatch { patient: usize, volume: Shape3, patch: Shape3 },
    #[error("patient {patient}: image {image} and labels {labels} differ in shape")]
    CaseShape { patient: usize, image: Shape3, labels: Shape3 },
    #[error("patient {patient}: {found} classes, expected {expected}")]
    ClassCount { patient: usize, expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] UNetError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TrainError {
    /// Whether the run failed numerically rather than through bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub scheme: WeightScheme,
    pub seed: u64,
    /// A curve point is logged every this many iterations and after the last.
    pub validation_interval: usize,
    /// Draw the crops of a batch from distinct patients.
    pub distinct_patients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            iterations: 500,
            batch_size: 3,
            scheme: WeightScheme::Uniform,
            seed: 0,
            validation_interval: 50,
            distinct_patients: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.validation_interval == 0 {
            return bad("validation interval must be >= 1".into());
        }
        Ok(())
    }
}

/// One logged point of a learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Weighted multi-class loss of the batch trained on at `iteration`.
    pub loss: f64,
    /// Soft DSC per class on the validation patches.
    pub dsc: Vec<f64>,
    pub mean_foreground_dsc: f64,
}

/// Loss value, per-class unweighted losses and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossAndGradient<T> {
    pub loss: f64,
    pub per_class: Vec<f64>,
    pub grads: UNetParams<T>,
}

/// Forward, softmax, weighted soft-Dice loss and the full backward pass.
pub fn loss_and_gradient<T: Real>(
    params: &UNetParams<T>,
    input: &Tensor5<T>,
    target: &Tensor5<T>,
    weights: &ClassWeights,
) -> Result<LossAndGradient<T>, TrainError> {
    let (logits, cache) = forward(params, input)?;
    let (probs, sctx) = softmax_channels(&logits)?;
    let dice = multiclass_dice_loss(&probs, target, weights)?;
    let grad_logits = softmax_backward(&dice.grad, sctx)?;
    let grads = backward(params, cache, &grad_logits)?;
    Ok(LossAndGradient { loss: dice.loss, per_class: dice.per_class, grads })
}

/// Loss only; same arithmetic as [`loss_and_gradient`].
pub fn batch_loss<T: Real>(
    params: &UNetParams<T>,
    input: &Tensor5<T>,
    target: &Tensor5<T>,
    weights: &ClassWeights,
) -> Result<f64, TrainError> {
    let (logits, _) = forward(params, input)?;
    let (probs, _) = softmax_channels(&logits)?;
    Ok(multiclass_dice_loss(&probs, target, weights)?.loss)
}

fn mean_foreground(dsc: &[f64]) -> f64 {
    dsc[1..].iter().sum::<f64>() / (dsc.len() - 1) as f64
}

/// Stateful training loop over an in-memory dataset.
pub struct Trainer<'a> {
    train: &'a [(ScalarVolume, LabelVolume)],
    validation: Batch<f32>,
    config: TrainConfig,
    params: UNetParams<f32>,
    adam: AdamState,
    weights: ClassWeights,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    /// He-initialized network seeded from `config.seed`.
    pub fn new(
        train: &'a [(ScalarVolume, LabelVolume)],
        validation: &[(ScalarVolume, LabelVolume)],
        unet: UNetConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let params = init_params(unet, config.seed)?;
        Self::with_params(train, validation, params, config)
    }

    /// Start from given parameters. Validation patches are the centre crops
    /// of `validation`, or of `train` if `validation` is empty.
    pub fn with_params(
        train: &'a [(ScalarVolume, LabelVolume)],
        validation: &[(ScalarVolume, LabelVolume)],
        params: UNetParams<f32>,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let l = batch::dataset_classes(train)?;
        let unet = *params.config();
        if unet.num_classes != l {
            return Err(TrainError::ClassCount { patient: 0, expected: unet.num_classes, found: l });
        }
        if config.distinct_patients && train.len() < config.batch_size {
            return Err(TrainError::TooFewPatients { needed: config.batch_size, available: train.len() });
        }
        let counts = class_counts(l, train.iter().map(|c| &c.1))?;
        let weights = class_weights(&counts, config.scheme, EPSILON);
        let validation = center_crops(if validation.is_empty() { train } else { validation }, unet.patch)?;
        if validation.target.dims().channels != l {
            return Err(TrainError::ClassCount { patient: 0, expected: l, found: validation.target.dims().channels });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            train,
            validation,
            config,
            adam: AdamState::new(params.param_count()),
            params,
            weights,
            rng,
            iteration: 0,
        })
    }

    pub fn params(&self) -> &UNetParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> UNetParams<f32> {
        self.params
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Sample a batch, update the parameters, and return the batch loss.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let unet = *self.params.config();
        let batch: Batch<f32> =
            sample_batch(self.train, unet.patch, self.config.batch_size, self.config.distinct_patients, &mut self.rng)?;
        let iteration = self.iteration + 1;
        let out = match loss_and_gradient(&self.params, &batch.input, &batch.target, &self.weights) {
            Ok(out) => out,
            Err(TrainError::Dice(DiceError::NonFinite(_))) => {
                return Err(self.diverged(iteration, "non-finite prediction".into()))
            }
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() {
            return Err(self.diverged(iteration, "non-finite loss".into()));
        }
        match adam_step_net(&mut self.params, &out.grads, &mut self.adam, self.config.learning_rate) {
            Err(e @ TrainError::NonFiniteGradient { .. }) => return Err(self.diverged(iteration, e.to_string())),
            other => other?,
        }
        if let Some(i) = self.params.tensors().iter().position(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(self.diverged(iteration, format!("non-finite parameters in {}", self.params.tensor_name(i))));
        }
        self.iteration = iteration;
        Ok(out.loss)
    }

    /// Soft DSC per class pooled over the validation patches.
    pub fn validate(&self) -> Result<Vec<f64>, TrainError> {
        let d = self.validation.input.dims();
        let chunk = self.config.batch_size;
        let l = self.validation.target.dims().channels;
        let mut pooled = PooledOverlap::new(l);
        for start in (0..d.batch).step_by(chunk) {
            let n = chunk.min(d.batch - start);
            let slice = |t: &Tensor5<f32>| {
                let td = t.dims();
                let per = td.len() / td.batch;
                Tensor5::from_vec(
                    crate::voxelgrid::Dims5 { batch: n, ..td },
                    t.as_slice()[start * per..(start + n) * per].to_vec(),
                )
            };
            let (logits, _) = forward(&self.params, &slice(&self.validation.input)?)?;
            let (probs, _) = softmax_channels(&logits)?;
            pooled.add(&probs, &slice(&self.validation.target)?)?;
        }
        Ok(pooled.soft_dsc())
    }

    fn diverged(&self, iteration: usize, reason: String) -> TrainError {
        TrainError::Diverged { iteration, scheme: self.config.scheme, learning_rate: self.config.learning_rate, reason }
    }

    /// Validate the current parameters and pair the result with `loss`.
    pub fn curve_point(&self, loss: f64) -> Result<CurvePoint, TrainError> {
        let dsc = match self.validate() {
            Err(TrainError::Dice(DiceError::NonFinite(_))) => {
                return Err(self.diverged(self.iteration, "non-finite validation prediction".into()))
            }
            other => other?,
        };
        Ok(CurvePoint { iteration: self.iteration, loss, mean_foreground_dsc: mean_foreground(&dsc), dsc })
    }

    /// Run the remaining iterations, logging a point every validation interval.
    pub fn run(
        &mut self,
        mut on_point: impl FnMut(&CurvePoint, &UNetParams<f32>),
    ) -> Result<Vec<CurvePoint>, TrainError> {
        let mut curve = Vec::new();
        while self.iteration < self.config.iterations {
            let loss = self.step()?;
            if self.iteration.is_multiple_of(self.config.validation_interval)
                || self.iteration == self.config.iterations
            {
                let p = self.curve_point(loss)?;
                on_point(&p, &self.params);
                curve.push(p);
            }
        }
        Ok(curve)
    }
}

/// Trained parameters and their learning curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: UNetParams<f32>,
    pub curve: Vec<CurvePoint>,
}

pub fn train(
    train_set: &[(ScalarVolume, LabelVolume)],
    validation: &[(ScalarVolume, LabelVolume)],
    unet: UNetConfig,
    config: TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(train_set, validation, unet, config)?;
    let curve = trainer.run(|_, _| {})?;
    Ok(TrainOutcome { params: trainer.into_params(), curve })
}

/// Learning curve as CSV: `iteration,loss,dsc_class_0..,mean_foreground_dsc`.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], num_classes: usize, out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string(), "loss".to_string()];
    header.extend((0..num_classes).map(|c| format!("dsc_class_{c}")));
    header.push("mean_foreground_dsc".into());
    w.write_record(&header)?;
    for p in curve {
        let mut row = vec![p.iteration.to_string(), p.loss.to_string()];
        row.extend(p.dsc.iter().map(f64::to_string));
        row.push(p.mean_foreground_dsc.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::gradient_check;
    use rand::Rng;

    fn toy_dataset(n: usize, shape: Shape3, l: usize) -> Vec<(ScalarVolume, LabelVolume)> {
        (0..n)
            .map(|p| {
                let labels: Vec<u8> = (0..shape.voxel_count())
                    .map(|i| {
                        let (x, y, z) = shape.coords(i);
                        ((x + 2 * y + z + p) / 3 % l) as u8
                    })
                    .collect();
                let img = labels.iter().map(|&c| c as f32 * 0.5).collect();
                (ScalarVolume::new(shape, img).unwrap(), LabelVolume::new(shape, labels, l).unwrap())
            })
            .collect()
    }

    fn tiny_net(l: usize) -> UNetConfig {
        UNetConfig { in_channels: 1, num_classes: l, levels: 1, base_channels: 2, patch: Shape3::cube(4).unwrap() }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let cfg = tiny_net(2);
        let mut params = init_params::<f64>(cfg, 11).unwrap();
        let data = toy_dataset(2, Shape3::cube(4).unwrap(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // nonzero biases keep pre-activations of dead receptive fields off the ReLU kink
        for k in params.layers_mut() {
            k.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let batch: Batch<f64> = sample_batch(&data, cfg.patch, 2, true, &mut rng).unwrap();
        let input = Tensor5::from_fn(batch.input.dims(), |_, _, _, _, _| rng.random_range(-1.0..1.0));
        let counts = class_counts(2, data.iter().map(|c| &c.1)).unwrap();
        let w = class_weights(&counts, WeightScheme::Simple, EPSILON);
        let out = loss_and_gradient(&params, &input, &batch.target, &w).unwrap();
        let mut probe = params.clone();
        let report = gradient_check(
            |x| {
                probe.set_flat(x);
                batch_loss(&probe, &input, &batch.target, &w).unwrap()
            },
            &params.to_flat(),
            &out.grads.to_flat(),
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {} at {}", report.max_rel_error, report.worst_index);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let cfg = tiny_net(3);
        let p = init_params::<f64>(cfg, 2).unwrap();
        let x = Tensor5::from_fn(crate::voxelgrid::Dims5::new(1, 1, 4, 4, 4), |_, _, x, y, z| (x + y * z) as f64 * 0.1);
        let (y, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, cache, &Tensor5::zeros(y.dims())).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        // linearity in the upstream gradient
        let up = y.map(|v| v.sin());
        let (_, c1) = forward(&p, &x).unwrap();
        let g1 = backward(&p, c1, &up).unwrap();
        let (_, c2) = forward(&p, &x).unwrap();
        let g2 = backward(&p, c2, &up.scale(2.0)).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_samples_are_independent() {
        let cfg = tiny_net(2);
        let p = init_params::<f32>(cfg, 5).unwrap();
        let one = Tensor5::from_fn(crate::voxelgrid::Dims5::new(1, 1, 4, 4, 4), |_, _, x, y, z| (x * y + z) as f32);
        let three = Tensor5::from_fn(crate::voxelgrid::Dims5::new(3, 1, 4, 4, 4), |_, _, x, y, z| (x * y + z) as f32);
        let (a, _) = forward(&p, &one).unwrap();
        let (b, _) = forward(&p, &three).unwrap();
        for s in 0..3 {
            assert_eq!(b.sample(s), a.sample(0));
        }
    }

    #[test]
    fn first_loss_of_zero_network_has_closed_form() {
        let l = 3;
        let shape = Shape3::new(8, 4, 4).unwrap();
        let data = toy_dataset(4, shape, l);
        let unet = tiny_net(l);
        let cfg =
            TrainConfig { iterations: 1, batch_size: 3, scheme: WeightScheme::Square, seed: 21, ..Default::default() };
        let zeros = UNetParams::zeros(unet).unwrap();
        let mut trainer = Trainer::with_params(&data, &[], zeros, cfg).unwrap();
        // replay the sampler to learn the batch composition
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        rng.set_stream(1);
        let batch: Batch<f64> = sample_batch(&data, unet.patch, 3, true, &mut rng).unwrap();
        let loss = trainer.step().unwrap();
        let v = (3 * unet.patch.voxel_count()) as f64;
        let lf = l as f64;
        let w = trainer.weights().values().to_vec();
        let expected = -(1.0 / lf)
            * (0..l)
                .map(|c| {
                    let r: f64 = (0..3).map(|b| batch.target.channel(b, c).iter().sum::<f64>()).sum();
                    w[c] * 2.0 * (r / lf) / (v / lf + r)
                })
                .sum::<f64>();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let l = 2;
        let shape = Shape3::cube(4).unwrap();
        let data = toy_dataset(1, shape, l);
        let unet = tiny_net(l);
        let params = init_params::<f32>(unet, 8).unwrap();
        let batch: Batch<f32> = center_crops(&data, shape).unwrap();
        let counts = class_counts(l, data.iter().map(|c| &c.1)).unwrap();
        let w = class_weights(&counts, WeightScheme::Uniform, EPSILON);
        let out = loss_and_gradient(&params, &batch.input, &batch.target, &w).unwrap();
        let mut updated = params.clone();
        let mut state = AdamState::new(params.param_count());
        adam_step_net(&mut updated, &out.grads, &mut state, 1e-4).unwrap();
        let after = batch_loss(&updated, &batch.input, &batch.target, &w).unwrap();
        assert!(after < out.loss, "{after} >= {}", out.loss);
    }

    #[test]
    fn training_is_deterministic_and_logs_curve() {
        let shape = Shape3::cube(8).unwrap();
        let data = toy_dataset(4, shape, 3);
        let unet = tiny_net(3);
        let cfg =
            TrainConfig { iterations: 5, validation_interval: 2, learning_rate: 0.01, seed: 4, ..Default::default() };
        let a = train(&data[..3], &data[3..], unet, cfg).unwrap();
        let b = train(&data[..3], &data[3..], unet, cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve, b.curve);
        let its: Vec<usize> = a.curve.iter().map(|p| p.iteration).collect();
        assert_eq!(its, vec![2, 4, 5]);
        let mut csv = Vec::new();
        write_curve_csv(&a.curve, 3, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,loss,dsc_class_0,dsc_class_1,dsc_class_2,mean_foreground_dsc");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        let bad = TrainConfig { iterations: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn diverged_run_reports_iteration_and_scheme() {
        let shape = Shape3::cube(4).unwrap();
        let data = toy_dataset(3, shape, 2);
        let mut params = UNetParams::<f32>::zeros(tiny_net(2)).unwrap();
        params.layers_mut()[0].weights[0] = f32::INFINITY;
        let cfg = TrainConfig { scheme: WeightScheme::Simple, learning_rate: 0.01, ..Default::default() };
        let mut t = Trainer::with_params(&data, &[], params, cfg).unwrap();
        let err = t.step().unwrap_err();
        assert!(err.is_divergence());
        assert!(matches!(err, TrainError::Diverged { iteration: 1, scheme: WeightScheme::Simple, .. }), "{err}");
        assert!(err.to_string().contains("layer 1 weight"), "{err}");
    }
}
