//! Binary cross-entropy, SGD with momentum over two learning-rate groups,
//! warmup scheduling and the epoch loop.

use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{self, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::DifferentiableOp;
use crate::metrics::PredictionSet;
use crate::model::Network;
use crate::nn::{Module, ParamGroup};
use crate::ops::{sigmoid_scalar, Mode};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp keeping the log terms finite.
pub const PROB_EPS: f64 = 1e-7;

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<(usize, usize)> {
    let [n, c] = probs.dims() else {
        return Err(Error::config(format!("expected [N, C] scores, got {:?}", probs.dims())));
    };
    if labels.dims() != probs.dims() {
        return Err(Error::data(format!(
            "labels {:?} do not match scores {:?}",
            labels.dims(),
            probs.dims()
        )));
    }
    if let Some(bad) = labels.data().iter().find(|&&l| l != T::zero() && l != T::one()) {
        return Err(Error::data(format!("label value {bad:?} is not 0 or 1")));
    }
    if *n == 0 {
        return Err(Error::data("empty batch"));
    }
    Ok((*n, *c))
}

fn clamped_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Binary cross-entropy summed over classes and averaged over the batch.
pub fn bce_loss<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    let (n, _) = check_labels(probs, labels)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(p, y)| clamped_bce(p.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(0.0)))
        .sum();
    Ok(total / n as f64)
}

/// Loss on sigmoid probabilities of `logits` and its gradient with respect to
/// the logits, `(sigmoid(z) − y) / N`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let probs = logits.map(sigmoid_scalar);
    let loss = bce_loss(&probs, labels)?;
    let inv_n = T::one() / T::from_usize_lossy(logits.dims()[0]);
    let grad = probs.zip_map(labels, |p, y| (p - y) * inv_n)?;
    Ok((loss, grad))
}

/// Shape of the learning rate after warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warmup length; `None` means one epoch of steps.
    pub warmup_steps: Option<usize>,
    pub decay: LrDecay,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_head: 0.1,
            lr_backbone: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: None,
            decay: LrDecay::Constant,
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_head, self.lr_backbone, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("learning rates and weight decay must be finite and ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn warmup_for(&self, steps_per_epoch: usize) -> usize {
        self.warmup_steps.unwrap_or(steps_per_epoch)
    }

    /// `(lr_head, lr_backbone)` at a global step.
    pub fn learning_rates(&self, step: usize, steps_per_epoch: usize) -> (f64, f64) {
        let warmup = self.warmup_for(steps_per_epoch);
        let factor = match self.decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                let total = (self.epochs * steps_per_epoch).max(warmup + 1);
                let t = step.saturating_sub(warmup) as f64 / (total - warmup) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        };
        (
            warmup_lr(step, self.lr_head, warmup) * factor,
            warmup_lr(step, self.lr_backbone, warmup) * factor,
        )
    }
}

/// Linear ramp `base · min(1, (step + 1) / warmup)`, or `base` without warmup.
pub fn warmup_lr(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        base_lr
    } else {
        base_lr * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One SGD-with-momentum update over every parameter of `module`.
///
/// `v ← μ·v + g + wd·w`, `w ← w − lr·v`, skipping the decay term for
/// parameters flagged as non-decaying. Nothing is modified when any gradient
/// is non-finite.
pub fn sgd_momentum_step<T: Scalar, M: Module<T> + ?Sized>(
    module: &mut M,
    lr_head: f64,
    lr_backbone: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut bad = None;
    module.visit_params(&mut |p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Numerical(format!(
            "non-finite gradient in {name}; optimizer step aborted"
        )));
    }
    let mu = T::lit(momentum);
    module.visit_params(&mut |p| {
        let lr = T::lit(match p.group {
            ParamGroup::Head => lr_head,
            ParamGroup::Backbone => lr_backbone,
        });
        let wd = T::lit(if p.decay { weight_decay } else { 0.0 });
        let v = p.momentum_buffer.data_mut();
        let w = p.value.data_mut();
        for ((v, w), &g) in v.iter_mut().zip(w.iter_mut()).zip(p.grad.data()) {
            *v = mu * *v + g + wd * *w;
            *w = *w - lr * *v;
        }
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub loss: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,lr_head,lr_backbone,loss";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.lr_head, self.lr_backbone, self.loss
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub images_per_sec: f64,
}

const PERMUTATION_STREAM: u64 = 0x7065_726d;
const AUGMENT_STREAM: u64 = 0x6175_676d;

/// Builds augmented batches; shareable with a prefetch thread.
#[derive(Clone, Debug)]
pub struct BatchMaker {
    pub seed: u64,
    pub image_size: usize,
    pub augment: Option<AugmentConfig>,
}

impl BatchMaker {
    /// Sample order for `epoch`, chunked into batches.
    pub fn epoch_batches(&self, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut data::derived_rng(self.seed, PERMUTATION_STREAM, epoch as u64));
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn make(&self, data: &Dataset, epoch: usize, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let Some(aug) = &self.augment else {
            return data.batch(indices, self.image_size);
        };
        let images = indices
            .iter()
            .map(|&i| {
                let stream_index = ((epoch as u64) << 32) | i as u64;
                let mut rng = data::derived_rng(self.seed, AUGMENT_STREAM, stream_index);
                let s = data::augment(&data.samples[i], aug, &mut rng, self.image_size)?;
                let d = s.image.dims().to_vec();
                s.image.reshape(&[1, d[0], d[1], d[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = data::label_matrix(indices.iter().map(|&i| &data.samples[i].labels[..]))?;
        Ok((Tensor::stack_batch(&images)?, labels))
    }
}

/// Owns the network, optimizer settings and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network<f32>,
    pub optim: OptimConfig,
    pub batches: BatchMaker,
    /// Upper bound on batches prepared ahead of the training thread.
    pub prefetch: usize,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: usize,
}

impl Trainer {
    pub fn new(network: Network<f32>, optim: OptimConfig, batches: BatchMaker) -> Result<Self> {
        optim.validate()?;
        Ok(Self {
            network,
            optim,
            batches,
            prefetch: 2,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.optim.batch_size)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        if data.num_classes() != self.network.num_classes() {
            return Err(Error::data(format!(
                "dataset has {} classes, model has {}",
                data.num_classes(),
                self.network.num_classes()
            )));
        }
        Ok(())
    }

    /// Forward, loss, backward and optimizer update on one batch.
    pub fn train_batch(&mut self, x: &Tensor<f32>, y: &Tensor<f32>, lrs: (f64, f64)) -> Result<f64> {
        self.network.zero_grad();
        let logits = self.network.forward(x, Mode::Train)?;
        let (loss, grad) = bce_with_logits(&logits, y)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss}")));
        }
        self.network.backward(&grad)?;
        sgd_momentum_step(
            &mut self.network,
            lrs.0,
            lrs.1,
            self.optim.momentum,
            self.optim.weight_decay,
        )?;
        Ok(loss)
    }

    fn record_step(&mut self, n: usize, loss: f64, lrs: (f64, f64)) -> StepRecord {
        let record = StepRecord {
            epoch: self.epoch,
            step: self.global_step,
            lr_head: lrs.0,
            lr_backbone: lrs.1,
            loss,
        };
        self.global_step += 1;
        self.step_in_epoch += 1;
        if self.step_in_epoch == self.steps_per_epoch(n) {
            self.epoch += 1;
            self.step_in_epoch = 0;
        }
        record
    }

    /// Run `count` optimizer steps from the current position, crossing epoch
    /// boundaries as needed.
    pub fn train_steps(&mut self, data: &Dataset, count: usize) -> Result<Vec<StepRecord>> {
        self.check_data(data)?;
        let n = data.len();
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let batches = self.batches.epoch_batches(self.epoch, n, self.optim.batch_size);
            let (x, y) = self.batches.make(data, self.epoch, &batches[self.step_in_epoch])?;
            let lrs = self.optim.learning_rates(self.global_step, self.steps_per_epoch(n));
            let loss = self.train_batch(&x, &y, lrs)?;
            records.push(self.record_step(n, loss, lrs));
        }
        Ok(records)
    }

    /// Finish the current epoch with batches prepared on a prefetch thread.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<(EpochStats, Vec<StepRecord>)> {
        self.check_data(data)?;
        let n = data.len();
        let epoch = self.epoch;
        let batches = self.batches.epoch_batches(epoch, n, self.optim.batch_size);
        let pending: Vec<Vec<usize>> = batches[self.step_in_epoch..].to_vec();
        let maker = self.batches.clone();
        let start = Instant::now();
        let mut records = Vec::with_capacity(pending.len());
        let mut images = 0;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(self.prefetch.max(1));
            scope.spawn(move || {
                for indices in pending {
                    let batch = maker.make(data, epoch, &indices);
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                let (x, y) = batch?;
                let lrs = self.optim.learning_rates(self.global_step, self.steps_per_epoch(n));
                let loss = self.train_batch(&x, &y, lrs)?;
                images += x.dims()[0];
                records.push(self.record_step(n, loss, lrs));
            }
            Ok(())
        })?;
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64;
        Ok((
            EpochStats {
                epoch,
                steps: records.len(),
                mean_loss,
                images_per_sec: images as f64 / seconds,
            },
            records,
        ))
    }

    /// Snapshot of parameters, optimizer buffers, counters and a config echo.
    pub fn checkpoint(&mut self, config_echo: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        self.network.visit_params(&mut |p| {
            ckpt.push_f32(p.name.clone(), p.value.clone());
            ckpt.push_f32(format!("{}.momentum", p.name), p.momentum_buffer.clone());
        });
        self.network.visit_buffers(&mut |b| ckpt.push_f32(b.name, b.value.clone()));
        ckpt.push_counter("meta.epoch", self.epoch as u64);
        ckpt.push_counter("meta.step_in_epoch", self.step_in_epoch as u64);
        ckpt.push_counter("meta.global_step", self.global_step as u64);
        ckpt.push_counter("meta.seed", self.batches.seed);
        ckpt.push_text("meta.config", config_echo);
        ckpt
    }

    /// Restore state written by [`Trainer::checkpoint`] into a network of the
    /// same architecture.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut failure = None;
        self.network.visit_params(&mut |p| {
            let value = ckpt.f32(&p.name);
            let momentum = ckpt.f32(&format!("{}.momentum", p.name));
            match (value, momentum) {
                (Ok(v), Ok(m)) if v.dims() == p.value.dims() && m.dims() == p.value.dims() => {
                    p.value = v.clone();
                    p.momentum_buffer = m.clone();
                }
                _ => {
                    failure.get_or_insert_with(|| format!("checkpoint has no usable entry for {}", p.name));
                }
            }
        });
        self.network.visit_buffers(&mut |b| match ckpt.f32(&b.name) {
            Ok(v) if v.dims() == b.value.dims() => *b.value = v.clone(),
            _ => {
                failure.get_or_insert_with(|| format!("checkpoint has no usable entry for {}", b.name));
            }
        });
        if let Some(msg) = failure {
            return Err(Error::data(msg));
        }
        self.epoch = ckpt.counter("meta.epoch")? as usize;
        self.step_in_epoch = ckpt.counter("meta.step_in_epoch")? as usize;
        self.global_step = ckpt.counter("meta.global_step")? as usize;
        self.batches.seed = ckpt.counter("meta.seed")?;
        Ok(())
    }
}

/// Eval-mode logits for every sample, resized to `image_size`.
pub fn evaluate(network: &Network<f32>, data: &Dataset, image_size: usize, batch_size: usize) -> Result<PredictionSet> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut scores = Vec::with_capacity(data.len() * data.num_classes());
    let mut labels = Vec::with_capacity(data.len() * data.num_classes());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk, image_size)?;
        let logits = network.infer(&x)?;
        scores.extend(logits.data().iter().map(|&v| f64::from(v)));
        for &i in chunk {
            labels.extend_from_slice(&data.samples[i].labels);
        }
    }
    PredictionSet::new(scores, labels, data.class_names.clone())
}

/// Training-mode loss of a network as a function of its input and every
/// parameter, for finite-difference checks of the whole model.
pub struct NetworkLossOp {
    pub network: Network<f64>,
    pub labels: Tensor<f64>,
}

impl NetworkLossOp {
    /// Input image followed by every parameter value.
    pub fn inputs(&mut self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![x];
        v.extend(self.network.param_values());
        v
    }

    fn with_params(&self, inputs: &[Tensor<f64>]) -> Result<Network<f64>> {
        let mut net = self.network.clone();
        net.set_param_values(&inputs[1..])?;
        Ok(net)
    }
}

impl DifferentiableOp for NetworkLossOp {
    fn name(&self) -> String {
        "network_bce_loss".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let mut net = self.with_params(inputs)?;
        let logits = net.forward(&inputs[0], Mode::Train)?;
        let loss = bce_loss(&logits.map(sigmoid_scalar), &self.labels)?;
        Tensor::new(&[1], vec![loss])
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut net = self.with_params(inputs)?;
        net.zero_grad();
        let logits = net.forward(&inputs[0], Mode::Train)?;
        let (_, grad) = bce_with_logits(&logits, &self.labels)?;
        let gx = net.backward(&grad.scale(grad_out.data()[0]))?;
        let mut out = vec![gx];
        out.extend(net.gradients());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::csra::CsraHeadConfig;
    use crate::data::LabeledSample;
    use crate::nn::Param;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    fn scalar_param(value: f64, decay: bool) -> One {
        One(Param::new("p", t(&[1], &[value]), ParamGroup::Head, decay))
    }

    #[test]
    fn bce_closed_forms() {
        let loss = bce_loss(&t(&[1, 2], &[0.5, 0.5]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);

        let perfect = bce_loss(&t(&[1, 3], &[1.0, 0.0, 1.0]), &t(&[1, 3], &[1.0, 0.0, 1.0])).unwrap();
        assert!(perfect <= 3.0 * -(1.0 - PROB_EPS).ln() + 1e-15);
        assert!(perfect >= 0.0);

        // batch mean
        let two = bce_loss(&t(&[2, 2], &[0.5; 4]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((two - 2.0 * 2f64.ln()).abs() < 1e-12);

        let err = bce_loss(&t(&[1, 2], &[0.5, 0.5]), &t(&[1, 2], &[2.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.7, -0.4]);
        let y = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let (_, grad) = bce_with_logits(&z, &y).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut plus = z.clone();
            plus.data_mut()[i] += h;
            let mut minus = z.clone();
            minus.data_mut()[i] -= h;
            let numeric = (bce_with_logits(&plus, &y).unwrap().0 - bce_with_logits(&minus, &y).unwrap().0) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-8, "{i}: {numeric} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn sgd_hand_examples() {
        let mut p = scalar_param(1.0, true);
        sgd_momentum_step(&mut p, 0.1, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.0.value.data()[0], 1.0);

        p.0.grad.data_mut()[0] = 1.0;
        sgd_momentum_step(&mut p, 0.1, 0.1, 0.0, 0.0).unwrap();
        assert!((p.0.value.data()[0] - 0.9).abs() < 1e-15);

        let mut q = scalar_param(0.0, true);
        q.0.grad.data_mut()[0] = 1.0;
        sgd_momentum_step(&mut q, 0.1, 0.1, 0.9, 0.0).unwrap();
        sgd_momentum_step(&mut q, 0.1, 0.1, 0.9, 0.0).unwrap();
        assert!((q.0.value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn no_decay_params_stay_put() {
        let mut bn = scalar_param(3.0, false);
        sgd_momentum_step(&mut bn, 0.1, 0.1, 0.9, 0.5).unwrap();
        assert_eq!(bn.0.value.data()[0], 3.0);
        let mut w = scalar_param(3.0, true);
        sgd_momentum_step(&mut w, 0.1, 0.1, 0.9, 0.5).unwrap();
        assert!(w.0.value.data()[0] < 3.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar_param(1.0, true);
        p.0.grad.data_mut()[0] = f64::NAN;
        let err = sgd_momentum_step(&mut p, 0.1, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(p.0.value.data()[0], 1.0);
        assert_eq!(p.0.momentum_buffer.data()[0], 0.0);
    }

    #[test]
    fn warmup_ramp() {
        assert!((warmup_lr(0, 0.1, 10) - 0.01).abs() < 1e-15);
        assert_eq!(warmup_lr(10, 0.1, 10), 0.1);
        assert_eq!(warmup_lr(500, 0.1, 10), 0.1);
        assert_eq!(warmup_lr(0, 0.1, 0), 0.1);

        let cfg = OptimConfig {
            decay: LrDecay::Cosine,
            epochs: 2,
            warmup_steps: Some(2),
            ..OptimConfig::default()
        };
        assert_eq!(cfg.learning_rates(1, 10), (0.1, 0.01));
        let (end, _) = cfg.learning_rates(19, 10);
        assert!(end < 0.01);
    }

    proptest! {
        #[test]
        fn plain_gradient_descent(value in -5.0f64..5.0, g in -5.0f64..5.0, lr in 0.0f64..1.0) {
            let mut p = scalar_param(value, true);
            p.0.grad.data_mut()[0] = g;
            sgd_momentum_step(&mut p, lr, lr, 0.0, 0.0).unwrap();
            prop_assert_eq!(p.0.value.data()[0], value - lr * g);
        }

        #[test]
        fn bce_is_non_negative(p in 0.0f64..=1.0, y in 0u8..2) {
            let loss = bce_loss(&t(&[1, 1], &[p]), &t(&[1, 1], &[f64::from(y)])).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            class_names: vec!["a".into(), "b".into()],
            samples: (0..n)
                .map(|i| LabeledSample {
                    image: Tensor::uniform(&[3, 12, 12], 0.0, 1.0, &mut rng),
                    labels: vec![(i % 2) as u8, ((i / 2) % 2) as u8],
                })
                .collect(),
        }
    }

    fn toy_trainer(seed: u64, optim: OptimConfig) -> Trainer {
        let backbone = BackboneConfig {
            stage_widths: [8, 8, 16, 16],
            stem_width: 8,
            input_size: 8,
            ..BackboneConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&backbone, &CsraHeadConfig::new(2, 2, 0.1), &mut rng).unwrap();
        let maker = BatchMaker {
            seed,
            image_size: 8,
            augment: Some(AugmentConfig::default()),
        };
        Trainer::new(net, OptimConfig { batch_size: 4, ..optim }, maker).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_dataset(10, 1);
        let optim = OptimConfig {
            lr_head: 0.0,
            lr_backbone: 0.0,
            ..OptimConfig::default()
        };
        let mut trainer = toy_trainer(3, optim);
        let before = trainer.network.param_values();
        let (stats, records) = trainer.train_epoch(&data).unwrap();
        assert_eq!(stats.steps, 3);
        assert_eq!(records.len(), 3);
        assert_eq!(trainer.network.param_values(), before);
        assert_eq!((trainer.epoch, trainer.step_in_epoch, trainer.global_step), (1, 0, 3));
    }

    #[test]
    fn epoch_and_step_paths_agree_bitwise() {
        let data = toy_dataset(10, 2);
        let mut a = toy_trainer(5, OptimConfig::default());
        let mut b = toy_trainer(5, OptimConfig::default());
        let (_, ra) = a.train_epoch(&data).unwrap();
        let rb = b.train_steps(&data, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.network.param_values(), b.network.param_values());
    }

    #[test]
    fn resume_continues_trajectory() {
        let data = toy_dataset(10, 3);
        let mut straight = toy_trainer(8, OptimConfig::default());
        let full = straight.train_steps(&data, 5).unwrap();

        let mut first = toy_trainer(8, OptimConfig::default());
        first.train_steps(&data, 2).unwrap();
        let bytes = first.checkpoint("echo").to_bytes();
        let mut resumed = toy_trainer(99, OptimConfig::default());
        resumed.restore(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let rest = resumed.train_steps(&data, 3).unwrap();
        for (x, y) in full[2..].iter().zip(&rest) {
            assert!((x.loss - y.loss).abs() < 1e-6);
            assert_eq!(x.step, y.step);
        }
    }

    #[test]
    fn empty_or_mismatched_data() {
        let mut trainer = toy_trainer(1, OptimConfig::default());
        let empty = Dataset {
            class_names: vec!["a".into(), "b".into()],
            samples: vec![],
        };
        assert!(matches!(trainer.train_epoch(&empty), Err(Error::Data(_))));
        let mut wrong = toy_dataset(4, 1);
        wrong.class_names.push("c".into());
        assert!(trainer.train_steps(&wrong, 1).is_err());
    }
}
