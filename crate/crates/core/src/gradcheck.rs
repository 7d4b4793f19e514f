//! Finite-difference verification of analytic gradients.
//!
//! An op is reduced to the scalar `L = Σ r ⊙ op(inputs)` with a fixed random
//! projection `r`; the analytic gradient of `L` is `op.backward(inputs, r)`
//! and is compared against central differences of `L` element by element.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Block, ResNetBlock, Res2NetBlock};
use crate::csra::{default_temperatures, CsraHeadConfig, CsraHeadOp};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Module;
use crate::training::NetworkLossOp;
use crate::ops::{self, Mode, RunningStats};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// An operation with an analytic backward pass, evaluated in `f64`.
pub trait DifferentiableOp {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Gradient of `Σ grad_out ⊙ forward(inputs)` w.r.t. every input.
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>)
        -> Result<Vec<Tensor<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    /// Max relative error per argument, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let errs: Vec<String> = self
            .max_rel_error
            .iter()
            .map(|e| format!("{e:.2e}"))
            .collect();
        write!(
            f,
            "{} {:<28} max rel err [{}] (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            errs.join(", "),
            self.tolerance
        )
    }
}

/// Denominator floor for the relative error. Gradients smaller than this are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn gradient_check(
    op: &dyn DifferentiableOp,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    gradient_check_sampled(op, inputs, tolerance, None)
}

/// Like [`gradient_check`] but probing at most `max_coords` seeded-random
/// coordinates of each input.
pub fn gradient_check_sampled(
    op: &dyn DifferentiableOp,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!(
            "gradient check of {}: non-finite input",
            op.name()
        )));
    }
    let out = op.forward(inputs)?;
    let again = op.forward(inputs)?;
    if out.dims() != again.dims()
        || out
            .data()
            .iter()
            .zip(again.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::Numerical(format!(
            "refusing to gradient-check {}: forward is not deterministic",
            op.name()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let projection = Tensor::<f64>::randn(out.dims(), 1.0, &mut rng);
    let analytic = op.backward(inputs, &projection)?;
    if analytic.len() != inputs.len() {
        return Err(Error::config(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let loss = |args: &[Tensor<f64>]| -> Result<f64> { op.forward(args)?.dot(&projection) };

    let mut work = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (arg, grad) in analytic.iter().enumerate() {
        inputs[arg].expect_same_dims(grad)?;
        let mut worst = 0.0f64;
        let mut coords: Vec<usize> = (0..inputs[arg].len()).collect();
        if let Some(limit) = max_coords.filter(|&l| l < coords.len()) {
            coords.shuffle(&mut rng);
            coords.truncate(limit);
        }
        for k in coords {
            let original = inputs[arg].data()[k];
            work[arg].data_mut()[k] = original + STEP;
            let plus = loss(&work)?;
            work[arg].data_mut()[k] = original - STEP;
            let minus = loss(&work)?;
            work[arg].data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport {
        op: op.name(),
        max_rel_error,
        tolerance,
    })
}

/// Random normal samples pushed at least `margin` away from zero, for ops
/// with a kink at the origin.
pub fn randn_away_from_zero(dims: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(dims, 1.0, rng).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// Values whose pairwise gaps are all at least `gap`, in shuffled order, so
/// every pooling window has a unique maximum.
pub fn distinct_values(dims: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    vals.shuffle(rng);
    Tensor::from_parts(dims.to_vec(), vals)
}

pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
    pub with_bias: bool,
}

impl DifferentiableOp for Conv2dOp {
    fn name(&self) -> String {
        format!("conv2d(s={},p={})", self.stride, self.padding)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let bias = if self.with_bias { inputs.get(2) } else { None };
        ops::conv2d(&inputs[0], &inputs[1], bias, self.stride, self.padding)
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let grads = ops::conv2d_backward(
            &inputs[0],
            &inputs[1],
            self.with_bias,
            self.stride,
            self.padding,
            g,
        )?;
        let mut out = vec![grads.input, grads.weight];
        out.extend(grads.bias);
        Ok(out)
    }
}

/// Batch norm over `[input, gamma, beta]` in either mode. Running statistics
/// start fresh on every call, so the op is a pure function of its inputs.
pub struct BatchNormOp {
    pub mode: Mode,
}

impl BatchNormOp {
    fn stats(&self, channels: usize) -> RunningStats<f64> {
        let mut stats = RunningStats::new(channels);
        // non-trivial eval statistics
        for i in 0..channels {
            stats.mean.data_mut()[i] = 0.1 * i as f64;
            stats.var.data_mut()[i] = 1.5 + 0.2 * i as f64;
        }
        stats
    }
}

impl DifferentiableOp for BatchNormOp {
    fn name(&self) -> String {
        format!("batchnorm2d({:?})", self.mode).to_lowercase()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let mut stats = self.stats(inputs[1].len());
        Ok(ops::batchnorm2d(&inputs[0], &inputs[1], &inputs[2], &mut stats, self.mode, 1e-5)?.0)
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut stats = self.stats(inputs[1].len());
        let (_, cache) =
            ops::batchnorm2d(&inputs[0], &inputs[1], &inputs[2], &mut stats, self.mode, 1e-5)?;
        let (gx, gg, gb) = ops::batchnorm2d_backward(&cache, &inputs[1], g)?;
        Ok(vec![gx, gg, gb])
    }
}

pub struct ReluOp;

impl DifferentiableOp for ReluOp {
    fn name(&self) -> String {
        "relu".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::relu(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::relu_backward(&inputs[0], g)?])
    }
}

pub struct MaxPoolOp {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DifferentiableOp for MaxPoolOp {
    fn name(&self) -> String {
        format!("maxpool2d(k={},s={},p={})", self.kernel, self.stride, self.padding)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::maxpool2d(&inputs[0], self.kernel, self.stride, self.padding)?.0)
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, argmax) = ops::maxpool2d(&inputs[0], self.kernel, self.stride, self.padding)?;
        Ok(vec![ops::maxpool2d_backward(inputs[0].dims(), &argmax, g)?])
    }
}

pub struct LinearOp;

impl DifferentiableOp for LinearOp {
    fn name(&self) -> String {
        "linear".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::linear(&inputs[0], &inputs[1], inputs.get(2))
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (gx, gw, gb) = ops::linear_backward(&inputs[0], &inputs[1], g)?;
        let mut out = vec![gx, gw];
        if inputs.len() > 2 {
            out.push(gb);
        }
        Ok(out)
    }
}

pub struct SoftmaxOp {
    pub temperature: f64,
    pub axis: usize,
}

impl DifferentiableOp for SoftmaxOp {
    fn name(&self) -> String {
        format!("softmax(T={},axis={})", self.temperature, self.axis)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::softmax_with_temperature(&inputs[0], self.temperature, self.axis)
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let s = self.forward(inputs)?;
        Ok(vec![ops::softmax_with_temperature_backward(
            &s,
            self.temperature,
            self.axis,
            g,
        )?])
    }
}

pub struct SigmoidOp;

impl DifferentiableOp for SigmoidOp {
    fn name(&self) -> String {
        "sigmoid".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::sigmoid(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::sigmoid_backward(&ops::sigmoid(&inputs[0]), g)?])
    }
}

/// Checks for every primitive op on small random inputs.
pub fn primitive_suite(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut reports = Vec::new();

    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[5], 1.0, &mut rng);
    reports.push(gradient_check(&LinearOp, &[x, w, b], tolerance)?);

    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let op = Conv2dOp {
            stride,
            padding,
            with_bias: true,
        };
        reports.push(gradient_check(&op, &[x, w, b], tolerance)?);
    }
    let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 4, 1, 1], 1.0, &mut rng);
    let op = Conv2dOp {
        stride: 1,
        padding: 0,
        with_bias: false,
    };
    reports.push(gradient_check(&op, &[x, w], tolerance)?);

    for mode in [Mode::Train, Mode::Eval] {
        let x = Tensor::randn(&[3, 2, 3, 3], 1.5, &mut rng);
        let g = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        reports.push(gradient_check(&BatchNormOp { mode }, &[x, g, b], tolerance)?);
    }

    let x = randn_away_from_zero(&[2, 3, 4], 0.1, &mut rng);
    reports.push(gradient_check(&ReluOp, &[x], tolerance)?);

    let x = distinct_values(&[2, 2, 6, 6], 0.1, &mut rng);
    let op = MaxPoolOp {
        kernel: 2,
        stride: 2,
        padding: 0,
    };
    reports.push(gradient_check(&op, &[x], tolerance)?);
    let x = distinct_values(&[1, 2, 7, 7], 0.1, &mut rng);
    let op = MaxPoolOp {
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    reports.push(gradient_check(&op, &[x], tolerance)?);

    for (temperature, axis) in [(1.0, 1), (3.0, 2), (0.2, 0)] {
        let z = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        reports.push(gradient_check(&SoftmaxOp { temperature, axis }, &[z], tolerance)?);
    }

    let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
    reports.push(gradient_check(&SigmoidOp, &[x], tolerance)?);

    Ok(reports)
}

/// A residual block as a function of its input and every parameter.
pub struct BlockOp {
    pub block: Block<f64>,
    pub mode: Mode,
}

impl BlockOp {
    /// Input followed by every parameter value.
    pub fn inputs(&mut self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![x];
        v.extend(self.block.param_values());
        v
    }

    fn with_params(&self, inputs: &[Tensor<f64>]) -> Result<Block<f64>> {
        let mut block = self.block.clone();
        block.set_param_values(&inputs[1..])?;
        Ok(block)
    }
}

impl DifferentiableOp for BlockOp {
    fn name(&self) -> String {
        match &self.block {
            Block::ResNet(_) => "resnet_block".into(),
            Block::Res2Net(b) => format!("res2net_block(s={},stride={})", b.scale, b.stride),
        }
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.with_params(inputs)?.forward(&inputs[0], self.mode)
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut block = self.with_params(inputs)?;
        block.zero_grad();
        block.forward(&inputs[0], self.mode)?;
        let gx = block.backward(grad_out)?;
        let mut out = vec![gx];
        out.extend(block.gradients());
        Ok(out)
    }
}

/// Coordinates probed per parameter tensor in the whole-network check.
pub const NETWORK_COORDS_PER_TENSOR: usize = 24;

/// Residual blocks, the attention head and the composed tiny-network loss.
pub fn model_suite(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut reports = Vec::new();

    for (stride, scale) in [(1, 4), (2, 4), (1, 2)] {
        let block = Res2NetBlock::new("b", 6, 8, 10, stride, scale, true, &mut rng)?;
        let mut op = BlockOp {
            block: Block::Res2Net(block),
            mode: Mode::Train,
        };
        let inputs = op.inputs(Tensor::randn(&[2, 6, 5, 5], 1.0, &mut rng));
        reports.push(gradient_check(&op, &inputs, tolerance)?);
    }
    let mut op = BlockOp {
        block: Block::ResNet(ResNetBlock::new("b", 6, 4, 8, 2, true, &mut rng)),
        mode: Mode::Train,
    };
    let inputs = op.inputs(Tensor::randn(&[2, 6, 4, 4], 1.0, &mut rng));
    reports.push(gradient_check(&op, &inputs, tolerance)?);

    for heads in [1, 2, 4] {
        let op = CsraHeadOp {
            temperatures: default_temperatures(heads),
            lambda: 0.3,
        };
        let x = Tensor::randn(&[2, 5, 3, 3], 1.0, &mut rng);
        let m = Tensor::randn(&[4, 5], 0.5, &mut rng);
        reports.push(gradient_check(&op, &[x, m], tolerance)?);
    }

    let config = BackboneConfig {
        input_size: 8,
        ..BackboneConfig::tiny()
    };
    let network = Network::build(&config, &CsraHeadConfig::new(3, 2, 0.1), &mut rng)?;
    let labels = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
    let mut op = NetworkLossOp { network, labels };
    let inputs = op.inputs(Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng));
    reports.push(gradient_check_sampled(&op, &inputs, tolerance, Some(NETWORK_COORDS_PER_TENSOR))?);

    Ok(reports)
}

/// Every primitive followed by the model-level checks.
pub fn full_suite(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = primitive_suite(tolerance)?;
    reports.extend(model_suite(tolerance)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_conv_relu_within_one_in_a_million() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let r = gradient_check(&LinearOp, &[x, w], 1e-6).unwrap();
        assert!(r.passed(), "{r}");

        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let op = Conv2dOp {
            stride: 2,
            padding: 1,
            with_bias: false,
        };
        let r = gradient_check(&op, &[x, w], 1e-6).unwrap();
        assert!(r.passed(), "{r}");

        let x = randn_away_from_zero(&[4, 4], 0.1, &mut rng);
        let r = gradient_check(&ReluOp, &[x], 1e-6).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn model_suite_passes() {
        let reports = model_suite(1e-5).unwrap();
        assert_eq!(reports.len(), 8);
        for r in reports {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn every_primitive_passes() {
        for r in primitive_suite(1e-5).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    struct Flaky(std::cell::Cell<f64>);

    impl DifferentiableOp for Flaky {
        fn name(&self) -> String {
            "flaky".into()
        }
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            self.0.set(self.0.get() + 1.0);
            Ok(inputs[0].map(|v| v + self.0.get()))
        }
        fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
            let _ = inputs;
            Ok(vec![g.clone()])
        }
    }

    #[test]
    fn refuses_nondeterministic_op() {
        let err = gradient_check(
            &Flaky(std::cell::Cell::new(0.0)),
            &[Tensor::zeros(&[2])],
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not deterministic"));
    }

    #[test]
    fn detects_wrong_gradient() {
        struct Wrong;
        impl DifferentiableOp for Wrong {
            fn name(&self) -> String {
                "square-with-bad-grad".into()
            }
            fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
                Ok(inputs[0].map(|v| v * v))
            }
            fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
                Ok(vec![inputs[0].zip_map(g, |x, g| x * g)?])
            }
        }
        let x = Tensor::new(&[3], vec![1.0, 2.0, -1.5]).unwrap();
        let r = gradient_check(&Wrong, &[x], 1e-5).unwrap();
        assert!(!r.passed());
        assert!((r.worst() - 0.5).abs() < 1e-6);
    }
}
