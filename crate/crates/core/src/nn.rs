//! Parameterized layers built on the primitives in [`crate::ops`].
//!
//! Layers cache what their backward pass needs during `forward`; `infer`
//! is the cache-free eval-mode path usable through a shared reference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, Mode, RunningStats};
use crate::tensor::{Scalar, Tensor};

/// Optimizer learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// A trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum_buffer: Tensor<T>,
    pub group: ParamGroup,
    /// Batch-norm scale and shift are excluded from weight decay.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, group: ParamGroup, decay: bool) -> Self {
        Self {
            name: name.into(),
            grad: Tensor::zeros_like(&value),
            momentum_buffer: Tensor::zeros_like(&value),
            value,
            group,
            decay,
        }
    }

    pub fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Non-trainable state persisted alongside parameters.
pub struct BufferMut<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
}

/// Anything owning parameters and buffers.
pub trait Module<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(BufferMut<'_, T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.value.len());
        total
    }

    /// Parameter values in visiting order.
    fn param_values(&mut self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }

    /// Overwrite parameter values in visiting order.
    fn set_param_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut i = 0;
        let mut failure = None;
        self.visit_params(&mut |p| {
            match values.get(i) {
                Some(v) if v.dims() == p.value.dims() => p.value = v.clone(),
                Some(v) if failure.is_none() => {
                    failure = Some(format!("{}: expected {:?}, got {:?}", p.name, p.value.dims(), v.dims()))
                }
                None if failure.is_none() => failure = Some(format!("no value for {}", p.name)),
                _ => {}
            }
            i += 1;
        });
        match failure {
            Some(msg) => Err(Error::config(msg)),
            None if i != values.len() => Err(Error::config(format!(
                "{} values for {i} parameters",
                values.len()
            ))),
            None => Ok(()),
        }
    }

    fn gradients(&mut self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.grad.clone()));
        out
    }
}

/// He (Kaiming) fan-in normal initialization.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Self {
            weight: Param::new(format!("{name}.weight"), weight, group, true),
            bias: with_bias
                .then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]), group, true)),
            stride,
            padding,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or_else(missing_forward)?;
        let grads = ops::conv2d_backward(
            &input,
            &self.weight.value,
            self.bias.is_some(),
            self.stride,
            self.padding,
            grad_out,
        )?;
        self.weight.accumulate(&grads.weight)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), grads.bias.as_ref()) {
            b.accumulate(gb)?;
        }
        Ok(grads.input)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(b);
        }
    }
}

pub(crate) fn missing_forward() -> Error {
    Error::config("backward called without a preceding forward")
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: RunningStats<T>,
    name: String,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                group,
                false,
            ),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), group, false),
            stats: RunningStats::new(channels),
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut stats = self.stats.clone();
        Ok(ops::batchnorm2d(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut stats,
            Mode::Eval,
            T::lit(BN_EPS),
        )?
        .0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = ops::batchnorm2d(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.stats,
            mode,
            T::lit(BN_EPS),
        )?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_forward)?;
        let (gx, gg, gb) = ops::batchnorm2d_backward(&cache, &self.gamma.value, grad_out)?;
        self.gamma.accumulate(&gg)?;
        self.beta.accumulate(&gb)?;
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        f(BufferMut {
            name: format!("{}.running_mean", self.name),
            value: &mut self.stats.mean,
        });
        f(BufferMut {
            name: format!("{}.running_var", self.name),
            value: &mut self.stats.var,
        });
    }
}

/// Convolution, optional batch norm, optional relu.
///
/// Without batch norm the convolution carries a bias.
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub relu: bool,
    output: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        spec: ConvSpec,
        batch_norm: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                spec.cin,
                spec.cout,
                spec.kernel,
                spec.stride,
                spec.kernel / 2,
                !batch_norm,
                group,
                rng,
            ),
            bn: batch_norm.then(|| BatchNorm2d::new(&format!("{name}.bn"), spec.cout, group)),
            relu: spec.relu,
            output: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv.infer(x)?;
        if let Some(bn) = &self.bn {
            y = bn.infer(&y)?;
        }
        Ok(if self.relu { ops::relu(&y) } else { y })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = self.bn.as_mut() {
            y = bn.forward(&y, mode)?;
        }
        if self.relu {
            y = ops::relu(&y);
            self.output = Some(y.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = if self.relu {
            let out = self.output.take().ok_or_else(missing_forward)?;
            ops::relu_backward(&out, grad_out)?
        } else {
            grad_out.clone()
        };
        if let Some(bn) = self.bn.as_mut() {
            g = bn.backward(&g)?;
        }
        self.conv.backward(&g)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

impl<T: Scalar> Module<T> for ConvUnit<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_buffers(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::maxpool2d(x, self.kernel, self.stride, self.padding)?.0)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = ops::maxpool2d(x, self.kernel, self.stride, self.padding)?;
        self.cache = Some((x.dims().to_vec(), argmax));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (dims, argmax) = self.cache.take().ok_or_else(missing_forward)?;
        ops::maxpool2d_backward(&dims, &argmax, grad_out)
    }
}

/// Split an NCHW tensor into consecutive channel groups.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.nchw()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::config(format!(
            "channel split {sizes:?} does not cover {c} channels"
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = sizes
        .iter()
        .map(|&s| Vec::with_capacity(n * s * plane))
        .collect();
    for sample in x.data().chunks(c * plane) {
        let mut offset = 0;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&sample[offset * plane..(offset + s) * plane]);
            offset += s;
        }
    }
    Ok(parts
        .into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor::from_parts(vec![n, s, h, w], data))
        .collect())
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts
        .first()
        .ok_or_else(|| Error::config("nothing to concatenate"))?
        .nchw()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::config(format!(
                "cannot concatenate {:?} with {:?}",
                p.dims(),
                parts[0].dims()
            )));
        }
        total += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for p in parts {
            let pc = p.dims()[1];
            data.extend_from_slice(&p.data()[s * pc * plane..(s + 1) * pc * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_concat_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 6, 3, 3], 1.0, &mut rng);
        let parts = split_channels(&x, &[1, 2, 3]).unwrap();
        assert_eq!(parts[2].dims(), &[2, 3, 3, 3]);
        assert_eq!(concat_channels(&parts).unwrap(), x);
        assert!(split_channels(&x, &[2, 2]).is_err());
    }

    #[test]
    fn conv_unit_without_bn_has_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec {
            cin: 2,
            cout: 3,
            kernel: 3,
            stride: 1,
            relu: true,
        };
        let mut unit = ConvUnit::<f32>::new("u", spec, false, ParamGroup::Backbone, &mut rng);
        let mut names = Vec::new();
        unit.visit_params(&mut |p| names.push(p.name.clone()));
        assert_eq!(names, ["u.conv.weight", "u.conv.bias"]);

        let mut unit = ConvUnit::<f32>::new("u", spec, true, ParamGroup::Backbone, &mut rng);
        let mut decays = Vec::new();
        unit.visit_params(&mut |p| decays.push((p.name.clone(), p.decay)));
        assert_eq!(
            decays,
            [
                ("u.conv.weight".to_string(), true),
                ("u.bn.gamma".to_string(), false),
                ("u.bn.beta".to_string(), false)
            ]
        );
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f32>::new("c", 1, 1, 1, 1, 0, false, ParamGroup::Head, &mut rng);
        assert!(conv.backward(&Tensor::zeros(&[1, 1, 1, 1])).is_err());
    }
}
