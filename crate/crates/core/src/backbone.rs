//! Multi-scale residual feature extractor.
//!
//! Four stages of bottleneck blocks after a stem. Each block is either a
//! plain bottleneck (1×1 reduce, 3×3, 1×1 expand) or a hierarchical
//! multi-scale bottleneck whose 3×3 stage is split into `scale` channel
//! groups: `y_1 = x_1`, `y_i = conv3x3(x_i + y_{i-1})`. Each extra group in
//! the chain widens the receptive field by one 3×3 window.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, missing_forward, split_channels, BufferMut, ConvSpec, ConvUnit, MaxPool2d,
    Module, Param, ParamGroup,
};
use crate::ops::{self, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Res2Net,
    ResNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stem {
    /// 7×7 stride-2 convolution then 3×3 stride-2 max pooling.
    Full,
    /// Single 3×3 stride-1 convolution, for small images.
    Tiny,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub block_kind: BlockKind,
    /// Blocks per stage.
    pub stage_blocks: [usize; 4],
    /// Output channels of each stage.
    pub stage_widths: [usize; 4],
    /// Stride of the first block of each stage.
    pub stage_strides: [usize; 4],
    /// Channel groups inside a multi-scale block.
    pub scale: usize,
    pub stem: Stem,
    pub stem_width: usize,
    /// Stage width divided by the bottleneck (3×3) width.
    pub bottleneck_ratio: usize,
    pub input_size: usize,
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn paper50() -> Self {
        Self {
            block_kind: BlockKind::Res2Net,
            stage_blocks: [3, 4, 6, 3],
            stage_widths: [256, 512, 1024, 2048],
            stage_strides: [1, 2, 2, 2],
            scale: 4,
            stem: Stem::Full,
            stem_width: 64,
            bottleneck_ratio: 4,
            input_size: 448,
            batch_norm: true,
        }
    }

    pub fn paper101() -> Self {
        Self {
            stage_blocks: [3, 4, 23, 3],
            ..Self::paper50()
        }
    }

    pub fn tiny() -> Self {
        Self {
            block_kind: BlockKind::Res2Net,
            stage_blocks: [1, 1, 1, 1],
            stage_widths: [16, 32, 64, 128],
            stage_strides: [1, 2, 2, 1],
            scale: 4,
            stem: Stem::Tiny,
            stem_width: 16,
            bottleneck_ratio: 2,
            input_size: 32,
            batch_norm: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper50" => Ok(Self::paper50()),
            "paper101" => Ok(Self::paper101()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown backbone preset {other:?} (expected paper50, paper101 or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.iter().any(|&k| k == 0) {
            return Err(Error::config(format!(
                "every stage needs at least one block, got {:?}",
                self.stage_blocks
            )));
        }
        if self.bottleneck_ratio == 0 || self.stem_width == 0 {
            return Err(Error::config("bottleneck ratio and stem width must be positive"));
        }
        for &w in &self.stage_widths {
            if w == 0 || w % self.bottleneck_ratio != 0 {
                return Err(Error::config(format!(
                    "stage width {w} not divisible by bottleneck ratio {}",
                    self.bottleneck_ratio
                )));
            }
            let inner = w / self.bottleneck_ratio;
            if self.block_kind == BlockKind::Res2Net && inner % self.scale.max(1) != 0 {
                return Err(Error::config(format!(
                    "bottleneck width {inner} not divisible by scale {}",
                    self.scale
                )));
            }
        }
        if self.block_kind == BlockKind::Res2Net && self.scale < 2 {
            return Err(Error::config(format!(
                "multi-scale blocks need scale >= 2, got {}",
                self.scale
            )));
        }
        if self.stage_strides.iter().any(|s| !(1..=2).contains(s)) {
            return Err(Error::config(format!(
                "stage strides must be 1 or 2, got {:?}",
                self.stage_strides
            )));
        }
        let min_input = self.downsample().max(8);
        if self.input_size < min_input || self.input_size % self.downsample() != 0 {
            return Err(Error::config(format!(
                "input size {} must be a multiple of {} and at least {min_input}",
                self.input_size,
                self.downsample()
            )));
        }
        Ok(())
    }

    /// Total spatial reduction from input to feature map.
    pub fn downsample(&self) -> usize {
        let stem = match self.stem {
            Stem::Full => 4,
            Stem::Tiny => 1,
        };
        stem * self.stage_strides.iter().product::<usize>()
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_widths[3]
    }

    /// `(d, h, w)` of the feature map for a square input of `size` pixels.
    pub fn feature_shape(&self, size: usize) -> (usize, usize, usize) {
        let s = size / self.downsample();
        (self.feature_dim(), s, s)
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }
}

/// Backbone output `x` of shape `[N, d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        tensor.nchw()?;
        Ok(Self { tensor })
    }

    /// `(N, d, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.tensor.nchw().expect("feature maps are rank 4")
    }
}

fn skip_unit<T: Scalar, R: Rng + ?Sized>(
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
    batch_norm: bool,
    rng: &mut R,
) -> Option<ConvUnit<T>> {
    (cin != cout || stride != 1).then(|| {
        ConvUnit::new(
            &format!("{name}.skip"),
            ConvSpec {
                cin,
                cout,
                kernel: 1,
                stride,
                relu: false,
            },
            batch_norm,
            ParamGroup::Backbone,
            rng,
        )
    })
}

fn unit<T: Scalar, R: Rng + ?Sized>(
    name: String,
    spec: ConvSpec,
    batch_norm: bool,
    rng: &mut R,
) -> ConvUnit<T> {
    ConvUnit::new(&name, spec, batch_norm, ParamGroup::Backbone, rng)
}

/// Plain bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, skip, relu.
#[derive(Clone, Debug)]
pub struct ResNetBlock<T> {
    pub reduce: ConvUnit<T>,
    pub mid: ConvUnit<T>,
    pub expand: ConvUnit<T>,
    pub skip: Option<ConvUnit<T>>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> ResNetBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        stride: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let spec = |cin, cout, kernel, stride, relu| ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            relu,
        };
        Self {
            reduce: unit(format!("{name}.reduce"), spec(cin, width, 1, 1, true), batch_norm, rng),
            mid: unit(format!("{name}.mid"), spec(width, width, 3, stride, true), batch_norm, rng),
            expand: unit(format!("{name}.expand"), spec(width, cout, 1, 1, false), batch_norm, rng),
            skip: skip_unit(name, cin, cout, stride, batch_norm, rng),
            output: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.expand.infer(&self.mid.infer(&self.reduce.infer(x)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.infer(x)?,
            None => x.clone(),
        };
        Ok(ops::relu(&y.add(&skip).map_err(skip_mismatch)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let r = self.reduce.forward(x, mode)?;
        let m = self.mid.forward(&r, mode)?;
        let y = self.expand.forward(&m, mode)?;
        let skip = match self.skip.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        let out = ops::relu(&y.add(&skip).map_err(skip_mismatch)?);
        self.output = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output.take().ok_or_else(missing_forward)?;
        let g = ops::relu_backward(&out, grad_out)?;
        let g_skip = match self.skip.as_mut() {
            Some(s) => s.backward(&g)?,
            None => g.clone(),
        };
        let g_main = self
            .reduce
            .backward(&self.mid.backward(&self.expand.backward(&g)?)?)?;
        g_main.add(&g_skip)
    }
}

fn skip_mismatch(e: Error) -> Error {
    Error::config(format!("residual branch and skip disagree: {e}"))
}

impl<T: Scalar> Module<T> for ResNetBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.reduce.visit_params(f);
        self.mid.visit_params(f);
        self.expand.visit_params(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        self.reduce.visit_buffers(f);
        self.mid.visit_buffers(f);
        self.expand.visit_buffers(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_buffers(f);
        }
    }
}

/// Hierarchical multi-scale bottleneck.
///
/// At stride 1 the first group passes through unchanged (unless `scale` is
/// 1, where the single group is convolved and the block reduces to
/// [`ResNetBlock`]). A strided block convolves every group independently,
/// since the running sum would mix resolutions.
#[derive(Clone, Debug)]
pub struct Res2NetBlock<T> {
    pub reduce: ConvUnit<T>,
    pub groups: Vec<Option<ConvUnit<T>>>,
    pub expand: ConvUnit<T>,
    pub skip: Option<ConvUnit<T>>,
    pub scale: usize,
    pub stride: usize,
    group_width: usize,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Res2NetBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        stride: usize,
        scale: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if scale == 0 || width % scale != 0 {
            return Err(Error::config(format!(
                "bottleneck width {width} not divisible by scale {scale}"
            )));
        }
        let gw = width / scale;
        let reduce = unit(
            format!("{name}.reduce"),
            ConvSpec {
                cin,
                cout: width,
                kernel: 1,
                stride: 1,
                relu: true,
            },
            batch_norm,
            rng,
        );
        let groups = (0..scale)
            .map(|i| {
                let identity = i == 0 && stride == 1 && scale > 1;
                (!identity).then(|| {
                    let group_name = if scale == 1 {
                        format!("{name}.mid")
                    } else {
                        format!("{name}.group{}", i + 1)
                    };
                    unit(
                        group_name,
                        ConvSpec {
                            cin: gw,
                            cout: gw,
                            kernel: 3,
                            stride,
                            relu: true,
                        },
                        batch_norm,
                        rng,
                    )
                })
            })
            .collect();
        let expand = unit(
            format!("{name}.expand"),
            ConvSpec {
                cin: width,
                cout,
                kernel: 1,
                stride: 1,
                relu: false,
            },
            batch_norm,
            rng,
        );
        Ok(Self {
            reduce,
            groups,
            expand,
            skip: skip_unit(name, cin, cout, stride, batch_norm, rng),
            scale,
            stride,
            group_width: gw,
            output: None,
        })
    }

    fn hierarchical(&self) -> bool {
        self.stride == 1
    }

    /// Outputs `y_1..y_s` of the multi-scale stage, eval mode.
    pub fn group_outputs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let r = self.reduce.infer(x)?;
        let parts = split_channels(&r, &vec![self.group_width; self.scale])?;
        let mut ys: Vec<Tensor<T>> = Vec::with_capacity(self.scale);
        for (i, part) in parts.into_iter().enumerate() {
            let input = match ys.last() {
                Some(prev) if self.hierarchical() => part.add(prev)?,
                _ => part,
            };
            ys.push(match &self.groups[i] {
                Some(u) => u.infer(&input)?,
                None => input,
            });
        }
        Ok(ys)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cat = concat_channels(&self.group_outputs(x)?)?;
        let y = self.expand.infer(&cat)?;
        let skip = match &self.skip {
            Some(s) => s.infer(x)?,
            None => x.clone(),
        };
        Ok(ops::relu(&y.add(&skip).map_err(skip_mismatch)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let r = self.reduce.forward(x, mode)?;
        let parts = split_channels(&r, &vec![self.group_width; self.scale])?;
        let hierarchical = self.hierarchical();
        let mut ys: Vec<Tensor<T>> = Vec::with_capacity(self.scale);
        for (i, part) in parts.into_iter().enumerate() {
            let input = match ys.last() {
                Some(prev) if hierarchical => part.add(prev)?,
                _ => part,
            };
            ys.push(match self.groups[i].as_mut() {
                Some(u) => u.forward(&input, mode)?,
                None => input,
            });
        }
        let y = self.expand.forward(&concat_channels(&ys)?, mode)?;
        let skip = match self.skip.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        let out = ops::relu(&y.add(&skip).map_err(skip_mismatch)?);
        self.output = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output.take().ok_or_else(missing_forward)?;
        let g = ops::relu_backward(&out, grad_out)?;
        let g_skip = match self.skip.as_mut() {
            Some(s) => s.backward(&g)?,
            None => g.clone(),
        };
        let g_cat = self.expand.backward(&g)?;
        let mut g_ys = split_channels(&g_cat, &vec![self.group_width; self.scale])?;
        let hierarchical = self.hierarchical();
        let mut g_parts = vec![None; self.scale];
        for i in (0..self.scale).rev() {
            let g_in = match self.groups[i].as_mut() {
                Some(u) => u.backward(&g_ys[i])?,
                None => g_ys[i].clone(),
            };
            if hierarchical && i > 0 {
                g_ys[i - 1].add_assign(&g_in)?;
            }
            g_parts[i] = Some(g_in);
        }
        let g_parts: Vec<Tensor<T>> = g_parts.into_iter().flatten().collect();
        let g_main = self.reduce.backward(&concat_channels(&g_parts)?)?;
        g_main.add(&g_skip)
    }
}

impl<T: Scalar> Module<T> for Res2NetBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.reduce.visit_params(f);
        for g in self.groups.iter_mut().flatten() {
            g.visit_params(f);
        }
        self.expand.visit_params(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        self.reduce.visit_buffers(f);
        for g in self.groups.iter_mut().flatten() {
            g.visit_buffers(f);
        }
        self.expand.visit_buffers(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_buffers(f);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block<T> {
    ResNet(ResNetBlock<T>),
    Res2Net(Res2NetBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::ResNet(b) => b.infer(x),
            Block::Res2Net(b) => b.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Block::ResNet(b) => b.forward(x, mode),
            Block::Res2Net(b) => b.forward(x, mode),
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::ResNet(b) => b.backward(g),
            Block::Res2Net(b) => b.backward(g),
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Block::ResNet(b) => b.visit_params(f),
            Block::Res2Net(b) => b.visit_params(f),
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        match self {
            Block::ResNet(b) => b.visit_buffers(f),
            Block::Res2Net(b) => b.visit_buffers(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T = f32> {
    pub config: BackboneConfig,
    pub stem: ConvUnit<T>,
    pub pool: Option<MaxPool2d>,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn build<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bn = config.batch_norm;
        let (kernel, stride) = match config.stem {
            Stem::Full => (7, 2),
            Stem::Tiny => (3, 1),
        };
        let stem = unit(
            "backbone.stem".into(),
            ConvSpec {
                cin: 3,
                cout: config.stem_width,
                kernel,
                stride,
                relu: true,
            },
            bn,
            rng,
        );
        let pool = (config.stem == Stem::Full).then(|| MaxPool2d::new(3, 2, 1));
        let mut blocks = Vec::with_capacity(config.total_blocks());
        let mut cin = config.stem_width;
        for (stage, (&count, &cout)) in config
            .stage_blocks
            .iter()
            .zip(&config.stage_widths)
            .enumerate()
        {
            let width = cout / config.bottleneck_ratio;
            for j in 0..count {
                let stride = if j == 0 { config.stage_strides[stage] } else { 1 };
                let name = format!("backbone.stage{}.block{}", stage + 1, j);
                blocks.push(match config.block_kind {
                    BlockKind::ResNet => {
                        Block::ResNet(ResNetBlock::new(&name, cin, width, cout, stride, bn, rng))
                    }
                    BlockKind::Res2Net => Block::Res2Net(Res2NetBlock::new(
                        &name,
                        cin,
                        width,
                        cout,
                        stride,
                        config.scale,
                        bn,
                        rng,
                    )?),
                });
                cin = cout;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            pool,
            blocks,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        if c != 3 {
            return Err(Error::config(format!(
                "backbone expects 3 input channels, got {c}"
            )));
        }
        let min = self.config.downsample();
        if h < min || w < min {
            return Err(Error::config(format!(
                "input {h}x{w} smaller than the backbone's total stride {min}"
            )));
        }
        Ok(())
    }

    /// Eval-mode forward through a shared reference.
    pub fn infer(&self, x: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let mut y = self.stem.infer(x)?;
        if let Some(pool) = &self.pool {
            y = pool.infer(&y)?;
        }
        for block in &self.blocks {
            y = block.infer(&y)?;
        }
        FeatureMap::new(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let mut y = self.stem.forward(x, mode)?;
        if let Some(pool) = self.pool.as_mut() {
            y = pool.forward(&y)?;
        }
        for block in &mut self.blocks {
            y = block.forward(&y, mode)?;
        }
        FeatureMap::new(y)
    }

    /// Backpropagate a feature-map gradient; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        if let Some(pool) = self.pool.as_mut() {
            g = pool.backward(&g)?;
        }
        self.stem.backward(&g)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        self.stem.visit_buffers(f);
        for b in &mut self.blocks {
            b.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn copy_params<T: Scalar>(from: &mut impl Module<T>, to: &mut impl Module<T>) {
        let mut values = Vec::new();
        from.visit_params(&mut |p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        to.visit_params(&mut |p| {
            let v = it.next().expect("same parameter count");
            assert_eq!(v.dims(), p.value.dims(), "{}", p.name);
            p.value = v;
        });
        assert!(it.next().is_none());
    }

    #[test]
    fn scale_one_equals_plain_bottleneck() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[2, 8, 6, 6], 1.0, &mut r);
        for stride in [1, 2] {
            let mut multi = Res2NetBlock::<f64>::new("b", 8, 4, 12, stride, 1, true, &mut r).unwrap();
            let mut plain = ResNetBlock::<f64>::new("b", 8, 4, 12, stride, true, &mut r);
            copy_params(&mut multi, &mut plain);
            let a = multi.forward(&x, Mode::Train).unwrap();
            let b = plain.forward(&x, Mode::Train).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-6);
            }
            let ga = multi.backward(&a).unwrap();
            let gb = plain.backward(&b).unwrap();
            for (u, v) in ga.data().iter().zip(gb.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_residual_reduces_to_skip() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[1, 8, 5, 5], 1.0, &mut r);
        let mut block = Res2NetBlock::<f64>::new("b", 8, 8, 8, 1, 4, true, &mut r).unwrap();
        assert!(block.skip.is_none());
        // zero 3×3 weights and a zero expand scale: the residual branch vanishes
        for g in block.groups.iter_mut().flatten() {
            g.conv.weight.value.fill(0.0);
        }
        block.expand.bn.as_mut().unwrap().gamma.value.fill(0.0);
        let y = block.infer(&x).unwrap();
        assert_eq!(y, ops::relu(&x));

        let mut plain = ResNetBlock::<f64>::new("p", 8, 4, 8, 1, true, &mut r);
        plain.expand.conv.weight.value.fill(0.0);
        let y = plain.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, ops::relu(&x));
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut r = rng();
        let x = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        let block = ResNetBlock::<f32>::new("b", 4, 4, 8, 2, true, &mut r);
        assert_eq!(block.infer(&x).unwrap().dims(), &[1, 8, 4, 4]);
        let block = Res2NetBlock::<f32>::new("b", 4, 4, 8, 2, 2, true, &mut r).unwrap();
        assert_eq!(block.infer(&x).unwrap().dims(), &[1, 8, 4, 4]);
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut r = rng();
        assert!(Res2NetBlock::<f32>::new("b", 4, 6, 8, 1, 4, true, &mut r).is_err());
        let mut cfg = BackboneConfig::tiny();
        cfg.stage_widths[1] = 36;
        assert!(cfg.validate().is_err());
    }

    /// Pixels of a group output that change when one input pixel changes.
    fn footprint(block: &Res2NetBlock<f64>, x: &Tensor<f64>, at: (usize, usize)) -> Vec<Vec<bool>> {
        let (_, c, h, w) = x.nchw().unwrap();
        let base = block.group_outputs(x).unwrap();
        let mut bumped = x.clone();
        for ch in 0..c {
            bumped.data_mut()[(ch * h + at.0) * w + at.1] += 1.0;
        }
        let after = block.group_outputs(&bumped).unwrap();
        base.iter()
            .zip(&after)
            .map(|(a, b)| {
                let (_, gc, gh, gw) = a.nchw().unwrap();
                (0..gh * gw)
                    .map(|p| (0..gc).any(|ch| (a.data()[ch * gh * gw + p] - b.data()[ch * gh * gw + p]).abs() > 1e-12))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn group_receptive_fields_grow_and_nest() {
        let mut r = rng();
        // positive weights and inputs keep every relu in its linear regime
        let mut block = Res2NetBlock::<f64>::new("b", 4, 8, 8, 1, 4, true, &mut r).unwrap();
        block.visit_params(&mut |p| {
            if p.name.ends_with("conv.weight") {
                p.value = p.value.map(f64::abs);
            }
        });
        let size = 11;
        let x = Tensor::<f64>::uniform(&[1, 4, size, size], 0.5, 1.5, &mut r);
        let fp = footprint(&block, &x, (5, 5));
        let extent = |mask: &Vec<bool>| {
            let rows: Vec<usize> = (0..size * size).filter(|&p| mask[p]).map(|p| p / size).collect();
            let cols: Vec<usize> = (0..size * size).filter(|&p| mask[p]).map(|p| p % size).collect();
            (
                rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1,
                cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1,
            )
        };
        assert_eq!(fp[0].iter().filter(|&&b| b).count(), 1);
        assert_eq!(extent(&fp[1]), (3, 3));
        assert_eq!(extent(&fp[2]), (5, 5));
        assert_eq!(extent(&fp[3]), (7, 7));
        for i in 1..3 {
            for p in 0..size * size {
                assert!(!fp[i][p] || fp[i + 1][p], "footprint {i} not nested in {}", i + 1);
            }
            assert!(fp[i + 1].iter().filter(|&&b| b).count() > fp[i].iter().filter(|&&b| b).count());
        }
    }

    #[test]
    fn tiny_preset_shape() {
        let mut r = rng();
        let net = Backbone::<f32>::build(&BackboneConfig::tiny(), &mut r).unwrap();
        let x = Tensor::<f32>::randn(&[2, 3, 32, 32], 1.0, &mut r);
        let f = net.infer(&x).unwrap();
        assert_eq!(f.shape(), (2, 128, 8, 8));
        assert_eq!(BackboneConfig::tiny().feature_shape(32), (128, 8, 8));
    }

    #[test]
    fn presets() {
        assert_eq!(BackboneConfig::paper101().total_blocks(), 33);
        assert_eq!(BackboneConfig::paper50().total_blocks(), 16);
        assert_eq!(BackboneConfig::paper50().feature_shape(448), (2048, 14, 14));
        assert!(BackboneConfig::preset("vgg16").is_err());
        for name in ["paper50", "paper101", "tiny"] {
            BackboneConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn wrong_channel_count() {
        let mut r = rng();
        let net = Backbone::<f32>::build(&BackboneConfig::tiny(), &mut r).unwrap();
        let err = net.infer(&Tensor::zeros(&[1, 1, 32, 32])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut r = rng();
        let net = Backbone::<f32>::build(&BackboneConfig::tiny(), &mut r).unwrap();
        let f = net.infer(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(f.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_batch_independent_and_pure() {
        let mut r = rng();
        let mut net = Backbone::<f32>::build(&BackboneConfig::tiny(), &mut r).unwrap();
        // move running stats off their defaults
        let warm = Tensor::<f32>::randn(&[4, 3, 32, 32], 1.0, &mut r);
        net.forward(&warm, Mode::Train).unwrap();
        let x = Tensor::<f32>::randn(&[2, 3, 32, 32], 1.0, &mut r);
        let both = net.infer(&x).unwrap();
        let first = net.infer(&x.batch_item(0)).unwrap();
        let second = net.infer(&x.batch_item(1)).unwrap();
        let stacked = Tensor::stack_batch(&[first.tensor, second.tensor]).unwrap();
        for (a, b) in both.tensor.data().iter().zip(stacked.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
        let again = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(again, net.infer(&x).unwrap());
        assert_eq!(both, net.infer(&x).unwrap());
    }

    #[test]
    fn train_forward_backward_stays_finite() {
        let mut r = rng();
        let mut net = Backbone::<f32>::build(&BackboneConfig::tiny(), &mut r).unwrap();
        for _ in 0..10 {
            let x = Tensor::<f32>::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
            let f = net.forward(&x, Mode::Train).unwrap();
            assert!(f.tensor.is_finite());
            let g = Tensor::<f32>::randn(f.tensor.dims(), 1.0, &mut r);
            let gx = net.backward(&g).unwrap();
            assert!(gx.is_finite());
            let mut finite = true;
            net.visit_params(&mut |p| finite &= p.grad.is_finite());
            assert!(finite);
        }
    }
}
