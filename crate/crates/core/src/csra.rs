//! Multi-head class-specific residual attention.
//!
//! For class `i` and a feature map with spatial vectors `X_j`:
//!
//! ```text
//! s_j = softmax_j(T · X_jᵀ m_i)      attention over locations
//! a   = Σ_j s_j X_j                   class-specific feature
//! g   = mean_j X_j                    global feature
//! y_i = m_iᵀ (g + λ a)                logit
//! ```
//!
//! Heads differ only in `T`; their logits are summed. The same classifier
//! rows `m_i` produce the score maps and the final logits.

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::gradcheck::DifferentiableOp;
use crate::nn::{he_normal, missing_forward, Module, Param, ParamGroup};
use crate::ops::{self, sigmoid_scalar};
use crate::tensor::{matmul, Scalar, Tensor};

/// Temperature of the last head when there are two or more.
pub const WIDE_HEAD_TEMPERATURE: f64 = 99.0;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CsraHeadConfig {
    pub num_classes: usize,
    pub num_heads: usize,
    pub temperatures: Vec<f64>,
    pub lambda: f64,
}

/// `{1, 2, …, H−1, 99}` for `H ≥ 2`; `{1}` for a single head.
pub fn default_temperatures(heads: usize) -> Vec<f64> {
    match heads {
        0 => Vec::new(),
        1 => vec![1.0],
        h => (1..h)
            .map(|t| t as f64)
            .chain(std::iter::once(WIDE_HEAD_TEMPERATURE))
            .collect(),
    }
}

impl CsraHeadConfig {
    pub fn new(num_classes: usize, num_heads: usize, lambda: f64) -> Self {
        Self {
            num_classes,
            num_heads,
            temperatures: default_temperatures(num_heads),
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("need at least one attention head"));
        }
        if self.temperatures.len() != self.num_heads {
            return Err(Error::config(format!(
                "{} temperatures given for {} heads",
                self.temperatures.len(),
                self.num_heads
            )));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::config(format!("temperature {t} must be positive")));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Per-class spatial score maps `R[n, i, j] = X_jᵀ m_i`, shape `[N, C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScoreMaps<T = f32> {
    pub tensor: Tensor<T>,
}

/// Every intermediate of one attention head, for inspection and testing.
#[derive(Clone, Debug)]
pub struct HeadOutput<T = f32> {
    /// `[N, C]`
    pub logits: Tensor<T>,
    /// `s`, `[N, C, h·w]`
    pub attention: Tensor<T>,
    /// `a`, `[N, C, d]`
    pub class_features: Tensor<T>,
    /// `g`, `[N, d]`
    pub global: Tensor<T>,
    /// `f = g + λ a`, `[N, C, d]`
    pub fused: Tensor<T>,
}

fn check_classifier<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, d, h, w) = x.nchw()?;
    match m.dims() {
        [_, md] if *md == d => Ok((n, d, h * w, m.dims()[0])),
        dims => Err(Error::config(format!(
            "classifier dims {dims:?} do not match feature channels {d}"
        ))),
    }
}

/// Raw score maps `[N, C, h·w]` as a flat buffer.
fn scores<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Vec<T>> {
    let (n, d, hw, c) = check_classifier(x, m)?;
    let mut out = vec![T::zero(); n * c * hw];
    for s in 0..n {
        matmul(
            c,
            d,
            hw,
            m.data(),
            false,
            &x.data()[s * d * hw..(s + 1) * d * hw],
            false,
            T::zero(),
            &mut out[s * c * hw..(s + 1) * c * hw],
        );
    }
    Ok(out)
}

pub fn class_score_maps<T: Scalar>(x: &FeatureMap<T>, m: &Tensor<T>) -> Result<ClassScoreMaps<T>> {
    let (n, _, h, w) = x.shape();
    let c = m.dims()[0];
    Ok(ClassScoreMaps {
        tensor: Tensor::from_parts(vec![n, c, h, w], scores(&x.tensor, m)?),
    })
}

/// Attention weights over the `h·w` locations of each score-map row;
/// returns `[N, C, h·w]`.
pub fn attention_scores<T: Scalar>(maps: &ClassScoreMaps<T>, temperature: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = maps.tensor.nchw()?;
    let rows = maps.tensor.clone().reshape(&[n, c, h * w])?;
    ops::softmax_with_temperature(&rows, temperature, 2)
}

/// `a[n, i] = Σ_k s[n, i, k] · X_k`, shape `[N, C, d]`.
pub fn class_feature_aggregate<T: Scalar>(x: &FeatureMap<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, h, w) = x.shape();
    let hw = h * w;
    let c = match weights.dims() {
        [wn, c, whw] if *wn == n && *whw == hw => *c,
        dims => {
            return Err(Error::config(format!(
                "attention dims {dims:?} do not match feature map [{n}, _, {hw}]"
            )))
        }
    };
    let mut out = vec![T::zero(); n * c * d];
    for s in 0..n {
        // (C × hw) · (hw × d), features stored d × hw
        matmul(
            c,
            hw,
            d,
            &weights.data()[s * c * hw..(s + 1) * c * hw],
            false,
            &x.tensor.data()[s * d * hw..(s + 1) * d * hw],
            true,
            T::zero(),
            &mut out[s * c * d..(s + 1) * c * d],
        );
    }
    Ok(Tensor::from_parts(vec![n, c, d], out))
}

/// Spatial mean `g`, shape `[N, d]`.
pub fn global_feature<T: Scalar>(x: &FeatureMap<T>) -> Tensor<T> {
    let (n, d, h, w) = x.shape();
    let hw = h * w;
    let scale = T::one() / T::from_usize_lossy(hw);
    let data = x
        .tensor
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) * scale)
        .collect();
    Tensor::from_parts(vec![n, d], data)
}

/// One head, computed through every intermediate of the definition.
pub fn csra_head_forward<T: Scalar>(
    x: &FeatureMap<T>,
    m: &Tensor<T>,
    temperature: T,
    lambda: T,
) -> Result<HeadOutput<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::config(format!("lambda {lambda} must be >= 0")));
    }
    let maps = class_score_maps(x, m)?;
    let attention = attention_scores(&maps, temperature)?;
    let class_features = class_feature_aggregate(x, &attention)?;
    let global = global_feature(x);
    let (n, c, d) = (global.dims()[0], m.dims()[0], m.dims()[1]);
    let mut fused = Vec::with_capacity(n * c * d);
    let mut logits = Vec::with_capacity(n * c);
    for s in 0..n {
        let g = &global.data()[s * d..(s + 1) * d];
        for i in 0..c {
            let a = &class_features.data()[(s * c + i) * d..][..d];
            let mi = &m.data()[i * d..(i + 1) * d];
            let mut y = T::zero();
            for k in 0..d {
                let f = g[k] + lambda * a[k];
                fused.push(f);
                y = y + mi[k] * f;
            }
            logits.push(y);
        }
    }
    Ok(HeadOutput {
        logits: Tensor::from_parts(vec![n, c], logits),
        attention,
        class_features,
        global,
        fused: Tensor::from_parts(vec![n, c, d], fused),
    })
}

/// Fused logits `Σ_h P̂_{T_h}`, each head computed by [`csra_head_forward`].
pub fn multi_head_forward<T: Scalar>(
    x: &FeatureMap<T>,
    m: &Tensor<T>,
    config: &CsraHeadConfig,
) -> Result<Tensor<T>> {
    config.validate()?;
    let mut total: Option<Tensor<T>> = None;
    for &t in &config.temperatures {
        let head = csra_head_forward(x, m, T::lit(t), T::lit(config.lambda))?;
        total = Some(match total {
            None => head.logits,
            Some(acc) => acc.add(&head.logits)?,
        });
    }
    total.ok_or_else(|| Error::config("no heads"))
}

/// Binary predictions: 1 iff `sigmoid(logit) ≥ 0.5`, i.e. `logit ≥ 0`.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let c = *logits.dims().last().unwrap_or(&0);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            row.iter()
                .map(|&z| u8::from(sigmoid_scalar(z) >= T::lit(0.5)))
                .collect()
        })
        .collect()
}

/// Score maps and attention rows reused by the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    features: Tensor<T>,
    scores: Vec<T>,
}

/// Fused multi-head logits computed via `y = m·g + λ Σ_j s_j r_j`, which
/// equals `mᵀ(g + λa)` without materializing `a`.
pub fn multi_head_logits<T: Scalar>(
    x: &Tensor<T>,
    m: &Tensor<T>,
    temperatures: &[T],
    lambda: T,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    let (n, d, hw, c) = check_classifier(x, m)?;
    let r = scores(x, m)?;
    let g = global_feature(&FeatureMap::new(x.clone())?);
    let mut mg = vec![T::zero(); n * c];
    matmul(n, d, c, g.data(), false, m.data(), true, T::zero(), &mut mg);
    let heads = T::from_usize_lossy(temperatures.len());
    let mut logits: Vec<T> = mg.iter().map(|&v| v * heads).collect();
    let mut s = vec![T::zero(); hw];
    for (row, out) in r.chunks(hw).zip(logits.iter_mut()) {
        for &t in temperatures {
            softmax_row(row, t, &mut s);
            let attended = row.iter().zip(&s).fold(T::zero(), |acc, (&rj, &sj)| acc + rj * sj);
            *out = *out + lambda * attended;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, c], logits),
        HeadCache {
            features: x.clone(),
            scores: r,
        },
    ))
}

fn softmax_row<T: Scalar>(row: &[T], t: T, out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(t * v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (t * v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Returns `(grad_features, grad_classifier)`.
pub fn multi_head_logits_backward<T: Scalar>(
    cache: &HeadCache<T>,
    m: &Tensor<T>,
    temperatures: &[T],
    lambda: T,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = &cache.features;
    let (n, d, hw, c) = check_classifier(x, m)?;
    if grad_logits.dims() != [n, c] {
        return Err(Error::config(format!(
            "logit gradient dims {:?}, expected [{n}, {c}]",
            grad_logits.dims()
        )));
    }
    let heads = T::from_usize_lossy(temperatures.len());
    let inv_hw = T::one() / T::from_usize_lossy(hw);
    let gy = grad_logits.data();

    // d logits / d scores
    let mut gr = vec![T::zero(); n * c * hw];
    let mut s = vec![T::zero(); hw];
    for ((row, grow), &g) in cache.scores.chunks(hw).zip(gr.chunks_mut(hw)).zip(gy) {
        for &t in temperatures {
            softmax_row(row, t, &mut s);
            let attended = row.iter().zip(&s).fold(T::zero(), |acc, (&rj, &sj)| acc + rj * sj);
            for j in 0..hw {
                grow[j] = grow[j] + g * lambda * s[j] * (T::one() + t * (row[j] - attended));
            }
        }
        // the heads·m·g term, spread uniformly over locations
        let uniform = g * heads * inv_hw;
        for v in grow.iter_mut() {
            *v = *v + uniform;
        }
    }

    let mut gm = vec![T::zero(); c * d];
    let mut gx = vec![T::zero(); x.len()];
    for smp in 0..n {
        let xs = &x.data()[smp * d * hw..(smp + 1) * d * hw];
        let grs = &gr[smp * c * hw..(smp + 1) * c * hw];
        // gm += gr (C×hw) · xᵀ (hw×d)
        matmul(c, hw, d, grs, false, xs, true, T::one(), &mut gm);
        // gx = mᵀ (d×C) · gr (C×hw)
        matmul(
            d,
            c,
            hw,
            m.data(),
            true,
            grs,
            false,
            T::zero(),
            &mut gx[smp * d * hw..(smp + 1) * d * hw],
        );
    }
    Ok((
        Tensor::from_parts(x.dims().to_vec(), gx),
        Tensor::from_parts(vec![c, d], gm),
    ))
}

/// Trainable head: the classifier rows `m` plus the head configuration.
#[derive(Clone, Debug)]
pub struct CsraHead<T = f32> {
    pub config: CsraHeadConfig,
    pub classifier: Param<T>,
    cache: Option<HeadCache<T>>,
}

impl<T: Scalar> CsraHead<T> {
    pub fn new<R: Rng + ?Sized>(config: CsraHeadConfig, feature_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = he_normal(&[config.num_classes, feature_dim], feature_dim, rng);
        Ok(Self {
            classifier: Param::new("head.classifier", m, ParamGroup::Head, true),
            config,
            cache: None,
        })
    }

    fn temperatures(&self) -> Vec<T> {
        self.config.temperatures.iter().map(|&t| T::lit(t)).collect()
    }

    pub fn infer(&self, x: &FeatureMap<T>) -> Result<Tensor<T>> {
        Ok(multi_head_logits(
            &x.tensor,
            &self.classifier.value,
            &self.temperatures(),
            T::lit(self.config.lambda),
        )?
        .0)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> Result<Tensor<T>> {
        let (logits, cache) = multi_head_logits(
            &x.tensor,
            &self.classifier.value,
            &self.temperatures(),
            T::lit(self.config.lambda),
        )?;
        self.cache = Some(cache);
        Ok(logits)
    }

    /// Accumulates the classifier gradient; returns the feature gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_forward)?;
        let (gx, gm) = multi_head_logits_backward(
            &cache,
            &self.classifier.value,
            &self.temperatures(),
            T::lit(self.config.lambda),
            grad_logits,
        )?;
        self.classifier.accumulate(&gm)?;
        Ok(gx)
    }
}

impl<T: Scalar> Module<T> for CsraHead<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.classifier);
    }
}

/// Fused head logits as a function of `[features, classifier]`.
pub struct CsraHeadOp {
    pub temperatures: Vec<f64>,
    pub lambda: f64,
}

impl DifferentiableOp for CsraHeadOp {
    fn name(&self) -> String {
        format!("csra(T={:?},λ={})", self.temperatures, self.lambda)
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(multi_head_logits(&inputs[0], &inputs[1], &self.temperatures, self.lambda)?.0)
    }
    fn backward(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, cache) = multi_head_logits(&inputs[0], &inputs[1], &self.temperatures, self.lambda)?;
        let (gx, gm) = multi_head_logits_backward(&cache, &inputs[1], &self.temperatures, self.lambda, g)?;
        Ok(vec![gx, gm])
    }
}
