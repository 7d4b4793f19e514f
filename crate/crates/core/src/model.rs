//! Backbone and CSRA head composed into one trainable network.

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::csra::{CsraHead, CsraHeadConfig};
use crate::error::Result;
use crate::nn::{BufferMut, Module, Param};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    pub backbone: Backbone<T>,
    pub head: CsraHead<T>,
}

impl<T: Scalar> Network<T> {
    pub fn build<R: Rng + ?Sized>(
        backbone: &BackboneConfig,
        head: &CsraHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone_net = Backbone::build(backbone, rng)?;
        let head = CsraHead::new(head.clone(), backbone.feature_dim(), rng)?;
        Ok(Self {
            backbone: backbone_net,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.config.num_classes
    }

    /// Eval-mode feature map.
    pub fn features(&self, x: &Tensor<T>) -> Result<FeatureMap<T>> {
        self.backbone.infer(x)
    }

    /// Eval-mode logits `[N, C]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head.infer(&self.backbone.infer(x)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let features = self.backbone.forward(x, mode)?;
        self.head.forward(&features)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.head.backward(grad_logits)?;
        self.backbone.backward(&g)
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(BufferMut<'_, T>)) {
        self.backbone.visit_buffers(f);
    }
}
