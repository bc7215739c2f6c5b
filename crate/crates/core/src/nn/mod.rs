//! Minimal CPU neural-network layers with explicit forward/backward passes.
//!
//! Everything is `f32`, single-process and deterministic: convolutions use
//! im2col + GEMM with batch items fanned out over rayon and reduced in index
//! order, so repeated runs produce bit-identical results. Layers cache what
//! their backward pass needs in per-call cache structs instead of hidden
//! state, which keeps networks usable from `&self` forwards and makes frozen
//! (gradient-transparent) passes cheap.

mod batchnorm;
mod conv;
mod init;
mod ops;
mod optim;

pub use batchnorm::{BatchNorm2d, BnCache, StatGrad, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use init::kaiming_conv;
pub use ops::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_backward, softmax_channels, split_channels, upsample2,
    upsample2_backward,
};
pub use optim::{Optimizer, OptimizerCfg, OptimizerKind};

use ndarray::{Array, Array4, Dimension};

/// A learnable tensor with its gradient and optimizer moment buffers.
///
/// The moment buffers live with the parameter so that checkpointing a
/// network captures optimizer state for bit-exact resume.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f32, D>,
    pub grad: Array<f32, D>,
    pub m1: Array<f32, D>,
    pub m2: Array<f32, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f32, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        let m1 = Array::zeros(value.raw_dim());
        let m2 = Array::zeros(value.raw_dim());
        Param {
            value,
            grad,
            m1,
            m2,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Activation at the end of a [`ConvUnit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// How a training-capable forward pass should behave for one unit.
#[derive(Debug, Clone, Copy)]
pub struct UnitMode {
    /// Normalize by batch statistics (true) or running statistics (false).
    pub bn_train_norm: bool,
    /// Update the running statistics from this batch.
    pub bn_update_running: bool,
    /// Keep what the weight gradients need (the conv input).
    pub want_param_grads: bool,
    /// Measure batch input statistics even when normalizing by running
    /// stats, and keep the input so stat-gradients can be injected.
    pub collect_stats: bool,
}

impl UnitMode {
    pub fn frozen_transparent() -> Self {
        UnitMode {
            bn_train_norm: false,
            bn_update_running: false,
            want_param_grads: false,
            collect_stats: false,
        }
    }
}

/// `conv 3x3 -> batch norm -> activation`, the building brick of every
/// network in this crate.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

#[derive(Debug)]
pub struct ConvUnitCache {
    conv_x: Option<Array4<f32>>,
    pub bn: BnCache,
    act_y: Array4<f32>,
}

impl ConvUnit {
    pub fn new(conv: Conv2d, act: Activation) -> Self {
        let channels = conv.out_channels();
        ConvUnit {
            conv,
            bn: BatchNorm2d::new(channels),
            act,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: UnitMode) -> (Array4<f32>, ConvUnitCache) {
        let z = self.conv.forward(x);
        let (h, bn_cache) = self.bn.forward(
            &z,
            mode.bn_train_norm,
            mode.collect_stats || mode.bn_update_running,
        );
        if mode.bn_update_running {
            self.bn.update_running(
                bn_cache.batch_mean.as_ref().expect("stats measured"),
                bn_cache.batch_var.as_ref().expect("stats measured"),
            );
        }
        let y = match self.act {
            Activation::Relu => relu(&h),
            Activation::Sigmoid => sigmoid(&h),
        };
        let cache = ConvUnitCache {
            conv_x: mode.want_param_grads.then(|| x.clone()),
            bn: bn_cache,
            act_y: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let z = self.conv.forward(x);
        let h = self.bn.forward_eval(&z);
        match self.act {
            Activation::Relu => relu(&h),
            Activation::Sigmoid => sigmoid(&h),
        }
    }

    /// Backward through activation, batch norm and convolution.
    ///
    /// `stat_grad` injects a gradient on the measured batch statistics of
    /// the batch-norm input (the feature-statistics loss path). Parameter
    /// gradients are accumulated only when `want_param_grads` is set.
    pub fn backward(
        &mut self,
        gy: &Array4<f32>,
        cache: &ConvUnitCache,
        stat_grad: Option<&StatGrad>,
        want_param_grads: bool,
    ) -> Array4<f32> {
        let gh = match self.act {
            Activation::Relu => relu_backward(gy, &cache.act_y),
            Activation::Sigmoid => sigmoid_backward(gy, &cache.act_y),
        };
        let gz = self
            .bn
            .backward(&gh, &cache.bn, stat_grad, want_param_grads);
        if want_param_grads {
            let x = cache
                .conv_x
                .as_ref()
                .expect("conv input not cached for a param-grad backward");
            self.conv.backward(x, &gz, true)
        } else {
            self.conv.backward_input_only(&gz)
        }
    }

    pub fn zero_grads(&mut self) {
        self.conv.weight.zero_grad();
        self.conv.bias.zero_grad();
        self.bn.gamma.zero_grad();
        self.bn.beta.zero_grad();
    }

    pub fn step(&mut self, opt: &Optimizer) {
        opt.step(&mut self.conv.weight);
        opt.step(&mut self.conv.bias);
        opt.step(&mut self.bn.gamma);
        opt.step(&mut self.bn.beta);
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.value.len()
            + self.conv.bias.value.len()
            + self.bn.gamma.value.len()
            + self.bn.beta.value.len()
    }
}
