//! Parameter layouts of the basic layers. Layouts hold [`ParamId`]s only, so
//! one layout serves stores of any element type.

use crate::autograd::{Scalar, Var};
use crate::params::{Bound, Init, ParamId};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, ci: usize, co: usize, k: usize, stride: usize, bias: bool) -> Self {
        Self::scaled(init, name, ci, co, k, stride, bias, 1.0)
    }

    /// Same-padded convolution whose default-initialized weights are multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let b = fan_in_bound(ci * k * k);
        init.scope(name, |init| Conv2d {
            weight: init.uniform("weight", &[co, ci, k, k], b * gain),
            bias: bias.then(|| init.uniform("bias", &[co], b)),
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, k: usize, bias: bool) -> Self {
        let b = fan_in_bound(k * k);
        init.scope(name, |init| DepthwiseConv {
            weight: init.uniform("weight", &[c, 1, k, k], b),
            bias: bias.then(|| init.uniform("bias", &[c], b)),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.depthwise_conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let b = fan_in_bound(din);
        init.scope(name, |init| Linear {
            weight: init.uniform("weight", &[dout, din], b),
            bias: bias.then(|| init.uniform("bias", &[dout], b)),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

/// Per-position normalization over channels with a learned affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        init.scope(name, |init| ChannelNorm { gamma: init.constant("weight", &[c], 1.0), beta: init.constant("bias", &[c], 0.0) })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        x.layer_norm_channels(p.get(self.gamma), p.get(self.beta), T::lit(NORM_EPS))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two affine layers with a nonlinearity in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        init.scope(name, |init| Mlp {
            fc1: Linear::new(init, "fc1", din, hidden, true),
            fc2: Linear::new(init, "fc2", hidden, dout, true),
            activation: Activation::Gelu,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let h = self.fc1.forward(p, x);
        let h = match self.activation {
            Activation::Gelu => h.gelu(),
            Activation::Identity => h,
        };
        self.fc2.forward(p, &h)
    }
}
