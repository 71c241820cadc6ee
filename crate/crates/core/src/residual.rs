//! Residue-channel prior and the modulator that turns it into per-feature
//! affine parameters.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layers::{Conv2d, DepthwiseConv, Linear};
use crate::params::{Bound, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpmConfig {
    /// Kernel size of the depthwise large-kernel attention.
    pub kernel: usize,
    /// Squeeze-excite reduction ratio.
    pub se_ratio: usize,
}

impl Default for RpmConfig {
    fn default() -> Self {
        RpmConfig { kernel: 7, se_ratio: 4 }
    }
}

/// Per-pixel `max(r, g, b) - min(r, g, b)`, `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ResidualMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.values.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

pub fn extract_residual(img: &Image) -> ResidualMap {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let values = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| r.max(g).max(b) - r.min(g).min(b))
        .collect();
    ResidualMap { height: img.height(), width: img.width(), values }
}

/// Residual maps `[N, 1, H, W]` of a batch `[N, 3, H, W]`, differentiable.
pub fn extract_residual_var<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::DimensionMismatch(format!("expected [N, 3, H, W], got {s:?}")));
    }
    if s[1] != 3 {
        return Err(Error::ChannelCount(s[1]));
    }
    Ok(x.channel_range())
}

/// Large-kernel spatial gating followed by squeeze-excite channel gating and
/// a pointwise projection, all inside a residual skip.
#[derive(Clone, Debug)]
pub struct Chimb {
    pub lka: DepthwiseConv,
    pub se_reduce: Linear,
    pub se_expand: Linear,
    pub proj: Conv2d,
}

impl Chimb {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, cfg: &RpmConfig) -> Self {
        let hidden = (c / cfg.se_ratio.max(1)).max(1);
        init.scope(name, |init| Chimb {
            lka: DepthwiseConv::new(init, "lka", c, cfg.kernel, true),
            se_reduce: Linear::new(init, "se_reduce", c, hidden, true),
            se_expand: Linear::new(init, "se_expand", hidden, c, true),
            proj: Conv2d::new(init, "proj", c, c, 1, 1, true),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let gated = x.mul(&self.lka.forward(p, x).sigmoid());
        let pooled = gated.reshape(&[n, c, h * w]).mean_last().reshape(&[n, c]);
        let scale = self.se_expand.forward(p, &self.se_reduce.forward(p, &pooled).relu()).sigmoid();
        let attended = gated.mul(&scale.reshape(&[n, c, 1, 1]));
        x.add(&self.proj.forward(p, &attended))
    }
}

/// One residual prior modulator: a convolutional stem on the residual map,
/// two [`Chimb`] blocks, and separate heads for the scale and the shift.
#[derive(Clone, Debug)]
pub struct Rpm {
    pub channels: usize,
    pub stem1: Conv2d,
    pub stem2: Conv2d,
    pub chimb1: Chimb,
    pub chimb2: Chimb,
    pub alpha_conv: Conv2d,
    pub alpha_head: Conv2d,
    pub beta_conv: Conv2d,
    pub beta_head: Conv2d,
}

/// Gain applied to the default init of both heads, so modulation starts
/// close to the identity.
const HEAD_GAIN: f64 = 0.1;

impl Rpm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, cfg: &RpmConfig) -> Self {
        init.scope(name, |init| {
            let stem1 = Conv2d::new(init, "stem1", 1, c, 3, 1, true);
            let stem2 = Conv2d::new(init, "stem2", c, c, 3, 1, true);
            let chimb1 = Chimb::new(init, "chimb1", c, cfg);
            let chimb2 = Chimb::new(init, "chimb2", c, cfg);
            let alpha_conv = Conv2d::new(init, "alpha_conv", c, c, 3, 1, true);
            let alpha_head = init.scope("alpha_head", |init| {
                let b = 1.0 / (c as f64).sqrt();
                Conv2d {
                    weight: init.uniform("weight", &[c, c, 1, 1], b * HEAD_GAIN),
                    bias: Some(init.constant("bias", &[c], 1.0)),
                    stride: 1,
                    pad: 0,
                }
            });
            let beta_conv = Conv2d::new(init, "beta_conv", c, c, 3, 1, true);
            let beta_head = init.scope("beta_head", |init| {
                let b = 1.0 / (c as f64).sqrt();
                Conv2d {
                    weight: init.uniform("weight", &[c, c, 1, 1], b * HEAD_GAIN),
                    bias: Some(init.constant("bias", &[c], 0.0)),
                    stride: 1,
                    pad: 0,
                }
            });
            Rpm { channels: c, stem1, stem2, chimb1, chimb2, alpha_conv, alpha_head, beta_conv, beta_head }
        })
    }

    /// `(alpha, beta)`, each `[N, C, h, w]`, from a full-resolution residual
    /// map `[N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, r: &Var<T>, h: usize, w: usize) -> (Var<T>, Var<T>) {
        let rs = r.shape();
        let r = if rs[2] == h && rs[3] == w { r.clone() } else { r.area_resize(h, w) };
        let f = self.stem1.forward(p, &r).gelu();
        let f = self.stem2.forward(p, &f).gelu();
        let f = self.chimb2.forward(p, &self.chimb1.forward(p, &f));
        let alpha = self.alpha_head.forward(p, &self.alpha_conv.forward(p, &f).gelu());
        let beta = self.beta_head.forward(p, &self.beta_conv.forward(p, &f).gelu());
        (alpha, beta)
    }
}

/// Affine parameters for decoder prompt level `level` with feature size
/// `h x w`.
pub fn compute_affine<T: Scalar>(
    p: &Bound<T>,
    rpms: &[Rpm],
    level: usize,
    r: &Var<T>,
    h: usize,
    w: usize,
) -> Result<(Var<T>, Var<T>)> {
    let rpm = rpms.get(level).ok_or(Error::UnknownLevel(level))?;
    let s = r.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::DimensionMismatch(format!("expected [N, 1, H, W] residual, got {s:?}")));
    }
    if h == 0 || w == 0 || h > s[2] || w > s[3] {
        return Err(Error::DimensionMismatch(format!("cannot resize residual {s:?} to {h}x{w}")));
    }
    Ok(rpm.forward(p, r, h, w))
}

/// `alpha * x + beta` with all three shapes equal.
pub fn modulate<T: Scalar>(x: &Var<T>, alpha: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    for other in [alpha, beta] {
        if other.shape() != x.shape() {
            return Err(Error::ShapeMismatch(x.shape().to_vec(), other.shape().to_vec()));
        }
    }
    Ok(x.mul(alpha).add(beta))
}
