//! Independent straight-loop reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use skyclear::image::Image;

/// Per-pixel `max(R, G, B) - min(R, G, B)` computed from `pixel()` lookups.
pub fn residual_oracle(img: &Image) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.height() * img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.pixel(y, x);
            let hi = if r >= g && r >= b { r } else if g >= b { g } else { b };
            let lo = if r <= g && r <= b { r } else if g <= b { g } else { b };
            out.push(hi - lo);
        }
    }
    out
}

pub struct AttentionProblem<'a> {
    /// `[n, c, h, w]`.
    pub x: &'a [f64],
    pub n: usize,
    pub c: usize,
    pub hw: usize,
    /// `[b, m, d]` with `b` equal to 1 or `n`.
    pub prompts: &'a [f64],
    pub b: usize,
    pub m: usize,
    pub d: usize,
    /// `[c, c]`, `[c, d]`, `[c, d]` in `[out, in]` layout.
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub divisor: f64,
}

/// Cross-attention by explicit loops. Returns the output `[n, c, hw]` and
/// the weights `[n, hw, m]`.
pub fn attention_oracle(p: &AttentionProblem) -> (Vec<f64>, Vec<f64>) {
    let (n, c, hw, m, d) = (p.n, p.c, p.hw, p.m, p.d);
    let mut out = vec![0.0; n * c * hw];
    let mut weights = vec![0.0; n * hw * m];
    for i in 0..n {
        let pb = if p.b == 1 { 0 } else { i };
        let token = |t: usize, k: usize| p.prompts[(pb * m + t) * d + k];
        let mut keys = vec![vec![0.0; c]; m];
        let mut values = vec![vec![0.0; c]; m];
        for t in 0..m {
            for ch in 0..c {
                for k in 0..d {
                    keys[t][ch] += p.wk[ch * d + k] * token(t, k);
                    values[t][ch] += p.wv[ch * d + k] * token(t, k);
                }
            }
        }
        for pos in 0..hw {
            let mut q = vec![0.0; c];
            for (ch, qv) in q.iter_mut().enumerate() {
                for k in 0..c {
                    *qv += p.wq[ch * c + k] * p.x[(i * c + k) * hw + pos];
                }
            }
            let scores: Vec<f64> = keys.iter().map(|key| q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / p.divisor).collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for t in 0..m {
                let a = exps[t] / z;
                weights[(i * hw + pos) * m + t] = a;
                for ch in 0..c {
                    out[(i * c + ch) * hw + pos] += a * values[t][ch];
                }
            }
        }
    }
    (out, weights)
}

/// `10 log10(1 / mse)` over all RGB samples.
pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for ch in 0..3 {
                let diff = a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64;
                sum += diff * diff;
                count += 1;
            }
        }
    }
    10.0 * (1.0 / (sum / count as f64)).log10()
}

fn luma(img: &Image, y: usize, x: usize) -> f64 {
    let [r, g, b] = img.pixel(y, x);
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Mean SSIM over every fully-contained 11x11 window, each window weighted
/// by a directly evaluated 2-D Gaussian (sigma 1.5).
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    const K: usize = 11;
    let sigma = 1.5f64;
    let center = 5.0f64;
    let mut win = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = (i as f64 - center).powi(2) + (j as f64 - center).powi(2);
            *v = (-r2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - K {
        for x0 in 0..=w - K {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let g = win[i][j] / total;
                    let u = luma(a, y0 + i, x0 + j);
                    let v = luma(b, y0 + i, x0 + j);
                    mx += g * u;
                    my += g * v;
                    sxx += g * u * u;
                    syy += g * v * v;
                    sxy += g * u * v;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    acc / windows as f64
}

/// Tanh-approximated GELU.
pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// `y[o] = sum_i w[o, i] x[i] + b[o]`.
pub fn linear_oracle(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let din = x.len();
    let dout = w.len() / din;
    (0..dout).map(|o| (0..din).map(|i| w[o * din + i] * x[i]).sum::<f64>() + b.map_or(0.0, |b| b[o])).collect()
}

/// Random image with every value drawn from `[0, 1)`.
pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let t = skyclear::gradcheck::uniform(&[3, h, w], 0.0, 1.0, seed);
    Image::from_planar(h, w, t.data().iter().map(|&v| v as f32).collect()).unwrap()
}
