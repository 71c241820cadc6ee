//! Deterministic weather degradations: atmospheric-scattering fog, additive
//! rain streaks and soft snow particles.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DegradationKind {
    #[serde(rename = "rain")]
    Rain,
    #[serde(rename = "fog")]
    Fog,
    #[serde(rename = "rain+fog")]
    RainFog,
    #[serde(rename = "snow")]
    Snow,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [DegradationKind::Rain, DegradationKind::Fog, DegradationKind::RainFog, DegradationKind::Snow];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Rain => "rain",
            DegradationKind::Fog => "fog",
            DegradationKind::RainFog => "rain+fog",
            DegradationKind::Snow => "snow",
        }
    }

    /// Phrase used in captions.
    pub fn weather_phrase(self) -> &'static str {
        match self {
            DegradationKind::Rain => "rain",
            DegradationKind::Fog => "fog",
            DegradationKind::RainFog => "rain and fog",
            DegradationKind::Snow => "snow",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown degradation kind {s:?}")))
    }
}

/// Depth at the top row; depth falls linearly to [`DEPTH_NEAR`] at the bottom.
pub const DEPTH_FAR: f32 = 1.0;
pub const DEPTH_NEAR: f32 = 0.1;
/// Scattering coefficient at intensity 1.
pub const FOG_BETA_MAX: f64 = 2.5;
/// Streak and particle counts at intensity 1, per 64x64 pixels.
pub const RAIN_STREAKS_MAX: f64 = 60.0;
pub const SNOW_PARTICLES_MAX: f64 = 30.0;
const REFERENCE_AREA: f64 = 64.0 * 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta: f64,
    pub airlight: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Streaks per 64x64 pixels.
    pub density: f64,
    pub length: f64,
    pub angle_deg: f64,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnowParams {
    /// Particles per 64x64 pixels.
    pub density: f64,
    pub radius: f64,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DegradationParams {
    Rain(RainParams),
    Fog(FogParams),
    RainFog(RainParams, FogParams),
    Snow(SnowParams),
}

/// A fully determined degradation. Parameters are a pure function of
/// `(kind, intensity, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub intensity: f64,
    pub seed: u64,
    pub params: DegradationParams,
}

fn rain_params(intensity: f64, rng: &mut ChaCha8Rng) -> RainParams {
    RainParams {
        density: RAIN_STREAKS_MAX * intensity,
        length: 4.0 + 10.0 * intensity,
        angle_deg: rng.random_range(-20.0..=20.0),
        opacity: 0.2 + 0.4 * intensity,
    }
}

fn fog_params(intensity: f64, rng: &mut ChaCha8Rng) -> FogParams {
    let base: f32 = rng.random_range(0.7..=0.95);
    let mut airlight = [0.0f32; 3];
    for a in &mut airlight {
        *a = (base + rng.random_range(-0.04..=0.04f32)).clamp(0.0, 1.0);
    }
    FogParams { beta: FOG_BETA_MAX * intensity, airlight }
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, intensity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(Error::InvalidSpec(format!("intensity {intensity} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let params = match kind {
            DegradationKind::Rain => DegradationParams::Rain(rain_params(intensity, &mut rng)),
            DegradationKind::Fog => DegradationParams::Fog(fog_params(intensity, &mut rng)),
            DegradationKind::RainFog => {
                let rain = rain_params(intensity, &mut rng);
                DegradationParams::RainFog(rain, fog_params(intensity, &mut rng))
            }
            DegradationKind::Snow => DegradationParams::Snow(SnowParams {
                density: SNOW_PARTICLES_MAX * intensity,
                radius: 0.8 + 1.6 * intensity,
                opacity: 0.5 + 0.4 * intensity,
            }),
        };
        Ok(DegradationSpec { kind, intensity, seed, params })
    }

    pub fn weather_phrase(&self) -> &'static str {
        self.kind.weather_phrase()
    }
}

fn count_for(density: f64, h: usize, w: usize) -> usize {
    (density * (h * w) as f64 / REFERENCE_AREA).round() as usize
}

/// Per-pixel depth, far at the top row and near at the bottom.
pub fn depth_ramp(h: usize, w: usize) -> Vec<f32> {
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        let t = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
        let v = DEPTH_FAR + (DEPTH_NEAR - DEPTH_FAR) * t;
        d.extend(std::iter::repeat_n(v, w));
    }
    d
}

/// `img * t + A * (1 - t)` with `t = exp(-beta * depth)`, clamped to `[0, 1]`.
pub fn apply_fog(img: &Image, beta: f64, airlight: [f32; 3], depth: &[f32]) -> Result<Image> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidSpec(format!("scattering coefficient {beta} is negative")));
    }
    let (h, w) = (img.height(), img.width());
    if depth.len() != h * w {
        return Err(Error::ShapeMismatch(vec![h, w], vec![depth.len()]));
    }
    if depth.iter().any(|&d| d.is_nan() || d < 0.0) {
        return Err(Error::InvalidSpec("depth must be non-negative".into()));
    }
    let mut out = img.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    let t: Vec<f32> = depth.iter().map(|&d| (-beta * d as f64).exp() as f32).collect();
    for (c, &a) in airlight.iter().enumerate() {
        let plane = &mut out.planar_mut()[c * h * w..(c + 1) * h * w];
        for (v, &ti) in plane.iter_mut().zip(&t) {
            *v = (*v * ti + a * (1.0 - ti)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Segment endpoints `(x0, y0, x1, y1)` and brightness of each streak.
pub fn rain_streaks(h: usize, w: usize, p: &RainParams, seed: u64) -> Vec<([f64; 4], f32)> {
    let n = count_for(p.density, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let theta = p.angle_deg.to_radians();
    let (dx, dy) = (theta.sin() * p.length / 2.0, theta.cos() * p.length / 2.0);
    (0..n)
        .map(|_| {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let len_jitter = rng.random_range(0.7..=1.3);
            let bright = rng.random_range(0.75..=1.0f32);
            ([cx - dx * len_jitter, cy - dy * len_jitter, cx + dx * len_jitter, cy + dy * len_jitter], bright)
        })
        .collect()
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (vx, vy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((px - s[0]) * vx + (py - s[1]) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (s[0] + t * vx, s[1] + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Adds a brightness layer to every channel and clamps.
fn add_layer(img: &Image, layer: &[f32]) -> Image {
    let hw = img.height() * img.width();
    let mut out = img.clone();
    for c in 0..3 {
        for (v, &l) in out.planar_mut()[c * hw..(c + 1) * hw].iter_mut().zip(layer) {
            if l > 0.0 {
                *v = (*v + l).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Anti-aliased bright line segments blended additively.
pub fn apply_rain(img: &Image, p: &RainParams, seed: u64) -> Image {
    let (h, w) = (img.height(), img.width());
    let streaks = rain_streaks(h, w, p, seed);
    if streaks.is_empty() || p.opacity <= 0.0 {
        return img.clone();
    }
    let mut layer = vec![0.0f32; h * w];
    for (s, bright) in &streaks {
        let x0 = (s[0].min(s[2]) - 1.0).floor().max(0.0) as usize;
        let x1 = ((s[0].max(s[2]) + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y0 = (s[1].min(s[3]) - 1.0).floor().max(0.0) as usize;
        let y1 = ((s[1].max(s[3]) + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, s);
                let cover = (1.0 - d).max(0.0) as f32;
                let l = &mut layer[y * w + x];
                *l = l.max(cover * bright * p.opacity as f32);
            }
        }
    }
    add_layer(img, &layer)
}

/// Particle centers `(x, y)` of a snow layer.
pub fn snow_particles(h: usize, w: usize, p: &SnowParams, seed: u64) -> Vec<(f64, f64, f64)> {
    let n = count_for(p.density, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x736e_6f77);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..w as f64);
            let y = rng.random_range(0.0..h as f64);
            let r = p.radius * rng.random_range(0.6..=1.4);
            (x, y, r)
        })
        .collect()
}

/// Soft white discs with Gaussian falloff blended additively.
pub fn apply_snow(img: &Image, p: &SnowParams, seed: u64) -> Image {
    let (h, w) = (img.height(), img.width());
    let particles = snow_particles(h, w, p, seed);
    if particles.is_empty() || p.opacity <= 0.0 {
        return img.clone();
    }
    let mut layer = vec![0.0f32; h * w];
    for &(cx, cy, r) in &particles {
        let reach = 3.0 * r;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let v = (p.opacity * (-d2 / (2.0 * r * r)).exp()) as f32;
                layer[y * w + x] += v;
            }
        }
    }
    add_layer(img, &layer)
}

/// Applies `spec` to a clean image. Rain with fog adds the streaks first.
pub fn degrade(img: &Image, spec: &DegradationSpec) -> Result<Image> {
    let fog = |img: &Image, f: &FogParams| apply_fog(img, f.beta, f.airlight, &depth_ramp(img.height(), img.width()));
    match &spec.params {
        DegradationParams::Rain(r) => Ok(apply_rain(img, r, spec.seed)),
        DegradationParams::Fog(f) => fog(img, f),
        DegradationParams::RainFog(r, f) => fog(&apply_rain(img, r, spec.seed), f),
        DegradationParams::Snow(s) => Ok(apply_snow(img, s, spec.seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Image {
        Image::from_fn(32, 40, |y, x| [0.2 + 0.5 * y as f32 / 32.0, 0.3 + 0.3 * x as f32 / 40.0, 0.4])
    }

    #[test]
    fn zero_intensity_is_identity() {
        let img = scene();
        for kind in DegradationKind::ALL {
            let spec = DegradationSpec::new(kind, 0.0, 17).unwrap();
            assert_eq!(degrade(&img, &spec).unwrap(), img, "{kind}");
        }
    }

    #[test]
    fn fog_limits() {
        let img = scene();
        let depth = vec![1.0; 32 * 40];
        assert_eq!(apply_fog(&img, 0.0, [0.8; 3], &depth).unwrap(), img);
        let a = [0.8, 0.7, 0.9];
        let thick = apply_fog(&img, 1e4, a, &depth).unwrap();
        for c in 0..3 {
            assert!(thick.plane(c).iter().all(|&v| (v - a[c]).abs() < 1e-6));
        }
        assert!(matches!(apply_fog(&img, -0.1, a, &depth), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn rain_brightens_and_is_deterministic() {
        let img = scene();
        let spec = DegradationSpec::new(DegradationKind::Rain, 0.8, 5).unwrap();
        let a = degrade(&img, &spec).unwrap();
        assert_eq!(a, degrade(&img, &spec).unwrap());
        assert!(a.mean() > img.mean());
        let DegradationParams::Rain(mut r) = spec.params.clone() else { unreachable!() };
        r.density = 0.0;
        assert_eq!(apply_rain(&img, &r, 5), img);
    }

    #[test]
    fn snow_centers_lie_inside() {
        let spec = DegradationSpec::new(DegradationKind::Snow, 1.0, 3).unwrap();
        let DegradationParams::Snow(p) = &spec.params else { unreachable!() };
        let parts = snow_particles(32, 40, p, 3);
        assert!(!parts.is_empty());
        assert!(parts.iter().all(|&(x, y, _)| (0.0..40.0).contains(&x) && (0.0..32.0).contains(&y)));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DegradationKind::ALL {
            assert_eq!(k.as_str().parse::<DegradationKind>().unwrap(), k);
        }
        assert!("hail".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn intensity_outside_unit_range_is_rejected() {
        assert!(DegradationSpec::new(DegradationKind::Fog, 1.5, 0).is_err());
    }
}
