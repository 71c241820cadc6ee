//! Frozen semantic embedders for images and captions.
//!
//! The toy backend is a fixed seeded random projection: images are
//! area-downsampled to an 8x8 RGB grid (192 values, channel-major) and text
//! is a hashed bag of words over 512 bins. An external backend can be
//! plugged in through a small subprocess protocol:
//!
//! ```text
//! <command> image <input.png> <output.bin>
//! <command> text  <input.txt> <output.bin>
//! ```
//!
//! where `output.bin` receives `dim` little-endian `f32` values.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_EMBED_DIM: usize = 512;
pub const TOY_GRID: usize = 8;
pub const TOY_IMAGE_FEATURES: usize = 3 * TOY_GRID * TOY_GRID;
pub const TEXT_BINS: usize = 512;
pub const MAX_CAPTION_CHARS: usize = 256;
/// Pre-normalization norms below this produce the zero embedding.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    backend_id: String,
}

impl Embedding {
    /// Normalizes `raw` to unit length, or to exact zeros when its norm is below [`ZERO_NORM`].
    pub fn normalized(raw: &[f64], backend_id: impl Into<String>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = if norm < ZERO_NORM { vec![0.0; raw.len()] } else { raw.iter().map(|v| (v / norm) as f32).collect() };
        Embedding { values, backend_id: backend_id.into() }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum();
        let d = self.norm() * other.norm();
        if d == 0.0 {
            0.0
        } else {
            dot / d
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.values.len()], self.values.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSource {
    MetadataTemplate,
    ExternalCaptioner,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    text: String,
    source: CaptionSource,
}

impl Caption {
    /// Trims and truncates to [`MAX_CAPTION_CHARS`] characters.
    pub fn new(text: &str, source: CaptionSource) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::EmptyCaption);
        }
        let text: String = trimmed.chars().take(MAX_CAPTION_CHARS).collect();
        Ok(Caption { text, source })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> CaptionSource {
        self.source
    }
}

/// Scene and weather labels a caption is generated from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionMetadata {
    pub scene: String,
    pub weather: String,
}

/// Fills `"a photo of {scene} in {weather}"`.
pub fn template_caption(meta: &CaptionMetadata) -> Result<Caption> {
    if meta.scene.trim().is_empty() || meta.weather.trim().is_empty() {
        return Err(Error::MissingMetadata);
    }
    Caption::new(&format!("a photo of {} in {}", meta.scene.trim(), meta.weather.trim()), CaptionSource::MetadataTemplate)
}

/// Caption generation: metadata template, or an external captioner command
/// invoked as `<command> caption <input.png> <output.txt>`.
#[derive(Clone, Debug, Default)]
pub enum Captioner {
    #[default]
    Template,
    External(PathBuf),
}

impl Captioner {
    pub fn caption(&self, meta: Option<&CaptionMetadata>, image: &Image) -> Result<Caption> {
        match (self, meta) {
            (Captioner::Template, Some(m)) => template_caption(m),
            (Captioner::Template, None) => Err(Error::MissingMetadata),
            (Captioner::External(cmd), _) => {
                let dir = scratch_dir()?;
                let input = dir.path().join("input.png");
                let output = dir.path().join("caption.txt");
                image.save_png(&input)?;
                run_external(cmd, "caption", &input, &output)?;
                let text = std::fs::read_to_string(&output)?;
                Caption::new(&text, CaptionSource::ExternalCaptioner)
            }
        }
    }
}

/// A frozen embedding backend.
pub trait EmbedBackend: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_image(&self, image: &Image) -> Result<Embedding>;

    fn embed_text(&self, caption: &Caption) -> Result<Embedding>;

    /// The `[192, dim]` projection of the toy image path, for backends whose
    /// image embedding is differentiable in the pixels.
    fn image_projection(&self) -> Option<&[f64]> {
        None
    }
}

fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v * scale).collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased whitespace tokens hashed into [`TEXT_BINS`] count bins.
pub fn bag_of_words(text: &str) -> Vec<f64> {
    let mut bins = vec![0.0; TEXT_BINS];
    for tok in text.to_lowercase().split_whitespace() {
        bins[(fnv1a(tok.as_bytes()) % TEXT_BINS as u64) as usize] += 1.0;
    }
    bins
}

/// Differentiable toy image embedding of an `[N, 3, H, W]` batch: `[N, dim]`.
pub fn project_image_grid<T: Scalar>(projection: &[f64], images: &Var<T>) -> Var<T> {
    let n = images.shape()[0];
    let dim = projection.len() / TOY_IMAGE_FEATURES;
    let proj = Var::constant(Tensor::from_f64(&[TOY_IMAGE_FEATURES, dim], projection));
    images
        .area_resize(TOY_GRID, TOY_GRID)
        .reshape(&[n, TOY_IMAGE_FEATURES])
        .matmul(&proj, false, false)
        .l2_normalize_or_zero(T::lit(ZERO_NORM))
}

/// Deterministic seeded random-projection embedder.
pub struct ToyBackend {
    id: String,
    dim: usize,
    image_proj: Vec<f64>,
    text_proj: Vec<f64>,
}

impl ToyBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        ToyBackend {
            id: format!("toy-{seed}"),
            dim,
            image_proj: seeded_matrix(TOY_IMAGE_FEATURES, dim, seed),
            text_proj: seeded_matrix(TEXT_BINS, dim, seed ^ 0x7465_7874),
        }
    }

    pub fn text_projection(&self) -> &[f64] {
        &self.text_proj
    }
}

impl EmbedBackend for ToyBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Result<Embedding> {
        if image.height() < TOY_GRID || image.width() < TOY_GRID {
            return Err(Error::ImageTooSmall { h: image.height(), w: image.width(), min: TOY_GRID });
        }
        let x = Var::constant(image.to_tensor::<f64>());
        let e = project_image_grid(&self.image_proj, &x);
        Ok(Embedding { values: e.value().data().iter().map(|&v| v as f32).collect(), backend_id: self.id.clone() })
    }

    fn embed_text(&self, caption: &Caption) -> Result<Embedding> {
        let bins = bag_of_words(caption.text());
        let mut raw = vec![0.0; self.dim];
        for (b, &count) in bins.iter().enumerate() {
            if count != 0.0 {
                let row = &self.text_proj[b * self.dim..(b + 1) * self.dim];
                for (r, &w) in raw.iter_mut().zip(row) {
                    *r += count * w;
                }
            }
        }
        Ok(Embedding::normalized(&raw, self.id.clone()))
    }

    fn image_projection(&self) -> Option<&[f64]> {
        Some(&self.image_proj)
    }
}

/// Subprocess backend speaking the file-exchange protocol described in the module docs.
pub struct ExternalBackend {
    id: String,
    command: PathBuf,
    dim: usize,
}

impl ExternalBackend {
    pub fn new(command: impl Into<PathBuf>, dim: usize) -> Self {
        let command = command.into();
        ExternalBackend { id: format!("external:{}", command.display()), command, dim }
    }

    fn read_output(&self, path: &Path) -> Result<Embedding> {
        let bytes = std::fs::read(path).map_err(|e| Error::BackendUnavailable(format!("no output: {e}")))?;
        if bytes.len() != 4 * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "external backend returned {} bytes, expected {}",
                bytes.len(),
                4 * self.dim
            )));
        }
        let raw: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Embedding::normalized(&raw, self.id.clone()))
    }
}

fn scratch_dir() -> Result<tempfile::TempDir> {
    Ok(tempfile::Builder::new().prefix("skyclear-embed").tempdir()?)
}

fn run_external(cmd: &Path, mode: &str, input: &Path, output: &Path) -> Result<()> {
    let status = Command::new(cmd)
        .arg(mode)
        .arg(input)
        .arg(output)
        .status()
        .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", cmd.display())))?;
    if !status.success() {
        return Err(Error::BackendUnavailable(format!("{} exited with {status}", cmd.display())));
    }
    Ok(())
}

impl EmbedBackend for ExternalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Result<Embedding> {
        let dir = scratch_dir()?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("embedding.bin");
        image.save_png(&input)?;
        run_external(&self.command, "image", &input, &output)?;
        self.read_output(&output)
    }

    fn embed_text(&self, caption: &Caption) -> Result<Embedding> {
        let dir = scratch_dir()?;
        let input = dir.path().join("caption.txt");
        let output = dir.path().join("embedding.bin");
        std::fs::File::create(&input)?.write_all(caption.text().as_bytes())?;
        run_external(&self.command, "text", &input, &output)?;
        self.read_output(&output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub backend: BackendKind,
    pub seed: u64,
    pub dim: usize,
    /// Whether the restored image goes through the same image encoder as the input.
    pub shared_image_encoder: bool,
    pub command: Option<PathBuf>,
    pub captioner: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            backend: BackendKind::Toy,
            seed: 0,
            dim: DEFAULT_EMBED_DIM,
            shared_image_encoder: true,
            command: None,
            captioner: None,
        }
    }
}

/// The frozen encoders and captioner used by the restoration pipeline.
#[derive(Clone)]
pub struct Embedder {
    input_encoder: Arc<dyn EmbedBackend>,
    restored_encoder: Arc<dyn EmbedBackend>,
    text_encoder: Arc<dyn EmbedBackend>,
    captioner: Captioner,
}

impl Embedder {
    pub fn from_config(cfg: &EmbedderConfig) -> Result<Self> {
        let captioner = cfg.captioner.clone().map(Captioner::External).unwrap_or_default();
        match cfg.backend {
            BackendKind::Toy => {
                let main: Arc<dyn EmbedBackend> = Arc::new(ToyBackend::new(cfg.seed, cfg.dim));
                let restored: Arc<dyn EmbedBackend> = if cfg.shared_image_encoder {
                    main.clone()
                } else {
                    Arc::new(ToyBackend::new(cfg.seed.wrapping_add(1), cfg.dim))
                };
                Ok(Embedder { input_encoder: main.clone(), restored_encoder: restored, text_encoder: main, captioner })
            }
            BackendKind::External => {
                let cmd = cfg
                    .command
                    .clone()
                    .ok_or_else(|| Error::BackendUnavailable("embedder.command is not set".into()))?;
                let b: Arc<dyn EmbedBackend> = Arc::new(ExternalBackend::new(cmd, cfg.dim));
                Ok(Embedder { input_encoder: b.clone(), restored_encoder: b.clone(), text_encoder: b, captioner })
            }
        }
    }

    pub fn toy(seed: u64, dim: usize) -> Self {
        Self::from_backend(Arc::new(ToyBackend::new(seed, dim)))
    }

    /// One backend for every role.
    pub fn from_backend(backend: Arc<dyn EmbedBackend>) -> Self {
        Embedder {
            input_encoder: backend.clone(),
            restored_encoder: backend.clone(),
            text_encoder: backend,
            captioner: Captioner::Template,
        }
    }

    pub fn with_captioner(mut self, captioner: Captioner) -> Self {
        self.captioner = captioner;
        self
    }

    pub fn dim(&self) -> usize {
        self.input_encoder.dim()
    }

    pub fn input_encoder(&self) -> &dyn EmbedBackend {
        self.input_encoder.as_ref()
    }

    pub fn restored_encoder(&self) -> &dyn EmbedBackend {
        self.restored_encoder.as_ref()
    }

    pub fn embed_image(&self, image: &Image) -> Result<Embedding> {
        self.input_encoder.embed_image(image)
    }

    /// Image embedding of an `[N, C, H, W]` tensor.
    pub fn embed_image_tensor(&self, t: &Tensor<f32>) -> Result<Vec<Embedding>> {
        if t.rank() != 4 || t.dim(1) != 3 {
            return Err(Error::DimensionMismatch(format!("expected [N, 3, H, W], got {:?}", t.shape())));
        }
        Image::from_batch_tensor(t)?.iter().map(|img| self.embed_image(img)).collect()
    }

    pub fn embed_text(&self, caption: &Caption) -> Result<Embedding> {
        self.text_encoder.embed_text(caption)
    }

    pub fn caption(&self, meta: Option<&CaptionMetadata>, image: &Image) -> Result<Caption> {
        self.captioner.caption(meta, image)
    }

    /// Embeds a batch of restored images `[N, 3, H, W]`, keeping the graph
    /// when the restored-image encoder is differentiable.
    pub fn embed_restored<T: Scalar>(&self, restored: &Var<T>) -> Result<Var<T>> {
        let s = restored.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::DimensionMismatch(format!("expected [N, 3, H, W], got {s:?}")));
        }
        if s[2] < TOY_GRID || s[3] < TOY_GRID {
            return Err(Error::ImageTooSmall { h: s[2], w: s[3], min: TOY_GRID });
        }
        if let Some(p) = self.restored_encoder.image_projection() {
            return Ok(project_image_grid(p, restored));
        }
        let t = restored.value().cast::<f32>();
        let embs = Image::from_batch_tensor(&t)?
            .iter()
            .map(|img| self.restored_encoder.embed_image(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::constant(stack_embeddings(&embs)?))
    }
}

/// `[N, dim]` tensor from embeddings of equal width.
pub fn stack_embeddings<T: Scalar>(embs: &[Embedding]) -> Result<Tensor<T>> {
    let dim = embs.first().map(|e| e.dim()).ok_or_else(|| Error::DimensionMismatch("no embeddings".into()))?;
    let mut data = Vec::with_capacity(embs.len() * dim);
    for e in embs {
        if e.dim() != dim {
            return Err(Error::WidthMismatch { expected: dim, got: e.dim() });
        }
        data.extend(e.values.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(&[embs.len(), dim], data))
}
