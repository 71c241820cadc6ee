//! End-to-end restoration of single images: conditioning, padding, and the
//! two-pass forward.

use std::collections::HashMap;

use crate::autograd::{Scalar, Var};
use crate::backbone::{Conditioning, Model, DOWNSCALE};
use crate::embedder::{stack_embeddings, CaptionMetadata, Embedder, Embedding};
use crate::error::Result;
use crate::image::Image;

/// Builds batch conditioning from the degraded inputs and their caption
/// metadata. Caption embeddings are memoized in `cache` by caption text.
pub fn conditioning<T: Scalar>(
    embedder: &Embedder,
    images: &[&Image],
    metas: &[Option<&CaptionMetadata>],
    cache: &mut HashMap<String, Embedding>,
) -> Result<Conditioning<T>> {
    let image_embs = images.iter().map(|img| embedder.embed_image(img)).collect::<Result<Vec<_>>>()?;
    let mut text_embs = Vec::with_capacity(images.len());
    for (img, meta) in images.iter().zip(metas) {
        let caption = embedder.caption(*meta, img)?;
        let e = match cache.get(caption.text()) {
            Some(e) => e.clone(),
            None => {
                let e = embedder.embed_text(&caption)?;
                cache.insert(caption.text().to_string(), e.clone());
                e
            }
        };
        text_embs.push(e);
    }
    Ok(Conditioning {
        image: Var::constant(stack_embeddings(&image_embs)?),
        text: Var::constant(stack_embeddings(&text_embs)?),
    })
}

/// Both restorations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    pub first: Image,
    pub second: Image,
}

/// Anything that restores single images; lets evaluation run on probes.
pub trait ImageRestorer: Sync {
    fn restore(&self, image: &Image, meta: Option<&CaptionMetadata>) -> Result<Restoration>;
}

/// Returns the input unchanged for both passes.
pub struct IdentityRestorer;

impl ImageRestorer for IdentityRestorer {
    fn restore(&self, image: &Image, _meta: Option<&CaptionMetadata>) -> Result<Restoration> {
        Ok(Restoration { first: image.clone(), second: image.clone() })
    }
}

/// A trained model with its frozen embedder.
#[derive(Clone)]
pub struct Restorer {
    pub model: Model<f32>,
    pub embedder: Embedder,
}

impl Restorer {
    pub fn new(model: Model<f32>, embedder: Embedder) -> Self {
        Restorer { model, embedder }
    }
}

impl ImageRestorer for Restorer {
    /// Reflect-pads to a multiple of 8, restores, and crops back.
    fn restore(&self, image: &Image, meta: Option<&CaptionMetadata>) -> Result<Restoration> {
        let (h, w) = (image.height(), image.width());
        let padded = image.reflect_pad_to_multiple(DOWNSCALE);
        let cond = conditioning::<f32>(&self.embedder, &[image], &[meta], &mut HashMap::new())?;
        let x = Image::batch_tensor::<f32>(&[&padded])?;
        let (first, second) = self.model.infer(&x, cond.image.value(), cond.text.value(), &self.embedder)?;
        let crop = |t| -> Result<Image> {
            let img = Image::from_batch_tensor(&t)?.remove(0);
            Ok(if (img.height(), img.width()) == (h, w) { img } else { img.crop(0, 0, h, w) })
        };
        Ok(Restoration { first: crop(first)?, second: crop(second)? })
    }
}
