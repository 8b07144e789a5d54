//! Inference: align both faces, embed the source once, run the generator
//! on the aligned target.

use lightswap_core::align::{align_face, Landmarks5};
use lightswap_core::generator::{Generator, MultiScaleOutput};
use lightswap_core::perception::FaceEmbedder;
use lightswap_core::{Result, Scalar, Tensor};

pub struct Face<'a, T> {
    pub image: &'a Tensor<T>,
    pub landmarks: &'a Landmarks5,
}

impl<T> Clone for Face<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Face<'_, T> {}

/// Swaps the identity of `source` onto `target`. `template` is the
/// alignment template at the generator's resolution.
pub fn swap<T: Scalar>(
    generator: &Generator<T>,
    embedder: &dyn FaceEmbedder<T>,
    source: Face<'_, T>,
    target: Face<'_, T>,
    template: &Landmarks5,
) -> Result<MultiScaleOutput<T>> {
    let size = generator.config().resolution;
    let src = align_face(source.image, source.landmarks, template, size)?;
    let tgt = align_face(target.image, target.landmarks, template, size)?;
    let f = embedder.embed(&src)?;
    generator.infer(&tgt, &f)
}
