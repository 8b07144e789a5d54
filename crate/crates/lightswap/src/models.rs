//! Loading and saving models, perception nets and training checkpoints.

use std::path::Path;

use lightswap_core::generator::Generator;
use lightswap_core::perception::{ConvEmbedder, ConvExtractor, FeatureExtractor, PixelExtractor, WeightSource};
use lightswap_core::train::{TrainConfig, Trainer};
use lightswap_core::Scalar;

use crate::config::{ExtractorKind, RunConfig};
use crate::error::{Result, WithPath};
use crate::weights;

pub fn save_generator<T: Scalar>(path: &Path, g: &Generator<T>) -> Result<()> {
    weights::save(path, &g.export())
}

/// Builds the configured generator and replaces all of its tensors from
/// `path`. The file must match the configuration exactly.
pub fn load_generator<T: Scalar>(path: &Path, cfg: &RunConfig) -> Result<Generator<T>> {
    let tensors = weights::load(path)?;
    let mut g = Generator::new(cfg.train.generator.clone(), cfg.train.seed)?;
    g.import(tensors).at(path)?;
    Ok(g)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, t: &Trainer<T>) -> Result<()> {
    weights::save(path, &t.export())
}

pub fn load_checkpoint<T: Scalar>(path: &Path, config: &TrainConfig) -> Result<Trainer<T>> {
    let tensors = weights::load(path)?;
    Trainer::import(config.clone(), tensors).at(path)
}

pub fn embedder<T: Scalar>(cfg: &RunConfig, base: &Path) -> Result<ConvEmbedder<T>> {
    let spec = &cfg.embedder;
    let tensors = match &spec.source {
        WeightSource::Builtin => None,
        WeightSource::File(p) => Some(weights::load(&crate::data::resolve(base, p))?),
    };
    Ok(ConvEmbedder::from_spec(spec, tensors)?)
}

pub fn extractor<T: Scalar>(cfg: &RunConfig, base: &Path) -> Result<Box<dyn FeatureExtractor<T>>> {
    Ok(match (cfg.extractor, &cfg.extractor_weights) {
        (ExtractorKind::Pixels, _) => Box::new(PixelExtractor),
        (ExtractorKind::Conv, WeightSource::Builtin) => Box::new(ConvExtractor::<T>::builtin()),
        (ExtractorKind::Conv, WeightSource::File(p)) => {
            let path = crate::data::resolve(base, p);
            let mut e = ConvExtractor::<T>::builtin();
            e.import(weights::load(&path)?).at(&path)?;
            Box::new(e)
        }
    })
}
