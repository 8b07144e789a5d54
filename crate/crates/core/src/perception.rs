//! Pluggable face embedder and feature extractor.
//!
//! Training only needs two frozen functions: an identity embedding and a
//! feature pyramid for the attribute loss. Both are traits here, with small
//! seeded conv nets as deterministic builtins. Their weights can be replaced
//! from named tensors; they are never optimized.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::generator::FaceEmbedding;
use crate::params::{import_into, Init, Initializer, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{AnyTensor, Tensor};

/// Seed of the builtin embedder weights.
pub const EMBEDDER_SEED: u64 = 0xFACE;
/// Seed of the builtin feature pyramid weights.
pub const EXTRACTOR_SEED: u64 = 0xF1F0;
const SLOPE: f64 = 0.2;

/// Where perception weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightSource {
    Builtin,
    File(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceEmbedderSpec {
    pub input_size: usize,
    pub embedding_dim: usize,
    pub source: WeightSource,
}

impl Default for FaceEmbedderSpec {
    fn default() -> Self {
        FaceEmbedderSpec { input_size: 64, embedding_dim: 512, source: WeightSource::Builtin }
    }
}

/// Maps face images to unit-norm identity embeddings.
pub trait FaceEmbedder<T: Scalar> {
    fn embedding_dim(&self) -> usize;

    /// Images are resized to this side length before embedding.
    fn input_size(&self) -> usize;

    /// Records the embedding of `[B, 3, H, W]` images; rows have unit norm.
    fn embed_var(&self, tape: &mut Tape<T>, image: Var) -> Result<Var>;

    fn embed(&self, image: &Tensor<T>) -> Result<FaceEmbedding<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let e = self.embed_var(&mut tape, x)?;
        FaceEmbedding::normalized(tape.value(e).clone())
    }
}

/// One declared feature layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub channels: usize,
    /// Spatial reduction relative to the input.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureExtractorSpec {
    pub layers: Vec<LayerSpec>,
    pub source: WeightSource,
}

/// Produces one feature map per declared layer.
pub trait FeatureExtractor<T: Scalar> {
    fn layers(&self) -> Vec<LayerSpec>;

    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>>;

    fn extract(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = self.features(&mut tape, x)?;
        Ok(f.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

fn declare_convs(sink: &mut dyn ParamSink, prefix: &str, chans: &[usize], strides: &[usize]) -> Vec<ConvLayer> {
    let mut cin = 3;
    chans
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(i, (&cout, &stride))| {
            let fan_in = cin * 9;
            let l = ConvLayer {
                weight: sink.declare(&format!("{prefix}.conv{i}.weight"), &[cout, cin, 3, 3], Init::FanIn(fan_in)),
                bias: sink.declare(&format!("{prefix}.conv{i}.bias"), &[cout], Init::FanIn(fan_in)),
                stride,
            };
            cin = cout;
            l
        })
        .collect()
}

fn run_conv<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, l: &ConvLayer, x: Var) -> Result<Var> {
    let w = tape.constant(store.get(l.weight).clone());
    let b = tape.constant(store.get(l.bias).clone());
    let y = tape.conv2d(x, w, Some(b), l.stride, 1)?;
    tape.leaky_relu(y, SLOPE)
}

fn check_rgb<T: Scalar>(tape: &Tape<T>, image: Var, who: &str) -> Result<()> {
    match *tape.shape(image) {
        [_, 3, _, _] => Ok(()),
        ref s => bail!(Dimension, "{who} expects [B, 3, H, W], got {s:?}"),
    }
}

/// Four stride-2 conv stages, spatial mean, linear projection, L2 normalization.
#[derive(Debug, Clone)]
pub struct ConvEmbedder<T> {
    input_size: usize,
    embedding_dim: usize,
    params: ParamStore<T>,
    convs: Vec<ConvLayer>,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

const EMBEDDER_CHANNELS: [usize; 4] = [16, 32, 64, 64];

impl<T: Scalar> ConvEmbedder<T> {
    /// Seeded builtin weights.
    pub fn builtin(input_size: usize, embedding_dim: usize) -> Result<Self> {
        if input_size < 2 || embedding_dim == 0 {
            bail!(Config, "embedder needs input_size ≥ 2 and embedding_dim ≥ 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
        let mut init = Initializer::<T>::new(&mut rng);
        let convs = declare_convs(&mut init, "embed", &EMBEDDER_CHANNELS, &[2, 2, 2, 2]);
        let c = EMBEDDER_CHANNELS[3];
        let proj_weight = init.declare("embed.proj.weight", &[embedding_dim, c], Init::FanIn(c));
        let proj_bias = init.declare("embed.proj.bias", &[embedding_dim], Init::FanIn(c));
        Ok(ConvEmbedder { input_size, embedding_dim, params: init.store, convs, proj_weight, proj_bias })
    }

    pub fn from_spec(spec: &FaceEmbedderSpec, tensors: Option<Vec<(String, AnyTensor)>>) -> Result<Self> {
        let mut e = Self::builtin(spec.input_size, spec.embedding_dim)?;
        match (&spec.source, tensors) {
            (WeightSource::Builtin, _) => {}
            (WeightSource::File(_), Some(t)) => e.import(t)?,
            (WeightSource::File(path), None) => bail!(Load, "no weights supplied for `{path}`"),
        }
        Ok(e)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn export(&self) -> Vec<(String, AnyTensor)> {
        self.params.iter().map(|(n, t)| (String::from(n), AnyTensor::from(t.clone()))).collect()
    }

    pub fn import(&mut self, tensors: Vec<(String, AnyTensor)>) -> Result<()> {
        let mut staged = self.params.clone();
        import_into(&mut staged, tensors)?;
        self.params = staged;
        Ok(())
    }
}

impl<T: Scalar> FaceEmbedder<T> for ConvEmbedder<T> {
    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn embed_var(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        check_rgb(tape, image, "embedder")?;
        let mut x = tape.resize_bilinear(image, self.input_size, self.input_size)?;
        for l in &self.convs {
            x = run_conv(tape, &self.params, l, x)?;
        }
        let pooled = tape.spatial_mean(x)?;
        let w = tape.constant(self.params.get(self.proj_weight).clone());
        let b = tape.constant(self.params.get(self.proj_bias).clone());
        let e = tape.linear(pooled, w, Some(b))?;
        tape.l2_normalize_rows(e)
    }
}

/// `F(x) = x`: the attribute loss reduces to an L1 pixel distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelExtractor;

impl<T: Scalar> FeatureExtractor<T> for PixelExtractor {
    fn layers(&self) -> Vec<LayerSpec> {
        alloc::vec![LayerSpec { name: String::from("pixels"), channels: 3, stride: 1 }]
    }

    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        check_rgb(tape, image, "extractor")?;
        Ok(alloc::vec![image])
    }
}

/// Three-stage conv pyramid standing in for a pretrained backbone.
#[derive(Debug, Clone)]
pub struct ConvExtractor<T> {
    params: ParamStore<T>,
    convs: Vec<ConvLayer>,
}

const EXTRACTOR_CHANNELS: [usize; 3] = [16, 32, 64];
const EXTRACTOR_STRIDES: [usize; 3] = [1, 2, 2];

impl<T: Scalar> ConvExtractor<T> {
    pub fn builtin() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let mut init = Initializer::<T>::new(&mut rng);
        let convs = declare_convs(&mut init, "features", &EXTRACTOR_CHANNELS, &EXTRACTOR_STRIDES);
        ConvExtractor { params: init.store, convs }
    }

    pub fn spec(&self) -> FeatureExtractorSpec {
        FeatureExtractorSpec { layers: FeatureExtractor::<T>::layers(self), source: WeightSource::Builtin }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn export(&self) -> Vec<(String, AnyTensor)> {
        self.params.iter().map(|(n, t)| (String::from(n), AnyTensor::from(t.clone()))).collect()
    }

    pub fn import(&mut self, tensors: Vec<(String, AnyTensor)>) -> Result<()> {
        let mut staged = self.params.clone();
        import_into(&mut staged, tensors)?;
        self.params = staged;
        Ok(())
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor<T> {
    fn layers(&self) -> Vec<LayerSpec> {
        let mut stride = 1;
        EXTRACTOR_CHANNELS
            .iter()
            .zip(EXTRACTOR_STRIDES)
            .enumerate()
            .map(|(i, (&channels, s))| {
                stride *= s;
                LayerSpec { name: format!("conv{i}"), channels, stride }
            })
            .collect()
    }

    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        check_rgb(tape, image, "extractor")?;
        let mut x = image;
        let mut out = Vec::with_capacity(self.convs.len());
        for l in &self.convs {
            x = run_conv(tape, &self.params, l, x)?;
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_face, FaceStyle, Shot};
    use crate::testutil::rand_tensor;

    fn face(id: u64, shot: u64) -> Tensor<f64> {
        render_face(&FaceStyle::for_identity(id), &Shot::aligned(64, shot), 64).unwrap().0
    }

    #[test]
    fn embeddings_have_unit_norm_and_are_deterministic() {
        let e = ConvEmbedder::<f64>::builtin(64, 32).unwrap();
        let x = rand_tensor(&[3, 3, 48, 48], 1);
        let a = e.embed(&x).unwrap();
        for b in 0..3 {
            let n: f64 = a.tensor().data()[b * 32..(b + 1) * 32].iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
        let again = ConvEmbedder::<f64>::builtin(64, 32).unwrap().embed(&x).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn embedder_is_locally_lipschitz() {
        let e = ConvEmbedder::<f64>::builtin(64, 64).unwrap();
        let x = face(1, 1);
        let dir = rand_tensor::<f64>(x.shape(), 9);
        let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let eps = 1e-3;
        let y = Tensor::from_fn(x.shape(), |i| x.data()[i] + eps * dir.data()[i] / norm);
        let (a, b) = (e.embed(&x).unwrap(), e.embed(&y).unwrap());
        let d: f64 = a.tensor().data().iter().zip(b.tensor().data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let ratio = d.sqrt() / eps;
        assert!(ratio < 100.0, "ratio {ratio}");
    }

    #[test]
    fn identities_are_separated_more_than_shots() {
        let e = ConvEmbedder::<f64>::builtin(64, 64).unwrap();
        let a = e.embed(&face(1, 1)).unwrap();
        let same = e.embed(&face(1, 2)).unwrap();
        let other = e.embed(&face(7, 1)).unwrap();
        assert!(a.cosine(0, &other, 0) < 1.0 - 1e-6);
        assert!(a.cosine(0, &same, 0) < 1.0 + 1e-12);
    }

    #[test]
    fn embedder_gradient_matches_finite_differences() {
        let e = ConvEmbedder::<f64>::builtin(8, 6).unwrap();
        let x = rand_tensor::<f64>(&[2, 3, 12, 12], 3);
        let r = crate::gradcheck::check_inputs(&[x], crate::gradcheck::DEFAULT_STEP, |t, v| {
            let y = e.embed_var(t, v[0])?;
            crate::gradcheck::weighted_sum(t, y, 4)
        })
        .unwrap();
        assert!(r.max_rel < 1e-4, "{r:?}");
    }

    #[test]
    fn extractor_layers_match_declared_specs() {
        let f = ConvExtractor::<f64>::builtin();
        let x = rand_tensor(&[2, 3, 16, 16], 2);
        let maps = f.extract(&x).unwrap();
        let specs = f.spec().layers;
        assert_eq!(maps.len(), specs.len());
        for (m, s) in maps.iter().zip(&specs) {
            assert_eq!(m.shape(), &[2, s.channels, 16 / s.stride, 16 / s.stride], "{}", s.name);
        }
        let p = FeatureExtractor::<f64>::extract(&PixelExtractor, &x).unwrap();
        assert_eq!(p, alloc::vec![x]);
    }

    #[test]
    fn non_rgb_input_is_rejected() {
        let x = rand_tensor::<f64>(&[1, 1, 16, 16], 1);
        assert!(ConvEmbedder::<f64>::builtin(16, 8).unwrap().embed(&x).is_err());
        assert!(ConvExtractor::<f64>::builtin().extract(&x).is_err());
        assert!(ConvEmbedder::<f64>::builtin(1, 8).is_err());
    }

    #[test]
    fn weights_come_from_the_named_source() {
        let spec = FaceEmbedderSpec { input_size: 16, embedding_dim: 8, source: WeightSource::File("w.fswt".into()) };
        assert!(matches!(ConvEmbedder::<f32>::from_spec(&spec, None), Err(crate::error::Error::Load(_))));
        let mut tensors = ConvEmbedder::<f32>::builtin(16, 8).unwrap().export();
        if let AnyTensor::F32(t) = &mut tensors[0].1 {
            t.data_mut()[0] = 0.5;
        }
        let e = ConvEmbedder::<f32>::from_spec(&spec, Some(tensors)).unwrap();
        assert_eq!(e.params().iter().next().unwrap().1.data()[0], 0.5);
        let mut short = e.export();
        short.pop();
        assert!(ConvEmbedder::<f32>::from_spec(&spec, Some(short)).is_err());
    }
}
