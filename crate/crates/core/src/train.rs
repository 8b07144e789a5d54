//! One adversarial training step and the state needed to resume it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{CriticConfig, Discriminator};
use crate::error::{bail, Error, Result};
use crate::generator::{FaceEmbedding, Generator, GeneratorConfig, StatsMode};
use crate::image::area_downsample;
use crate::losses::{self, LossParts, LossReport, LossWeights};
use crate::optim::{AdamConfig, AdamState};
use crate::perception::{FaceEmbedder, FeatureExtractor};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{AnyTensor, Tensor};
use crate::triplet::{SamplerConfig, Triplet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub weights: LossWeights,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    pub batch_size: usize,
    pub sampler: SamplerConfig,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub seed: u64,
    /// Which output heads (small, mid, full) receive adversarial and
    /// identity losses.
    pub scales: [bool; 3],
    /// Update the critics; when off they stay frozen.
    pub train_critic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            weights: LossWeights::default(),
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            batch_size: 64,
            sampler: SamplerConfig::default(),
            total_steps: 100_000,
            checkpoint_every: 1000,
            sample_every: 1000,
            seed: 0,
            scales: [true; 3],
            train_critic: true,
        }
    }
}

impl TrainConfig {
    /// Reduced 64×64 setting for overfitting a handful of images on a CPU.
    pub fn smoke() -> Self {
        let generator = GeneratorConfig { resolution: 64, channels: 16, ..GeneratorConfig::default() };
        TrainConfig {
            critic: CriticConfig { base_channels: 16, ..CriticConfig::for_resolution(64) },
            generator,
            adam_g: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            adam_d: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            batch_size: 8,
            sampler: SamplerConfig { triplet_fraction: 1.0, ..SamplerConfig::default() },
            total_steps: 400,
            checkpoint_every: 100,
            sample_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.critic.sizes != self.generator.output_sizes() {
            bail!(
                Config,
                "critic sizes {:?} do not match generator outputs {:?}",
                self.critic.sizes,
                self.generator.output_sizes()
            );
        }
        if !(0.0..=1.0).contains(&self.sampler.triplet_fraction) {
            bail!(Config, "triplet_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Loss weights with inactive heads zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        for s in 0..3 {
            if !self.scales[s] {
                w.alpha_adv[s] = 0.0;
                w.beta_id[s] = 0.0;
            }
        }
        w
    }
}

/// Stacked images of one step. Ground truth exists for a subset of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    /// Rows that carry ground truth and the stacked ground truths.
    pub gt: Option<(Vec<usize>, Tensor<T>)>,
}

impl<T: Scalar> Batch<T> {
    /// Stacks `[1, 3, S, S]` triplet images.
    pub fn from_triplets(items: &[Triplet<&Tensor<T>>]) -> Result<Self> {
        if items.is_empty() {
            bail!(Usage, "empty batch");
        }
        let source = Tensor::stack0(&items.iter().map(|t| t.source).collect::<Vec<_>>())?;
        let target = Tensor::stack0(&items.iter().map(|t| t.target).collect::<Vec<_>>())?;
        let rows: Vec<usize> = items.iter().enumerate().filter(|(_, t)| t.gt.is_some()).map(|(i, _)| i).collect();
        let gt = if rows.is_empty() {
            None
        } else {
            let g: Vec<&Tensor<T>> = items.iter().filter_map(|t| t.gt).collect();
            Some((rows, Tensor::stack0(&g)?))
        };
        if source.shape() != target.shape() {
            bail!(Dimension, "source {:?} and target {:?} differ", source.shape(), target.shape());
        }
        Ok(Batch { source, target, gt })
    }

    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator, critics, optimizers and sampling RNG.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub critic: Discriminator<T>,
    pub opt_g: AdamState<T>,
    pub opt_d: AdamState<T>,
    rng: ChaCha8Rng,
    step: u64,
}

const CRITIC_SEED: u64 = 0xD15C;
const SAMPLER_SEED: u64 = 0x5A3F;

fn rng_words(rng: &ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = rng.get_seed().chunks(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let pos = rng.get_word_pos();
    w.extend((0..4).map(|i| ((pos >> (32 * i)) & 0xFFFF_FFFF) as u32 as f64));
    let stream = rng.get_stream();
    w.extend((0..2).map(|i| ((stream >> (32 * i)) & 0xFFFF_FFFF) as u32 as f64));
    w
}

fn rng_from_words(w: &[f64]) -> Result<ChaCha8Rng> {
    if w.len() != 14 || w.iter().any(|&v| v < 0.0 || v > u32::MAX as f64 || v as u32 as f64 != v) {
        bail!(Load, "rng state must be 14 integer words");
    }
    let word = |i: usize| w[i] as u32;
    let mut seed = [0u8; 32];
    for i in 0..8 {
        seed[4 * i..4 * i + 4].copy_from_slice(&word(i).to_le_bytes());
    }
    let pos = (0..4).fold(0u128, |acc, i| acc | (word(8 + i) as u128) << (32 * i));
    let stream = (0..2).fold(0u64, |acc, i| acc | (word(12 + i) as u64) << (32 * i));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn export_adam<T: Scalar>(prefix: &str, opt: &AdamState<T>, names: &[String], out: &mut Vec<(String, AnyTensor)>) {
    out.push((format!("{prefix}/step"), AnyTensor::F64(Tensor::scalar(opt.step as f64))));
    for (n, m) in names.iter().zip(&opt.m) {
        out.push((format!("{prefix}/m/{n}"), AnyTensor::from(m.clone())));
    }
    for (n, v) in names.iter().zip(&opt.v) {
        out.push((format!("{prefix}/v/{n}"), AnyTensor::from(v.clone())));
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let critic = Discriminator::new(config.critic.clone(), config.seed ^ CRITIC_SEED)?;
        let opt_g = AdamState::new(generator.params(), config.adam_g)?;
        let opt_d = AdamState::new(critic.params(), config.adam_d)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_SEED);
        Ok(Trainer { config, generator, critic, opt_g, opt_d, rng, step: 0 })
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// RNG for batch sampling; part of the checkpointed state.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One critic update followed by one generator update.
    pub fn train_step(
        &mut self,
        batch: &Batch<T>,
        embedder: &dyn FaceEmbedder<T>,
        extractor: &dyn FeatureExtractor<T>,
    ) -> Result<LossReport> {
        let step = self.step + 1;
        let report = self.step_inner(batch, embedder, extractor).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        for (name, v) in report.terms() {
            if !v.is_finite() {
                bail!(NonFinite, "step {step}: loss term {name} is {v}");
            }
        }
        self.step = step;
        Ok(report)
    }

    fn step_inner(
        &mut self,
        batch: &Batch<T>,
        embedder: &dyn FaceEmbedder<T>,
        extractor: &dyn FeatureExtractor<T>,
    ) -> Result<LossReport> {
        let w = self.config.effective_weights();
        let sizes = self.config.generator.output_sizes();
        let res = self.config.generator.resolution;
        let f_src: FaceEmbedding<T> = embedder.embed(&batch.source)?;

        let mut tape = Tape::new();
        let bound_g = self.generator.params().bind(&mut tape, true);
        let target = tape.constant(batch.target.clone());
        let f = tape.constant(f_src.tensor().clone());
        let fwd = self.generator.forward(&mut tape, &bound_g, target, f, StatsMode::Batch)?;

        let adv_on: [bool; 3] = core::array::from_fn(|s| w.lambda_adv * w.alpha_adv[s] > 0.0);
        let mut report = LossReport::default();
        if self.config.train_critic && adv_on.iter().any(|&a| a) {
            let mut td = Tape::new();
            let bound_d = self.critic.params().bind(&mut td, true);
            let mut total = None;
            for s in 0..3 {
                if !adv_on[s] {
                    continue;
                }
                let real = td.constant(area_downsample(&batch.target, res / sizes[s])?);
                let fake = td.constant(tape.value(fwd.outputs[s]).clone());
                let lr = self.critic.forward(&mut td, &bound_d, s, real)?;
                let lf = self.critic.forward(&mut td, &bound_d, s, fake)?;
                let l = losses::hinge_d_loss(&mut td, lr, lf)?;
                report.d[s] = td.value(l).item().as_f64();
                total = Some(match total {
                    Some(t) => td.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one active critic");
            report.total_d = report.d.iter().sum();
            td.backward(total)?;
            self.opt_d.step(self.critic.params_mut(), &bound_d.grads(&td))?;
        }

        let mut parts = LossParts::default();
        if adv_on.iter().any(|&a| a) {
            let frozen = self.critic.params().bind(&mut tape, false);
            for s in 0..3 {
                if adv_on[s] {
                    let logits = self.critic.forward(&mut tape, &frozen, s, fwd.outputs[s])?;
                    parts.adv[s] = Some(losses::hinge_g_loss(&mut tape, logits)?);
                }
            }
        }
        if w.lambda_id > 0.0 {
            let beta = w.beta_id;
            let (_, per) = losses::identity_loss(&mut tape, fwd.outputs, f, embedder, beta)?;
            parts.id = per;
        }
        let full = fwd.outputs[2];
        if w.lambda_vgg > 0.0 {
            parts.vgg = Some(losses::attribute_loss(&mut tape, full, target, extractor)?);
        }
        if w.lambda_rec > 0.0 {
            if let Some((rows, gt)) = &batch.gt {
                let x = tape.select_rows(full, rows)?;
                let g = tape.constant(gt.clone());
                parts.rec = losses::reconstruction_loss(&mut tape, x, Some(g))?;
            }
        }
        let (total, g_report) = losses::total_generator_loss(&mut tape, &parts, &w)?;
        tape.backward(total)?;
        self.opt_g.step(self.generator.params_mut(), &bound_g.grads(&tape))?;
        self.generator.commit_moments(&fwd.moments)?;

        Ok(LossReport { d: report.d, total_d: report.total_d, ..g_report })
    }

    /// Everything needed to resume: weights, statistics, optimizer moments,
    /// step counter and sampler RNG.
    pub fn export(&self) -> Vec<(String, AnyTensor)> {
        let mut out = Vec::new();
        out.push((String::from("meta/step"), AnyTensor::F64(Tensor::scalar(self.step as f64))));
        out.push((String::from("rng/state"), AnyTensor::F64(Tensor::new(&[14], rng_words(&self.rng)).expect("14 words"))));
        for (n, t) in self.generator.export() {
            out.push((format!("g/{n}"), t));
        }
        for (n, t) in self.critic.export() {
            out.push((format!("d/{n}"), t));
        }
        let names = |store: &crate::params::ParamStore<T>| store.iter().map(|(n, _)| String::from(n)).collect::<Vec<_>>();
        export_adam("opt_g", &self.opt_g, &names(self.generator.params()), &mut out);
        export_adam("opt_d", &self.opt_d, &names(self.critic.params()), &mut out);
        out
    }

    /// Rebuilds a trainer for `config` from [`Trainer::export`] output.
    pub fn import(config: TrainConfig, tensors: Vec<(String, AnyTensor)>) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        let mut g = Vec::new();
        let mut d = Vec::new();
        let mut opt: [Vec<(String, AnyTensor)>; 2] = Default::default();
        let mut step = None;
        let mut rng = None;
        for (name, value) in tensors {
            let scalar_f64 = |v: &AnyTensor| match v {
                AnyTensor::F64(x) if x.shape() == [1] => Ok(x.item()),
                _ => Err(Error::Load(format!("`{name}` must be a one-element f64 tensor"))),
            };
            if name == "meta/step" {
                step = Some(scalar_f64(&value)?);
            } else if name == "rng/state" {
                let AnyTensor::F64(x) = &value else {
                    bail!(Load, "`rng/state` must be f64");
                };
                rng = Some(rng_from_words(x.data())?);
            } else if let Some(n) = name.strip_prefix("g/") {
                g.push((String::from(n), value));
            } else if let Some(n) = name.strip_prefix("d/") {
                d.push((String::from(n), value));
            } else if let Some(n) = name.strip_prefix("opt_g/") {
                opt[0].push((String::from(n), value));
            } else if let Some(n) = name.strip_prefix("opt_d/") {
                opt[1].push((String::from(n), value));
            } else {
                bail!(Load, "unknown tensor `{name}`");
            }
        }
        let (Some(step), Some(rng)) = (step, rng) else {
            bail!(Load, "checkpoint lacks `meta/step` or `rng/state`");
        };
        t.generator.import(g)?;
        t.critic.import(d)?;
        let [og, od] = opt;
        import_adam(&mut t.opt_g, t.generator.params(), og, "opt_g")?;
        import_adam(&mut t.opt_d, t.critic.params(), od, "opt_d")?;
        t.step = step as u64;
        t.rng = rng;
        Ok(t)
    }
}

fn import_adam<T: Scalar>(
    opt: &mut AdamState<T>,
    store: &crate::params::ParamStore<T>,
    tensors: Vec<(String, AnyTensor)>,
    prefix: &str,
) -> Result<()> {
    let mut m = crate::params::ParamStore::<T>::default();
    let mut v = crate::params::ParamStore::<T>::default();
    for (n, t) in store.iter() {
        m.push(n, Tensor::zeros(t.shape()));
        v.push(n, Tensor::zeros(t.shape()));
    }
    let (mut ms, mut vs) = (Vec::new(), Vec::new());
    let mut step = None;
    for (name, t) in tensors {
        if name == "step" {
            match t {
                AnyTensor::F64(x) if x.shape() == [1] => step = Some(x.item()),
                _ => bail!(Load, "`{prefix}/step` must be a one-element f64 tensor"),
            }
        } else if let Some(n) = name.strip_prefix("m/") {
            ms.push((String::from(n), t));
        } else if let Some(n) = name.strip_prefix("v/") {
            vs.push((String::from(n), t));
        } else {
            bail!(Load, "unknown tensor `{prefix}/{name}`");
        }
    }
    crate::params::import_into(&mut m, ms).map_err(|e| Error::Load(format!("{prefix} first moments: {e}")))?;
    crate::params::import_into(&mut v, vs).map_err(|e| Error::Load(format!("{prefix} second moments: {e}")))?;
    let Some(step) = step else {
        bail!(Load, "missing tensor `{prefix}/step`");
    };
    opt.step = step as u64;
    opt.m = m.iter().map(|(_, t)| t.clone()).collect();
    opt.v = v.iter().map(|(_, t)| t.clone()).collect();
    Ok(())
}
