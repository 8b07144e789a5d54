//! Patch critics, one per generator output scale.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::params::{Bound, Init, Initializer, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{AnyTensor, Tensor};

/// Kernel size of every critic conv.
pub const KERNEL: usize = 4;
const STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    /// Channels of the first stage; later stages double.
    pub base_channels: usize,
    pub leaky_slope: f64,
    /// Image side length per critic, small to large.
    pub sizes: [usize; 3],
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { base_channels: 64, leaky_slope: 0.2, sizes: [64, 128, 256] }
    }
}

impl CriticConfig {
    pub fn for_resolution(resolution: usize) -> Self {
        CriticConfig { sizes: [resolution / 4, resolution / 2, resolution], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            bail!(Config, "critic base_channels must be positive");
        }
        if self.sizes.contains(&0) {
            bail!(Config, "critic sizes must be positive");
        }
        Ok(())
    }

    /// Channels after each of the four stages.
    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Side of the logit map produced for an input of side `n`.
    pub fn logit_extent(&self, n: usize) -> usize {
        let pad = KERNEL / 2;
        let mut n = n;
        for s in STRIDES.iter().copied().chain([1]) {
            n = (n + 2 * pad - KERNEL) / s + 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Three independent critics sharing one parameter store (prefixes `d0`,
/// `d1`, `d2` for the small, mid and full scale).
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    config: CriticConfig,
    params: ParamStore<T>,
    critics: [Vec<Layer>; 3],
}

fn declare_critic(sink: &mut dyn ParamSink, cfg: &CriticConfig, prefix: &str) -> Vec<Layer> {
    let chans = cfg.stage_channels();
    let mut cin = 3;
    let mut layers = Vec::new();
    for (i, (&cout, &stride)) in chans.iter().zip(&STRIDES).chain([(&1, &1)]).enumerate() {
        let fan_in = cin * KERNEL * KERNEL;
        layers.push(Layer {
            weight: sink.declare(&format!("{prefix}.conv{i}.weight"), &[cout, cin, KERNEL, KERNEL], Init::FanIn(fan_in)),
            bias: sink.declare(&format!("{prefix}.conv{i}.bias"), &[cout], Init::FanIn(fan_in)),
            stride,
        });
        cin = cout;
    }
    layers
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::<T>::new(&mut rng);
        let critics = [0, 1, 2].map(|s| declare_critic(&mut init, &config, &format!("d{s}")));
        Ok(Discriminator { config, params: init.store, critics })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Patch logits `[B, 1, h, w]` of the critic at `scale` (0 small .. 2 full).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, scale: usize, image: Var) -> Result<Var> {
        if scale > 2 {
            bail!(Dimension, "critic scale must be 0, 1 or 2, got {scale}");
        }
        let s = self.config.sizes[scale];
        match *tape.shape(image) {
            [_, 3, h, w] if h == s && w == s => {}
            ref shape => bail!(Dimension, "critic {scale} expects [B, 3, {s}, {s}], got {shape:?}"),
        }
        let layers = &self.critics[scale];
        let mut x = image;
        for (i, l) in layers.iter().enumerate() {
            x = tape.conv2d(x, bound.var(l.weight), Some(bound.var(l.bias)), l.stride, KERNEL / 2)?;
            if i + 1 < layers.len() {
                x = tape.leaky_relu(x, self.config.leaky_slope)?;
            }
        }
        Ok(x)
    }

    /// Logits of constant images, without recording gradients.
    pub fn logits(&self, scale: usize, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &bound, scale, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn export(&self) -> Vec<(String, AnyTensor)> {
        self.params.iter().map(|(n, t)| (String::from(n), AnyTensor::from(t.clone()))).collect()
    }

    pub fn import(&mut self, tensors: Vec<(String, AnyTensor)>) -> Result<()> {
        let mut staged = self.params.clone();
        crate::params::import_into(&mut staged, tensors)?;
        self.params = staged;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;

    fn small() -> CriticConfig {
        CriticConfig { base_channels: 4, sizes: [8, 16, 32], ..CriticConfig::default() }
    }

    #[test]
    fn logit_maps_match_the_predicted_extent() {
        let d = Discriminator::<f64>::new(small(), 1).unwrap();
        for s in 0..3 {
            let n = d.config().sizes[s];
            let y = d.logits(s, &rand_tensor(&[2, 3, n, n], s as u64)).unwrap();
            let m = d.config().logit_extent(n);
            assert_eq!(y.shape(), &[2, 1, m, m], "scale {s}");
        }
        // 256 → 129 → 65 → 33 → 34 → 35 with kernel 4, padding 2.
        assert_eq!(CriticConfig::default().logit_extent(256), 35);
    }

    #[test]
    fn critics_are_independent_and_named_by_scale() {
        let d = Discriminator::<f32>::new(small(), 2).unwrap();
        let names: Vec<&str> = d.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 3 * 5 * 2);
        for s in 0..3 {
            assert!(names.contains(&format!("d{s}.conv4.bias").as_str()));
        }
        let w0 = d.params().iter().find(|(n, _)| *n == "d0.conv0.weight").unwrap().1;
        let w1 = d.params().iter().find(|(n, _)| *n == "d1.conv0.weight").unwrap().1;
        assert_eq!(w0.shape(), &[4, 3, KERNEL, KERNEL]);
        assert_ne!(w0, w1);
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        let d = Discriminator::<f64>::new(small(), 3).unwrap();
        assert!(matches!(d.logits(0, &rand_tensor(&[1, 3, 16, 16], 1)), Err(crate::error::Error::Dimension(_))));
        assert!(matches!(d.logits(3, &rand_tensor(&[1, 3, 8, 8], 1)), Err(crate::error::Error::Dimension(_))));
        assert!(Discriminator::<f64>::new(CriticConfig { base_channels: 0, ..small() }, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = Discriminator::<f64>::new(small(), 4).unwrap();
        let x = rand_tensor::<f64>(&[2, 3, 16, 16], 5);
        let entries: Vec<_> = (0..d.params().len())
            .map(crate::params::ParamId)
            .filter(|id| d.params().name(*id).starts_with("d1."))
            .map(|id| (id, 0))
            .collect();
        let r = crate::gradcheck::check_params(d.params(), &entries, crate::gradcheck::DEFAULT_STEP, |t, b| {
            let xv = t.constant(x.clone());
            let y = d.forward(t, b, 1, xv)?;
            crate::gradcheck::weighted_sum(t, y, 7)
        })
        .unwrap();
        assert!(r.max_rel < 1e-4, "{r:?}");
    }

    #[test]
    fn export_import_round_trip() {
        let a = Discriminator::<f32>::new(small(), 1).unwrap();
        let mut b = Discriminator::<f32>::new(small(), 2).unwrap();
        b.import(a.export()).unwrap();
        assert_eq!(a.params(), b.params());
        let mut wrong = a.export();
        wrong.swap(0, 1);
        wrong.truncate(1);
        assert!(b.import(wrong).is_err());
        assert_eq!(a.params(), b.params());
    }
}
