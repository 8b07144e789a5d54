//! Flat `key = value` run configuration. Blank lines and lines starting
//! with `#` are ignored; every setting has a key, and [`render`] writes all
//! of them so a run directory records exactly what was used.
//!
//! A `preset = paper | smoke` line picks the base values that the other
//! keys then override, wherever it appears in the file.

use std::path::Path;
use std::str::FromStr;

use lightswap_core::align::TEMPLATE_112;
use lightswap_core::generator::StatsMode;
use lightswap_core::perception::{FaceEmbedderSpec, WeightSource};
use lightswap_core::train::TrainConfig;
use lightswap_core::Error as CoreError;

use crate::error::{self, Result, WithPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Smoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    /// The builtin conv pyramid.
    Conv,
    /// Raw pixels, turning the attribute loss into an L1 distance.
    Pixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { runs: 100, warmup: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub embedder: FaceEmbedderSpec,
    pub extractor: ExtractorKind,
    pub extractor_weights: WeightSource,
    /// Crop side of the `align` command.
    pub align_size: usize,
    /// Alignment template in 112×112 crop coordinates.
    pub template: [[f64; 2]; 5],
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let train = match p {
            Preset::Paper => TrainConfig::default(),
            Preset::Smoke => TrainConfig::smoke(),
        };
        let embedder = FaceEmbedderSpec { embedding_dim: train.generator.embedding_dim, ..FaceEmbedderSpec::default() };
        RunConfig {
            train,
            embedder,
            extractor: ExtractorKind::Conv,
            extractor_weights: WeightSource::Builtin,
            align_size: 256,
            template: TEMPLATE_112,
            bench: BenchConfig::default(),
        }
    }

    /// Derived fields and cross-field checks.
    pub fn finalize(&mut self) -> lightswap_core::Result<()> {
        let sizes = self.train.generator.output_sizes();
        self.train.critic.sizes = sizes;
        self.embedder.embedding_dim = self.train.generator.embedding_dim;
        self.train.validate()?;
        if self.bench.runs == 0 {
            return Err(CoreError::Config("bench.runs must be at least 1".into()));
        }
        if self.align_size < 8 {
            return Err(CoreError::Config("align.size must be at least 8".into()));
        }
        Ok(())
    }

    /// The template rescaled to a `size × size` crop.
    pub fn template_for(&self, size: usize) -> lightswap_core::align::Landmarks5 {
        let k = size as f64 / 112.0;
        lightswap_core::align::Landmarks5::new(self.template.map(|[x, y]| [x * k, y * k]))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

fn list<const N: usize, T: ToString>(v: &[T; N]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn source(s: &WeightSource) -> String {
    match s {
        WeightSource::Builtin => "builtin".into(),
        WeightSource::File(p) => p.clone(),
    }
}

/// Every key with its current value, in file order.
pub fn entries(c: &RunConfig) -> Vec<(&'static str, String)> {
    let t = &c.train;
    let g = &t.generator;
    let w = &t.weights;
    let stats = |m: StatsMode| match m {
        StatsMode::Running => "running",
        StatsMode::Batch => "batch",
    };
    let template: Vec<f64> = c.template.iter().flatten().copied().collect();
    vec![
        ("seed", t.seed.to_string()),
        ("generator.resolution", g.resolution.to_string()),
        ("generator.channels", g.channels.to_string()),
        ("generator.embedding_dim", g.embedding_dim.to_string()),
        ("generator.variant", g.variant.to_string()),
        ("generator.identity_blocks", list(&g.identity_blocks)),
        ("generator.attribute_blocks", list(&g.attribute_blocks)),
        ("generator.decoder_blocks", list(&g.decoder_blocks)),
        ("generator.inference_stats", stats(g.inference_stats).into()),
        ("generator.leaky_slope", g.leaky_slope.to_string()),
        ("generator.norm_eps", g.norm_eps.to_string()),
        ("generator.stats_momentum", g.stats_momentum.to_string()),
        ("critic.base_channels", t.critic.base_channels.to_string()),
        ("critic.leaky_slope", t.critic.leaky_slope.to_string()),
        ("loss.alpha_adv", list(&w.alpha_adv)),
        ("loss.beta_id", list(&w.beta_id)),
        ("loss.lambda_adv", w.lambda_adv.to_string()),
        ("loss.lambda_id", w.lambda_id.to_string()),
        ("loss.lambda_vgg", w.lambda_vgg.to_string()),
        ("loss.lambda_rec", w.lambda_rec.to_string()),
        ("adam_g.lr", t.adam_g.lr.to_string()),
        ("adam_g.beta1", t.adam_g.beta1.to_string()),
        ("adam_g.beta2", t.adam_g.beta2.to_string()),
        ("adam_g.eps", t.adam_g.eps.to_string()),
        ("adam_d.lr", t.adam_d.lr.to_string()),
        ("adam_d.beta1", t.adam_d.beta1.to_string()),
        ("adam_d.beta2", t.adam_d.beta2.to_string()),
        ("adam_d.eps", t.adam_d.eps.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.total_steps", t.total_steps.to_string()),
        ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ("train.sample_every", t.sample_every.to_string()),
        ("train.scales", list(&t.scales)),
        ("train.train_critic", t.train_critic.to_string()),
        ("sampler.triplet_fraction", t.sampler.triplet_fraction.to_string()),
        ("sampler.schema_weights", list(&t.sampler.schema_weights)),
        ("embedder.input_size", c.embedder.input_size.to_string()),
        ("embedder.weights", source(&c.embedder.source)),
        (
            "extractor.kind",
            match c.extractor {
                ExtractorKind::Conv => "conv",
                ExtractorKind::Pixels => "pixels",
            }
            .into(),
        ),
        ("extractor.weights", source(&c.extractor_weights)),
        ("align.size", c.align_size.to_string()),
        ("align.template", template.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
        ("bench.runs", c.bench.runs.to_string()),
        ("bench.warmup", c.bench.warmup.to_string()),
    ]
}

pub fn render(c: &RunConfig) -> String {
    let mut out = String::from("# lightswap run configuration\n");
    for (k, v) in entries(c) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn array<const N: usize, T: FromStr + Copy + Default>(v: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated values, got {}", parts.len()));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(p)?;
    }
    Ok(out)
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn weight_source(v: &str) -> WeightSource {
    if v == "builtin" {
        WeightSource::Builtin
    } else {
        WeightSource::File(v.to_string())
    }
}

fn set(c: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let t = &mut c.train;
    let g = &mut t.generator;
    let w = &mut t.weights;
    let core = |e: CoreError| e.to_string();
    match key {
        "seed" => t.seed = scalar(v)?,
        "generator.resolution" => g.resolution = scalar(v)?,
        "generator.channels" => g.channels = scalar(v)?,
        "generator.embedding_dim" => g.embedding_dim = scalar(v)?,
        "generator.variant" => g.variant = v.parse().map_err(core)?,
        "generator.identity_blocks" => g.identity_blocks = array(v)?,
        "generator.attribute_blocks" => g.attribute_blocks = array(v)?,
        "generator.decoder_blocks" => g.decoder_blocks = array(v)?,
        "generator.inference_stats" => g.inference_stats = v.parse().map_err(core)?,
        "generator.leaky_slope" => g.leaky_slope = scalar(v)?,
        "generator.norm_eps" => g.norm_eps = scalar(v)?,
        "generator.stats_momentum" => g.stats_momentum = scalar(v)?,
        "critic.base_channels" => t.critic.base_channels = scalar(v)?,
        "critic.leaky_slope" => t.critic.leaky_slope = scalar(v)?,
        "loss.alpha_adv" => w.alpha_adv = array(v)?,
        "loss.beta_id" => w.beta_id = array(v)?,
        "loss.lambda_adv" => w.lambda_adv = scalar(v)?,
        "loss.lambda_id" => w.lambda_id = scalar(v)?,
        "loss.lambda_vgg" => w.lambda_vgg = scalar(v)?,
        "loss.lambda_rec" => w.lambda_rec = scalar(v)?,
        "adam_g.lr" => t.adam_g.lr = scalar(v)?,
        "adam_g.beta1" => t.adam_g.beta1 = scalar(v)?,
        "adam_g.beta2" => t.adam_g.beta2 = scalar(v)?,
        "adam_g.eps" => t.adam_g.eps = scalar(v)?,
        "adam_d.lr" => t.adam_d.lr = scalar(v)?,
        "adam_d.beta1" => t.adam_d.beta1 = scalar(v)?,
        "adam_d.beta2" => t.adam_d.beta2 = scalar(v)?,
        "adam_d.eps" => t.adam_d.eps = scalar(v)?,
        "train.batch_size" => t.batch_size = scalar(v)?,
        "train.total_steps" => t.total_steps = scalar(v)?,
        "train.checkpoint_every" => t.checkpoint_every = scalar(v)?,
        "train.sample_every" => t.sample_every = scalar(v)?,
        "train.scales" => {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!("expected 3 comma-separated booleans, got {}", parts.len()));
            }
            for (s, p) in t.scales.iter_mut().zip(parts) {
                *s = flag(p)?;
            }
        }
        "train.train_critic" => t.train_critic = flag(v)?,
        "sampler.triplet_fraction" => t.sampler.triplet_fraction = scalar(v)?,
        "sampler.schema_weights" => t.sampler.schema_weights = array(v)?,
        "embedder.input_size" => c.embedder.input_size = scalar(v)?,
        "embedder.weights" => c.embedder.source = weight_source(v),
        "extractor.kind" => {
            c.extractor = match v {
                "conv" => ExtractorKind::Conv,
                "pixels" => ExtractorKind::Pixels,
                _ => return Err(format!("unknown extractor `{v}`")),
            }
        }
        "extractor.weights" => c.extractor_weights = weight_source(v),
        "align.size" => c.align_size = scalar(v)?,
        "align.template" => {
            let flat: [f64; 10] = array(v)?;
            for i in 0..5 {
                c.template[i] = [flat[2 * i], flat[2 * i + 1]];
            }
        }
        "bench.runs" => c.bench.runs = scalar(v)?,
        "bench.warmup" => c.bench.warmup = scalar(v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Parses configuration text; errors carry 1-based line numbers.
pub fn parse(text: &str) -> lightswap_core::Result<RunConfig> {
    let mut pairs = Vec::new();
    let mut preset = Preset::Paper;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CoreError::Parse { line: i + 1, message };
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        if pairs.iter().any(|(_, key, _): &(usize, &str, &str)| *key == k) {
            return Err(err(format!("key `{k}` set twice")));
        }
        if k == "preset" {
            preset = match v {
                "paper" => Preset::Paper,
                "smoke" => Preset::Smoke,
                _ => return Err(err(format!("unknown preset `{v}`"))),
            };
        }
        pairs.push((i + 1, k, v));
    }
    let mut c = RunConfig::preset(preset);
    for (line, k, v) in pairs {
        if k != "preset" {
            set(&mut c, k, v).map_err(|message| CoreError::Parse { line, message })?;
        }
    }
    c.finalize()?;
    Ok(c)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    parse(&error::read_text(path)?).at(path)
}

pub fn save(path: &Path, c: &RunConfig) -> Result<()> {
    error::write(path, render(c).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_configs_parse_back_identically() {
        for p in [Preset::Paper, Preset::Smoke] {
            let mut c = RunConfig::preset(p);
            c.finalize().unwrap();
            let text = render(&c);
            assert_eq!(parse(&text).unwrap(), c);
        }
        let mut c = RunConfig::preset(Preset::Smoke);
        c.train.weights.lambda_vgg = 0.1 + 0.2;
        c.train.scales = [false, true, true];
        c.embedder.source = WeightSource::File("nets/face id.fswt".into());
        c.template[2] = [1.0 / 3.0, 60.0];
        c.finalize().unwrap();
        assert_eq!(parse(&render(&c)).unwrap(), c);
    }

    #[test]
    fn presets_and_overrides() {
        let c = parse("# tiny\ngenerator.channels = 8\npreset = smoke\n\nseed=9\n").unwrap();
        assert_eq!(c.train.generator.resolution, 64);
        assert_eq!(c.train.generator.channels, 8);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.critic.sizes, [16, 32, 64]);
        let d = parse("").unwrap();
        assert_eq!(d.train, {
            let mut t = TrainConfig::default();
            t.critic.sizes = [64, 128, 256];
            t
        });
        assert_eq!(d.train.weights, lightswap_core::losses::LossWeights::default());
        assert_eq!(d.bench, BenchConfig { runs: 100, warmup: 10 });
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("seed = 1\nnonsense\n", 2),
            ("seed = 1\nseed = 2\n", 2),
            ("\n\ngenerator.variant = tiny\n", 3),
            ("loss.alpha_adv = 1,2\n", 1),
            ("bogus.key = 3\n", 1),
            ("train.scales = 1,0,maybe\n", 1),
            ("preset = huge\n", 1),
        ] {
            assert!(matches!(parse(text), Err(CoreError::Parse { line: l, .. }) if l == line), "{text:?}");
        }
        assert!(matches!(parse("train.batch_size = 0\n"), Err(CoreError::Config(_))));
        assert!(matches!(parse("generator.resolution = 60\n"), Err(CoreError::Config(_))));
    }
}
