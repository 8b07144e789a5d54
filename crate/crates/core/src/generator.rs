//! The two-encoder, one-decoder generator and its ablation variants.
//!
//! Levels are indexed by how often the map has been halved: level 0 is the
//! input resolution `S`, level 3 is `S/8`. Blocks live at levels 1..=3, the
//! three RGB heads at levels 2, 1 and 0.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    self, AdaInVars, BlockOptions, ConvVars, DecoderBlockVars, FcVars, IdentityBlockVars, ResidualVars, Stats,
};
use crate::error::{bail, Error, Result};
use crate::params::{Bound, Counter, Init, Initializer, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::stats::{RunningStats, RUNNING_MOMENTUM, STD_EPS};
use crate::tape::{BatchMoments, Tape, Var};
use crate::tensor::{AnyTensor, Tensor};

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    /// Channels double after every downsample and halve after every upsample.
    Wide,
    /// One block fewer per scale in the attribute encoder and the decoder.
    Shallow,
    /// No residual adds, no encoder skips, attention mask fixed to one.
    NoFuse,
    /// The identity branch keeps halving down to 1×1 before decoding.
    Hourglass,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Wide, Variant::Shallow, Variant::NoFuse, Variant::Hourglass];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Wide => "wide",
            Variant::Shallow => "shallow",
            Variant::NoFuse => "nofuse",
            Variant::Hourglass => "hourglass",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Normalization statistics used by AdaIN outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatsMode {
    Running,
    Batch,
}

impl FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "running" => Ok(StatsMode::Running),
            "batch" => Ok(StatsMode::Batch),
            _ => Err(Error::Config(format!("unknown stats mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Feature channels `N`.
    pub channels: usize,
    /// Identity embedding dimension `E`.
    pub embedding_dim: usize,
    /// Input and largest output resolution; a multiple of 8.
    pub resolution: usize,
    /// Blocks at levels 1, 2, 3 (`S/2`, `S/4`, `S/8`).
    pub identity_blocks: [usize; 3],
    pub attribute_blocks: [usize; 3],
    pub decoder_blocks: [usize; 3],
    pub variant: Variant,
    pub inference_stats: StatsMode,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub stats_momentum: f64,
}

impl Default for GeneratorConfig {
    /// `N = 64`, `E = 512`, 256×256, identity blocks {1,2,2}, attribute and
    /// decoder blocks {2,2,5}: 10.35 MB of fp32 parameters.
    fn default() -> Self {
        GeneratorConfig {
            channels: 64,
            embedding_dim: 512,
            resolution: 256,
            identity_blocks: [1, 2, 2],
            attribute_blocks: [2, 2, 5],
            decoder_blocks: [2, 2, 5],
            variant: Variant::Baseline,
            inference_stats: StatsMode::Running,
            leaky_slope: 0.2,
            norm_eps: STD_EPS,
            stats_momentum: RUNNING_MOMENTUM,
        }
    }
}

impl GeneratorConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            bail!(Config, "channels must be at least 8, got {}", self.channels);
        }
        if self.embedding_dim == 0 {
            bail!(Config, "embedding_dim must be positive");
        }
        if self.resolution < 8 || self.resolution % 8 != 0 {
            bail!(Config, "resolution must be a positive multiple of 8, got {}", self.resolution);
        }
        if self.variant == Variant::Hourglass && !(self.resolution / 8).is_power_of_two() {
            bail!(Config, "hourglass needs resolution/8 to be a power of two, got {}", self.resolution);
        }
        for (name, counts) in [
            ("identity", self.identity_blocks),
            ("attribute", self.attribute_blocks),
            ("decoder", self.decoder_blocks),
        ] {
            if counts.contains(&0) {
                bail!(Config, "{name} blocks per scale must be at least 1, got {counts:?}");
            }
        }
        if self.variant == Variant::Shallow
            && (self.attribute_blocks.contains(&1) || self.decoder_blocks.contains(&1))
        {
            bail!(Config, "shallow removes one block per scale and needs at least 2 everywhere");
        }
        if !(self.norm_eps > 0.0) {
            bail!(Config, "norm_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.stats_momentum) {
            bail!(Config, "stats_momentum must lie in [0, 1]");
        }
        Ok(())
    }

    /// Block counts after the variant's adjustment.
    pub fn effective_blocks(&self) -> ([usize; 3], [usize; 3], [usize; 3]) {
        let less = |c: [usize; 3]| c.map(|n| n - 1);
        match self.variant {
            Variant::Shallow => (self.identity_blocks, less(self.attribute_blocks), less(self.decoder_blocks)),
            _ => (self.identity_blocks, self.attribute_blocks, self.decoder_blocks),
        }
    }

    /// Channel width at a level.
    pub fn width(&self, level: usize) -> usize {
        match self.variant {
            Variant::Wide => self.channels << level,
            _ => self.channels,
        }
    }

    /// Extra stride-2 stages below `S/8` (hourglass only).
    pub fn bottleneck_depth(&self) -> usize {
        match self.variant {
            Variant::Hourglass => (self.resolution / 8).trailing_zeros() as usize,
            _ => 0,
        }
    }

    fn fuse(&self) -> bool {
        self.variant != Variant::NoFuse
    }

    /// Output side length at each of the three RGB heads, small to large.
    pub fn output_sizes(&self) -> [usize; 3] {
        [self.resolution / 4, self.resolution / 2, self.resolution]
    }
}

/// Exact parameter total of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub count: usize,
    pub fp32_bytes: usize,
}

impl ParamCount {
    pub fn from_count(count: usize) -> Self {
        ParamCount { count, fp32_bytes: 4 * count }
    }

    pub fn megabytes(&self) -> f64 {
        self.fp32_bytes as f64 / 1e6
    }
}

/// Counts the parameters of a configuration without allocating them.
pub fn param_count(config: &GeneratorConfig) -> Result<ParamCount> {
    config.validate()?;
    let mut counter = Counter::default();
    Layout::declare(config, &mut counter);
    Ok(ParamCount::from_count(counter.values))
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvIds {
    fn declare(sink: &mut dyn ParamSink, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = cin * k * k;
        ConvIds {
            weight: sink.declare(&format!("{name}.weight"), &[cout, cin, k, k], Init::FanIn(fan_in)),
            bias: sink.declare(&format!("{name}.bias"), &[cout], Init::FanIn(fan_in)),
            stride,
            padding: k / 2,
        }
    }

    fn bind(&self, b: &Bound) -> ConvVars {
        ConvVars { weight: b.var(self.weight), bias: b.var(self.bias), stride: self.stride, padding: self.padding }
    }
}

#[derive(Debug, Clone, Copy)]
struct FcIds {
    weight: ParamId,
    bias: ParamId,
}

impl FcIds {
    fn declare(sink: &mut dyn ParamSink, name: &str, din: usize, dout: usize, bias: f64) -> Self {
        FcIds {
            weight: sink.declare(&format!("{name}.weight"), &[dout, din], Init::FanIn(din)),
            bias: sink.declare(&format!("{name}.bias"), &[dout], Init::Constant(bias)),
        }
    }

    fn bind(&self, b: &Bound) -> FcVars {
        FcVars { weight: b.var(self.weight), bias: b.var(self.bias) }
    }
}

#[derive(Debug, Clone, Copy)]
struct IdentityIds {
    sigma: FcIds,
    mu: FcIds,
    conv1: ConvIds,
    conv2: ConvIds,
}

#[derive(Debug, Clone, Copy)]
struct ResidualIds {
    conv1: ConvIds,
    conv2: ConvIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderIds {
    attention: ConvIds,
    conv1: ConvIds,
    conv2: ConvIds,
}

/// Parameter handles of every layer, in declaration order.
#[derive(Debug, Clone)]
struct Layout {
    header: ConvIds,
    header_down_id: ConvIds,
    header_down_attr: ConvIds,
    /// Downsamples into levels 2 and 3.
    id_down: [ConvIds; 2],
    attr_down: [ConvIds; 2],
    id_blocks: [Vec<IdentityIds>; 3],
    attr_blocks: [Vec<ResidualIds>; 3],
    /// Hourglass stages below level 3, paired with the convs that undo them.
    bottleneck_down: Vec<ConvIds>,
    bottleneck_up: Vec<ConvIds>,
    dec_blocks: [Vec<DecoderIds>; 3],
    /// Channel-changing convs after upsampling into levels 2, 1, 0 (wide only).
    up: [Option<ConvIds>; 3],
    /// RGB heads at levels 2, 1, 0.
    rgb: [ConvIds; 3],
}

impl Layout {
    fn declare(cfg: &GeneratorConfig, sink: &mut dyn ParamSink) -> Layout {
        let w = |l| cfg.width(l);
        let e = cfg.embedding_dim;
        let (n_id, n_attr, n_dec) = cfg.effective_blocks();

        let header = ConvIds::declare(sink, "header.conv", 3, w(0), 3, 1);
        let header_down_id = ConvIds::declare(sink, "header.down_id", w(0), w(1), 3, 2);
        let header_down_attr = ConvIds::declare(sink, "header.down_attr", w(0), w(1), 3, 2);

        let mut id_down = Vec::new();
        let mut attr_down = Vec::new();
        let mut id_blocks: [Vec<IdentityIds>; 3] = Default::default();
        let mut attr_blocks: [Vec<ResidualIds>; 3] = Default::default();
        for level in 1..=3 {
            let c = w(level);
            if level > 1 {
                id_down.push(ConvIds::declare(sink, &format!("id.l{level}.down"), w(level - 1), c, 3, 2));
                attr_down.push(ConvIds::declare(sink, &format!("attr.l{level}.down"), w(level - 1), c, 3, 2));
            }
            for j in 0..n_id[level - 1] {
                let p = format!("id.l{level}.b{j}");
                id_blocks[level - 1].push(IdentityIds {
                    sigma: FcIds::declare(sink, &format!("{p}.adain.sigma"), e, c, 1.0),
                    mu: FcIds::declare(sink, &format!("{p}.adain.mu"), e, c, 0.0),
                    conv1: ConvIds::declare(sink, &format!("{p}.conv1"), c, c, 3, 1),
                    conv2: ConvIds::declare(sink, &format!("{p}.conv2"), c, c, 3, 1),
                });
            }
            for j in 0..n_attr[level - 1] {
                let p = format!("attr.l{level}.b{j}");
                attr_blocks[level - 1].push(ResidualIds {
                    conv1: ConvIds::declare(sink, &format!("{p}.conv1"), c, c, 3, 1),
                    conv2: ConvIds::declare(sink, &format!("{p}.conv2"), c, c, 3, 1),
                });
            }
        }

        let depth = cfg.bottleneck_depth();
        let c3 = w(3);
        let bottleneck_down =
            (0..depth).map(|k| ConvIds::declare(sink, &format!("hg.down{k}"), c3, c3, 3, 2)).collect();
        let bottleneck_up = (0..depth).map(|k| ConvIds::declare(sink, &format!("hg.up{k}"), c3, c3, 3, 1)).collect();

        let mut dec_blocks: [Vec<DecoderIds>; 3] = Default::default();
        let mut up = [None; 3];
        let mut rgb = Vec::new();
        for level in (0..=3).rev() {
            if level < 3 && cfg.variant == Variant::Wide {
                up[2 - level] = Some(ConvIds::declare(sink, &format!("dec.l{level}.up"), w(level + 1), w(level), 3, 1));
            }
            if level >= 1 {
                let c = w(level);
                for j in 0..n_dec[level - 1] {
                    let p = format!("dec.l{level}.b{j}");
                    dec_blocks[level - 1].push(DecoderIds {
                        attention: ConvIds::declare(sink, &format!("{p}.attention"), c, c, 3, 1),
                        conv1: ConvIds::declare(sink, &format!("{p}.conv1"), c, c, 3, 1),
                        conv2: ConvIds::declare(sink, &format!("{p}.conv2"), c, c, 3, 1),
                    });
                }
            }
            if level <= 2 {
                rgb.push(ConvIds::declare(sink, &format!("rgb.l{level}"), w(level), 3, 3, 1));
            }
        }

        Layout {
            header,
            header_down_id,
            header_down_attr,
            id_down: [id_down[0], id_down[1]],
            attr_down: [attr_down[0], attr_down[1]],
            id_blocks,
            attr_blocks,
            bottleneck_down,
            bottleneck_up,
            dec_blocks,
            up,
            rgb: [rgb[0], rgb[1], rgb[2]],
        }
    }

    fn adain_sites(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.id_blocks.iter().enumerate().flat_map(|(l, blocks)| blocks.iter().map(move |_| (l + 1, 0)))
    }
}

/// A batch of unit-norm identity embeddings, `[B, E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEmbedding<T> {
    rows: Tensor<T>,
}

impl<T: Scalar> FaceEmbedding<T> {
    /// Wraps `[B, E]` rows, each of which must already have unit norm.
    pub fn new(rows: Tensor<T>) -> Result<Self> {
        let [_, e] = *rows.shape() else {
            bail!(Dimension, "embedding must be [B, E], got {:?}", rows.shape());
        };
        for (r, row) in rows.data().chunks(e).enumerate() {
            let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > blocks::UNIT_NORM_TOL {
                bail!(Validation, "embedding row {r} has norm {n}, expected 1");
            }
        }
        Ok(FaceEmbedding { rows })
    }

    /// Scales each row of `[B, E]` to unit norm.
    pub fn normalized(rows: Tensor<T>) -> Result<Self> {
        let [_, e] = *rows.shape() else {
            bail!(Dimension, "embedding must be [B, E], got {:?}", rows.shape());
        };
        let mut rows = rows;
        for (r, row) in rows.data_mut().chunks_mut(e).enumerate() {
            let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !(n > 0.0) {
                bail!(Validation, "embedding row {r} has zero norm");
            }
            for v in row.iter_mut() {
                *v = T::from_f64(v.as_f64() / n);
            }
        }
        Self::new(rows)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.rows
    }

    pub fn batch(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> Self {
        FaceEmbedding { rows: self.rows.index0(i) }
    }

    /// The same rows tiled `times` times along the batch axis.
    pub fn repeat(&self, times: usize) -> Self {
        let parts: Vec<&Tensor<T>> = (0..times).map(|_| &self.rows).collect();
        FaceEmbedding { rows: Tensor::stack0(&parts).expect("same shapes") }
    }

    /// Cosine similarity of row `i` here and row `j` of `other`.
    pub fn cosine(&self, i: usize, other: &Self, j: usize) -> f64 {
        let e = self.dim();
        let a = &self.rows.data()[i * e..(i + 1) * e];
        let b = &other.rows.data()[j * e..(j + 1) * e];
        a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
    }
}

/// The three generated images, small to large, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput<T> {
    pub quarter: Tensor<T>,
    pub half: Tensor<T>,
    pub full: Tensor<T>,
}

impl<T: Scalar> MultiScaleOutput<T> {
    pub fn scales(&self) -> [&Tensor<T>; 3] {
        [&self.quarter, &self.half, &self.full]
    }
}

/// Which path a traced feature map belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Header,
    Identity,
    Attribute,
    Decoder,
}

/// Kind of a traced step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Conv,
    Downsample,
    Block,
    Upsample,
    Skip,
    Rgb,
}

/// One step of a forward pass and the shape it produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub branch: Branch,
    pub stage: Stage,
    pub shape: [usize; 4],
}

/// Tape handles produced by [`Generator::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// RGB heads, small to large.
    pub outputs: [Var; 3],
    /// Batch statistics seen by each AdaIN site (batch mode only).
    pub moments: Vec<BatchMoments>,
    pub trace: Vec<TraceEntry>,
}

/// The two branch inputs produced by the encoder header.
#[derive(Debug, Clone, Copy)]
pub struct Header {
    /// Full-resolution lifted map, reused as the finest decoder skip.
    pub lifted: Var,
    pub identity: Var,
    pub attribute: Var,
}

/// Parameters, running statistics and layout of one generator.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    running: Vec<RunningStats>,
    layout: Layout,
}

const STATS_PREFIX: &str = "stats";

struct Ctx<'a> {
    bound: &'a Bound,
    mode: StatsMode,
    site: usize,
    moments: Vec<BatchMoments>,
    trace: Vec<TraceEntry>,
}

impl<T: Scalar> Generator<T> {
    /// Builds a variant with freshly initialized weights.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::<T>::new(&mut rng);
        let layout = Layout::declare(&config, &mut init);
        let params = init.store;
        let running = layout.adain_sites().map(|(level, _)| RunningStats::new(config.width(level))).collect();
        Ok(Generator { config, params, running, layout })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::from_count(self.params.count())
    }

    /// Folds the batch statistics of a training forward into the running estimates.
    pub fn commit_moments(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if moments.len() != self.running.len() {
            bail!(Usage, "expected {} moment sets, got {}", self.running.len(), moments.len());
        }
        for (r, m) in self.running.iter_mut().zip(moments) {
            r.update(&m.mean, &m.var, self.config.stats_momentum);
        }
        Ok(())
    }

    fn check_image(&self, tape: &Tape<T>, image: Var) -> Result<()> {
        let s = self.config.resolution;
        match *tape.shape(image) {
            [_, 3, h, w] if h == s && w == s => Ok(()),
            ref shape => bail!(Dimension, "generator expects [B, 3, {s}, {s}], got {shape:?}"),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_>, x: Var, ids: &ConvIds, branch: Branch, stage: Stage) -> Result<Var> {
        let y = if ids.stride == 2 {
            downsample(tape, x, &ids.bind(ctx.bound))?
        } else {
            blocks::conv(tape, x, &ids.bind(ctx.bound))?
        };
        trace(tape, ctx, y, branch, stage);
        Ok(y)
    }

    /// Lifts RGB to `N` channels at full resolution and produces the two
    /// half-resolution branch inputs.
    pub fn encoder_header(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Header> {
        let mut ctx = Ctx { bound, mode: StatsMode::Batch, site: 0, moments: Vec::new(), trace: Vec::new() };
        self.header(tape, &mut ctx, image)
    }

    fn header(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_>, image: Var) -> Result<Header> {
        self.check_image(tape, image)?;
        let slope = self.config.leaky_slope;
        let h = self.conv(tape, ctx, image, &self.layout.header, Branch::Header, Stage::Conv)?;
        let lifted = tape.leaky_relu(h, slope)?;
        let d = self.conv(tape, ctx, lifted, &self.layout.header_down_id, Branch::Identity, Stage::Downsample)?;
        let identity = tape.leaky_relu(d, slope)?;
        let d = self.conv(tape, ctx, lifted, &self.layout.header_down_attr, Branch::Attribute, Stage::Downsample)?;
        let attribute = tape.leaky_relu(d, slope)?;
        Ok(Header { lifted, identity, attribute })
    }

    fn options(&self) -> BlockOptions {
        BlockOptions { slope: self.config.leaky_slope, eps: self.config.norm_eps, fuse: self.config.fuse() }
    }

    /// Records the full graph. `mode` selects AdaIN statistics; training uses
    /// [`StatsMode::Batch`] and later calls [`Generator::commit_moments`].
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, target: Var, f_id: Var, mode: StatsMode) -> Result<Forward> {
        let e = self.config.embedding_dim;
        match *tape.shape(f_id) {
            [b, d] if d == e && b == tape.shape(target)[0] => {}
            ref s => bail!(Dimension, "embedding shape {s:?} does not match batch {} × {e}", tape.shape(target)[0]),
        }
        let mut ctx = Ctx { bound, mode, site: 0, moments: Vec::new(), trace: Vec::new() };
        let opt = self.options();
        let slope = self.config.leaky_slope;
        let header = self.header(tape, &mut ctx, target)?;

        let mut id_maps = [header.identity; 3];
        let mut attr_maps: [Vec<Var>; 3] = Default::default();
        let (mut x_id, mut x_attr) = (header.identity, header.attribute);
        for level in 1..=3 {
            if level > 1 {
                let d = self.conv(tape, &mut ctx, x_id, &self.layout.id_down[level - 2], Branch::Identity, Stage::Downsample)?;
                x_id = tape.leaky_relu(d, slope)?;
                let d =
                    self.conv(tape, &mut ctx, x_attr, &self.layout.attr_down[level - 2], Branch::Attribute, Stage::Downsample)?;
                x_attr = tape.leaky_relu(d, slope)?;
            }
            for ids in &self.layout.id_blocks[level - 1] {
                x_id = self.identity_block(tape, &mut ctx, x_id, f_id, ids)?;
            }
            id_maps[level - 1] = x_id;
            for ids in &self.layout.attr_blocks[level - 1] {
                let p = ResidualVars { conv1: ids.conv1.bind(bound), conv2: ids.conv2.bind(bound) };
                x_attr = blocks::attribute_block(tape, x_attr, &p, opt)?;
                trace(tape, &mut ctx, x_attr, Branch::Attribute, Stage::Block);
                attr_maps[level - 1].push(x_attr);
            }
        }

        let mut x = self.bottleneck(tape, &mut ctx, x_id)?;
        let mut outputs = Vec::with_capacity(3);
        for level in (0..=3).rev() {
            if level < 3 {
                x = tape.up2(x)?;
                trace(tape, &mut ctx, x, Branch::Decoder, Stage::Upsample);
                if let Some(ids) = &self.layout.up[2 - level] {
                    x = self.conv(tape, &mut ctx, x, ids, Branch::Decoder, Stage::Conv)?;
                    x = tape.leaky_relu(x, slope)?;
                }
                if opt.fuse {
                    let skip = if level == 0 { header.lifted } else { id_maps[level - 1] };
                    x = tape.add(x, skip)?;
                    trace(tape, &mut ctx, x, Branch::Decoder, Stage::Skip);
                }
            }
            if level >= 1 {
                let feats = &attr_maps[level - 1];
                for (j, ids) in self.layout.dec_blocks[level - 1].iter().enumerate() {
                    let x_attr = feats[feats.len().saturating_sub(j + 1)];
                    let p = DecoderBlockVars {
                        attention: ids.attention.bind(bound),
                        conv1: ids.conv1.bind(bound),
                        conv2: ids.conv2.bind(bound),
                    };
                    x = blocks::decoder_block(tape, x, x_attr, &p, opt)?;
                    trace(tape, &mut ctx, x, Branch::Decoder, Stage::Block);
                }
            }
            if level <= 2 {
                let rgb = blocks::to_rgb(tape, x, &self.layout.rgb[2 - level].bind(bound))?;
                trace(tape, &mut ctx, rgb, Branch::Decoder, Stage::Rgb);
                outputs.push(rgb);
            }
        }
        Ok(Forward { outputs: [outputs[0], outputs[1], outputs[2]], moments: ctx.moments, trace: ctx.trace })
    }

    fn identity_block(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_>, x: Var, f_id: Var, ids: &IdentityIds) -> Result<Var> {
        let b = ctx.bound;
        let p = IdentityBlockVars {
            adain: AdaInVars { sigma: ids.sigma.bind(b), mu: ids.mu.bind(b) },
            conv1: ids.conv1.bind(b),
            conv2: ids.conv2.bind(b),
        };
        let stats = match ctx.mode {
            StatsMode::Batch => Stats::Batch,
            StatsMode::Running => Stats::Running(&self.running[ctx.site]),
        };
        let (y, observed) = blocks::identity_block(tape, x, f_id, &p, stats, self.options())?;
        ctx.moments.extend(observed);
        ctx.site += 1;
        trace(tape, ctx, y, Branch::Identity, Stage::Block);
        Ok(y)
    }

    /// Hourglass: halve to 1×1, then upsample back to `S/8` with skips.
    fn bottleneck(&self, tape: &mut Tape<T>, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let mut stack = Vec::new();
        let mut x = x;
        for ids in &self.layout.bottleneck_down {
            stack.push(x);
            let d = self.conv(tape, ctx, x, ids, Branch::Identity, Stage::Downsample)?;
            x = tape.leaky_relu(d, slope)?;
        }
        for ids in self.layout.bottleneck_up.iter().rev() {
            x = tape.up2(x)?;
            trace(tape, ctx, x, Branch::Decoder, Stage::Upsample);
            let c = self.conv(tape, ctx, x, ids, Branch::Decoder, Stage::Conv)?;
            x = tape.leaky_relu(c, slope)?;
            let skip = stack.pop().expect("balanced bottleneck");
            if self.config.fuse() {
                x = tape.add(x, skip)?;
                trace(tape, ctx, x, Branch::Decoder, Stage::Skip);
            }
        }
        Ok(x)
    }

    /// Inference on constant inputs. Statistics follow `config.inference_stats`.
    pub fn infer(&self, target: &Tensor<T>, f_id: &FaceEmbedding<T>) -> Result<MultiScaleOutput<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(target.clone());
        let f = tape.constant(f_id.tensor().clone());
        let fwd = self.forward(&mut tape, &bound, x, f, self.config.inference_stats)?;
        let [q, h, f] = fwd.outputs.map(|v| tape.value(v).clone());
        Ok(MultiScaleOutput { quarter: q, half: h, full: f })
    }

    /// Parameters followed by the running statistics (as `f64`).
    pub fn export(&self) -> Vec<(String, AnyTensor)> {
        let mut out: Vec<(String, AnyTensor)> =
            self.params.iter().map(|(n, t)| (String::from(n), AnyTensor::from(t.clone()))).collect();
        for (i, r) in self.running.iter().enumerate() {
            let c = r.channels();
            out.push((format!("{STATS_PREFIX}.{i}.mean"), AnyTensor::F64(Tensor::new(&[c], r.mean.clone()).expect("c > 0"))));
            out.push((format!("{STATS_PREFIX}.{i}.var"), AnyTensor::F64(Tensor::new(&[c], r.var.clone()).expect("c > 0"))));
        }
        out
    }

    /// Replaces every parameter and statistic. The input must name each
    /// expected tensor exactly once with the expected shape and type.
    pub fn import(&mut self, tensors: Vec<(String, AnyTensor)>) -> Result<()> {
        let expected = self.export();
        let mut seen = alloc::vec![false; expected.len()];
        let mut staged = self.clone();
        for (name, t) in tensors {
            let Some(i) = expected.iter().position(|(n, _)| *n == name) else {
                bail!(Load, "unknown tensor `{name}`");
            };
            if seen[i] {
                bail!(Load, "duplicate tensor `{name}`");
            }
            seen[i] = true;
            let want = &expected[i].1;
            if t.shape() != want.shape() {
                bail!(Load, "tensor `{name}` has shape {:?}, expected {:?}", t.shape(), want.shape());
            }
            if t.dtype() != want.dtype() {
                bail!(Load, "tensor `{name}` has type {:?}, expected {:?}", t.dtype(), want.dtype());
            }
            if let Some(rest) = name.strip_prefix(STATS_PREFIX).and_then(|r| r.strip_prefix('.')) {
                let (site, field) = rest.split_once('.').expect("exported stat name");
                let site: usize = site.parse().expect("exported stat index");
                let AnyTensor::F64(v) = t else { unreachable!("dtype checked") };
                match field {
                    "mean" => staged.running[site].mean = v.into_data(),
                    _ => staged.running[site].var = v.into_data(),
                }
            } else {
                let typed = t.into_typed::<T>().expect("dtype checked");
                staged.params.assign(&name, typed)?;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            bail!(Load, "missing tensor `{}`", expected[i].0);
        }
        *self = staged;
        Ok(())
    }
}

/// Stride-2 conv that insists on even extents.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvVars) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail!(Config, "downsample needs even extents, got {h}×{w}");
    }
    blocks::conv(tape, x, p)
}

fn trace<T: Scalar>(tape: &Tape<T>, ctx: &mut Ctx<'_>, v: Var, branch: Branch, stage: Stage) {
    let s = tape.shape(v);
    ctx.trace.push(TraceEntry { branch, stage, shape: [s[0], s[1], s[2], s[3]] });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;

    fn small(variant: Variant) -> GeneratorConfig {
        GeneratorConfig {
            channels: 8,
            embedding_dim: 16,
            resolution: 32,
            identity_blocks: [1, 1, 2],
            attribute_blocks: [2, 2, 2],
            decoder_blocks: [2, 2, 3],
            variant,
            ..GeneratorConfig::default()
        }
    }

    fn embedding(b: usize, e: usize, seed: u64) -> FaceEmbedding<f64> {
        FaceEmbedding::normalized(rand_tensor(&[b, e], seed)).unwrap()
    }

    fn run(g: &Generator<f64>, x: &Tensor<f64>, f: &FaceEmbedding<f64>, mode: StatsMode) -> (Tape<f64>, Bound, Forward) {
        let mut t = Tape::new();
        let b = g.params().bind(&mut t, true);
        let xv = t.constant(x.clone());
        let fv = t.constant(f.tensor().clone());
        let fwd = g.forward(&mut t, &b, xv, fv, mode).unwrap();
        (t, b, fwd)
    }

    #[test]
    fn default_sizes_and_variant_ordering() {
        let mb = |v| param_count(&GeneratorConfig::default().with_variant(v)).unwrap();
        let base = mb(Variant::Baseline);
        assert!((9.2..=11.2).contains(&base.megabytes()), "{base:?}");
        assert_eq!(base.fp32_bytes, 4 * base.count);
        let (shallow, nofuse, hg, wide) = (mb(Variant::Shallow), mb(Variant::NoFuse), mb(Variant::Hourglass), mb(Variant::Wide));
        assert!(shallow.count < base.count && shallow.megabytes() < 10.2);
        assert_eq!(nofuse, base);
        assert!(base.count < hg.count && hg.count < wide.count);
        assert!(wide.count as f64 > 30.0 * base.count as f64);
    }

    #[test]
    fn counter_agrees_with_allocation() {
        for v in Variant::ALL {
            let c = small(v);
            assert_eq!(Generator::<f32>::new(c.clone(), 0).unwrap().param_count(), param_count(&c).unwrap(), "{v}");
        }
    }

    #[test]
    fn outputs_and_trace_follow_the_design() {
        let g = Generator::<f64>::new(small(Variant::Baseline), 3).unwrap();
        let x = rand_tensor(&[2, 3, 32, 32], 1);
        let (t, _, fwd) = run(&g, &x, &embedding(2, 16, 2), StatsMode::Batch);
        let shapes: Vec<&[usize]> = fwd.outputs.iter().map(|&v| t.shape(v)).collect();
        assert_eq!(shapes, [&[2, 3, 8, 8][..], &[2, 3, 16, 16], &[2, 3, 32, 32]]);
        for &o in &fwd.outputs {
            assert!(t.value(o).data().iter().all(|v| v.abs() <= 1.0));
        }
        for branch in [Branch::Identity, Branch::Attribute] {
            let downs: Vec<_> = fwd.trace.iter().filter(|e| e.branch == branch && e.stage == Stage::Downsample).collect();
            assert_eq!(downs.len(), 3, "{branch:?}");
            assert_eq!(downs.iter().map(|e| e.shape[2]).collect::<Vec<_>>(), [16, 8, 4]);
        }
        assert!(fwd.trace.iter().filter(|e| e.stage != Stage::Rgb).all(|e| e.shape[1] == 8));
        assert_eq!(fwd.trace.iter().filter(|e| e.stage == Stage::Upsample).count(), 3);
        assert_eq!(fwd.moments.len(), 4);
    }

    #[test]
    fn wide_doubles_and_hourglass_reaches_one_pixel() {
        let x = rand_tensor(&[2, 3, 32, 32], 4);
        let f = embedding(2, 16, 5);
        let wide = Generator::<f64>::new(small(Variant::Wide), 1).unwrap();
        let (_, _, fwd) = run(&wide, &x, &f, StatsMode::Batch);
        for e in fwd.trace.iter().filter(|e| e.stage == Stage::Block) {
            let level = (32 / e.shape[2]).trailing_zeros() as usize;
            assert_eq!(e.shape[1], 8 << level);
        }
        let hg = Generator::<f64>::new(small(Variant::Hourglass), 1).unwrap();
        let (t, _, fwd) = run(&hg, &x, &f, StatsMode::Batch);
        assert_eq!(fwd.trace.iter().map(|e| e.shape[2]).min(), Some(1));
        assert_eq!(t.shape(fwd.outputs[2]), &[2, 3, 32, 32]);
    }

    #[test]
    fn nofuse_never_reads_the_attribute_branch() {
        let g = Generator::<f64>::new(small(Variant::NoFuse), 2).unwrap();
        let (mut t, b, fwd) = run(&g, &rand_tensor(&[2, 3, 32, 32], 6), &embedding(2, 16, 7), StatsMode::Batch);
        let mut l = t.mean(fwd.outputs[0]).unwrap();
        for &o in &fwd.outputs[1..] {
            let m = t.mean(o).unwrap();
            l = t.add(l, m).unwrap();
        }
        t.backward(l).unwrap();
        for (i, (name, _)) in g.params().iter().enumerate() {
            let reached = t.grad(b.vars()[i]).is_some_and(|g| g.iter().any(|&v| v != 0.0));
            let dead = name.starts_with("attr.") || name.contains(".attention.") || name == "header.down_attr.weight" || name == "header.down_attr.bias";
            assert_eq!(reached, !dead, "{name}");
        }
    }

    #[test]
    fn running_mode_uses_committed_statistics() {
        let mut g = Generator::<f64>::new(small(Variant::Baseline), 8).unwrap();
        let x = rand_tensor(&[2, 3, 32, 32], 9);
        let f = embedding(2, 16, 10);
        let (t, _, fwd) = run(&g, &x, &f, StatsMode::Batch);
        let batch_out = t.value(fwd.outputs[2]).clone();
        let before = g.infer(&x, &f).unwrap();
        // Momentum 1 makes the running estimate equal to the last batch.
        g.config.stats_momentum = 1.0;
        g.commit_moments(&fwd.moments).unwrap();
        let after = g.infer(&x, &f).unwrap();
        assert!(before.full.max_abs_diff(&batch_out) > 1e-3);
        assert!(after.full.max_abs_diff(&batch_out) < 1e-12);
        assert!(g.commit_moments(&fwd.moments[1..]).is_err());
    }

    #[test]
    fn seeds_determine_weights() {
        let a = Generator::<f32>::new(small(Variant::Baseline), 5).unwrap();
        let b = Generator::<f32>::new(small(Variant::Baseline), 5).unwrap();
        let c = Generator::<f32>::new(small(Variant::Baseline), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let x = rand_tensor::<f32>(&[1, 3, 32, 32], 1);
        let f = FaceEmbedding::normalized(rand_tensor(&[1, 16], 2)).unwrap();
        assert_eq!(a.infer(&x, &f).unwrap(), b.infer(&x, &f).unwrap());
    }

    #[test]
    fn inputs_are_validated() {
        let g = Generator::<f64>::new(small(Variant::Baseline), 1).unwrap();
        let f = embedding(1, 16, 1);
        assert!(matches!(g.infer(&rand_tensor(&[1, 3, 16, 16], 1), &f), Err(Error::Dimension(_))));
        assert!(matches!(g.infer(&rand_tensor(&[2, 3, 32, 32], 1), &f), Err(Error::Dimension(_))));
        assert!(matches!(g.infer(&rand_tensor(&[1, 3, 32, 32], 1), &embedding(1, 8, 1)), Err(Error::Dimension(_))));
        assert!(matches!(FaceEmbedding::new(Tensor::<f64>::full(&[1, 4], 1.0)), Err(Error::Validation(_))));
        assert!(matches!(FaceEmbedding::normalized(Tensor::<f64>::zeros(&[1, 4])), Err(Error::Validation(_))));
        for bad in [
            GeneratorConfig { resolution: 30, ..small(Variant::Baseline) },
            GeneratorConfig { channels: 4, ..small(Variant::Baseline) },
            GeneratorConfig { decoder_blocks: [1, 2, 2], ..small(Variant::Shallow) },
            GeneratorConfig { resolution: 48, ..small(Variant::Hourglass) },
        ] {
            assert!(matches!(Generator::<f32>::new(bad, 0), Err(Error::Config(_))));
        }
        assert!(matches!("tiny".parse::<Variant>(), Err(Error::Config(_))));
        assert_eq!("HourGlass".parse::<Variant>().unwrap(), Variant::Hourglass);
    }

    #[test]
    fn downsample_rejects_odd_extents() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 5, 4]));
        let p = ConvVars { weight: t.constant(Tensor::zeros(&[1, 1, 3, 3])), bias: t.constant(Tensor::zeros(&[1])), stride: 2, padding: 1 };
        assert!(matches!(downsample(&mut t, x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn export_import_round_trip_and_mismatch() {
        let mut a = Generator::<f32>::new(small(Variant::Baseline), 1).unwrap();
        a.running[0].mean[0] = 0.25;
        let mut b = Generator::<f32>::new(small(Variant::Baseline), 2).unwrap();
        b.import(a.export()).unwrap();
        assert_eq!(a.export(), b.export());

        let wide = Generator::<f32>::new(small(Variant::Wide), 1).unwrap();
        let before = b.export();
        let err = b.import(wide.export()).unwrap_err();
        assert!(matches!(&err, Error::Load(m) if m.contains("header.down_id.weight")), "{err:?}");
        assert_eq!(b.export(), before, "a failed import must not change the model");

        let mut partial = a.export();
        partial.pop();
        assert!(matches!(b.import(partial), Err(Error::Load(m)) if m.contains("missing")));
    }

    #[test]
    fn embedding_helpers() {
        let f = embedding(2, 8, 3);
        assert!((f.cosine(0, &f, 0) - 1.0).abs() < 1e-12);
        let r = f.row(1).repeat(3);
        assert_eq!(r.batch(), 3);
        assert!((r.cosine(2, &f, 1) - 1.0).abs() < 1e-12);
    }
}
