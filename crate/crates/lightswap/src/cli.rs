//! Command-line interface. Exit status: 0 on success, 1 on usage errors,
//! 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lightswap_core::align::align_face;
use lightswap_core::generator::{param_count, Variant};
use lightswap_core::synth::{render_face, FaceStyle, Shot};
use lightswap_core::triplet::EditOp;

use crate::config::{self, Preset, RunConfig};
use crate::data::{self, ImageCache};
use crate::error::{self, Error, Result};
use crate::forge::{self, ForgeOptions, SynthOptions};
use crate::train_loop::{self, Outputs};
use crate::{bench, models, ppm, swap};

#[derive(Debug, Parser)]
#[command(name = "lightswap", version, about = "Lightweight face swapping: training, inference and tooling")]
pub struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator on a triplet manifest.
    Train(TrainArgs),
    /// Put the identity of one face onto another.
    Swap(SwapArgs),
    /// Time the generator forward pass of one or more variants.
    Bench(BenchArgs),
    /// Build a triplet manifest from a labelled corpus.
    Forge(ForgeArgs),
    /// Print generator parameter counts and fp32 sizes.
    Paramcount(ParamcountArgs),
    /// Align a face to the canonical template using five landmarks.
    Align(AlignArgs),
    /// Render a synthetic corpus of faces with landmarks.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured total step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Start from the 64×64 smoke preset when no config is given.
    #[arg(long)]
    pub smoke: bool,
    /// Print a progress line every this many steps (0 = never).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    /// Generator weights. Without --config, `config.txt` next to the weights is used.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Defaults to the source path with extension `.lm`.
    #[arg(long)]
    pub source_landmarks: Option<PathBuf>,
    /// Defaults to the target path with extension `.lm`.
    #[arg(long)]
    pub target_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the two smaller outputs, suffixed with their size.
    #[arg(long)]
    pub all_scales: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Variants to time, comma separated.
    #[arg(long = "variant", value_delimiter = ',', default_value = "baseline,shallow,nofuse,hourglass,wide")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Summary CSV; per-run latencies go to the same name with `_runs` appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Corpus file: `path<TAB>identity<TAB>resolution` lines.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Edit operators to use, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
    /// Skip plain cross-identity pairs.
    #[arg(long)]
    pub no_plain: bool,
}

#[derive(Debug, Args)]
pub struct ParamcountArgs {
    /// A variant name or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Defaults to the image path with extension `.lm`.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop side; defaults to the configured `align.size`.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to fill.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    #[arg(long, default_value_t = 2)]
    pub shots: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Rotate and shift faces instead of rendering them aligned.
    #[arg(long)]
    pub posed: bool,
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli, fallback: Preset, sibling: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, sibling.filter(|p| p.is_file())) {
        (Some(p), _) => config::load(p)?,
        (None, Some(p)) => config::load(p)?,
        (None, None) => {
            let mut c = RunConfig::preset(fallback);
            c.finalize()?;
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn config_dir(cli: &Cli) -> PathBuf {
    cli.config.as_deref().map_or_else(|| PathBuf::from("."), data::base_dir)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Swap(a) => swap_cmd(cli, a),
        Command::Bench(a) => bench_cmd(cli, a),
        Command::Forge(a) => forge_cmd(cli, a),
        Command::Paramcount(a) => paramcount(cli, a),
        Command::Align(a) => align(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli, if a.smoke { Preset::Smoke } else { Preset::Paper }, None)?;
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    let base = config_dir(cli);
    let dataset = data::load_manifest(&a.manifest)?;
    let mut images = ImageCache::<f32>::new(&data::base_dir(&a.manifest), Some(cfg.train.generator.resolution));
    let embedder = models::embedder::<f32>(&cfg, &base)?;
    let extractor = models::extractor::<f32>(&cfg, &base)?;
    let out = Outputs::new(&a.out);
    let every = a.log_every;
    let trainer = train_loop::train_loop(
        &cfg,
        &dataset,
        &mut images,
        &embedder,
        extractor.as_ref(),
        &out,
        a.resume.as_deref(),
        &mut |step, r| {
            if every > 0 && step % every == 0 {
                println!("step {step:>7}  G {:>10.5}  D {:>8.5}  rec {:>9.6}  id {:>8.5}  vgg {:>8.5}", r.total_g, r.total_d, r.rec, r.id_total, r.vgg);
            }
        },
    )?;
    println!("trained {} steps; weights in {}", trainer.step_count(), out.generator().display());
    Ok(())
}

fn swap_cmd(cli: &Cli, a: &SwapArgs) -> Result<()> {
    let sibling = data::base_dir(&a.weights).join("config.txt");
    let cfg = load_config(cli, Preset::Paper, Some(&sibling))?;
    let base = cli.config.as_deref().map_or_else(|| data::base_dir(&a.weights), data::base_dir);
    let src_lm = data::load_landmarks(&a.source_landmarks.clone().unwrap_or_else(|| data::landmarks_path(&a.source)))?;
    let tgt_lm = data::load_landmarks(&a.target_landmarks.clone().unwrap_or_else(|| data::landmarks_path(&a.target)))?;
    let generator = models::load_generator::<f32>(&a.weights, &cfg)?;
    let embedder = models::embedder::<f32>(&cfg, &base)?;
    let src = ppm::read::<f32>(&a.source)?;
    let tgt = ppm::read::<f32>(&a.target)?;
    let template = cfg.template_for(cfg.train.generator.resolution);
    let y = swap::swap(
        &generator,
        &embedder,
        swap::Face { image: &src, landmarks: &src_lm },
        swap::Face { image: &tgt, landmarks: &tgt_lm },
        &template,
    )?;
    ppm::write(&a.out, &y.full)?;
    println!("wrote {}", a.out.display());
    if a.all_scales {
        for t in [&y.quarter, &y.half] {
            let side = t.shape()[3];
            let stem = a.out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
            let p = a.out.with_file_name(format!("{stem}_{side}.ppm"));
            ppm::write(&p, t)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|n| n.parse::<Variant>().map_err(|e| Error::usage(e.to_string()))).collect()
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = load_config(cli, Preset::Paper, None)?;
    let variants = parse_variants(&a.variants)?;
    let mut bc = cfg.bench.clone();
    if let Some(r) = a.runs {
        bc.runs = r.max(1);
    }
    if let Some(w) = a.warmup {
        bc.warmup = w;
    }
    let g = &cfg.train.generator;
    let embedder = models::embedder::<f32>(&cfg, &config_dir(cli))?;
    let s = g.resolution;
    let (src, _) = render_face::<f32>(&FaceStyle::for_identity(1), &Shot::aligned(s, 1), s)?;
    let (tgt, _) = render_face::<f32>(&FaceStyle::for_identity(2), &Shot::aligned(s, 2), s)?;
    let reports = bench::bench_variants(g, &variants, cfg.train.seed, &embedder, &src, &tgt, &bc)?;
    print!("{}", bench::render_table(&reports));
    if let Some(p) = &a.out {
        error::write(p, bench::summary_csv(&reports).as_bytes())?;
        let stem = p.file_stem().map_or_else(|| "bench".into(), |s| s.to_string_lossy().into_owned());
        let runs = p.with_file_name(format!("{stem}_runs.csv"));
        error::write(&runs, bench::runs_csv(&reports).as_bytes())?;
    }
    Ok(())
}

fn forge_cmd(cli: &Cli, a: &ForgeArgs) -> Result<()> {
    let mut opts = ForgeOptions { seed: cli.seed.unwrap_or(0), plain_pairs: !a.no_plain, ..ForgeOptions::default() };
    if cli.config.is_some() && cli.seed.is_none() {
        opts.seed = load_config(cli, Preset::Paper, None)?.train.seed;
    }
    if let Some(names) = &a.ops {
        let ops: Vec<EditOp> = names.iter().map(|n| n.parse().map_err(|e: lightswap_core::Error| Error::usage(e.to_string()))).collect::<Result<_>>()?;
        opts.identity_ops = ops.iter().copied().filter(|o| o.kind() == lightswap_core::triplet::EditKind::Identity).collect();
        opts.attribute_ops = ops.iter().copied().filter(|o| o.kind() == lightswap_core::triplet::EditKind::Attribute).collect();
    }
    let records = forge::forge_files(&a.corpus, &a.out, &opts)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn paramcount(cli: &Cli, a: &ParamcountArgs) -> Result<()> {
    let cfg = load_config(cli, Preset::Paper, None)?;
    let variants = if a.variant == "all" { Variant::ALL.to_vec() } else { parse_variants(std::slice::from_ref(&a.variant))? };
    let mut csv = String::from("variant,params,fp32_bytes\n");
    println!("{:<10} {:>12} {:>12} {:>10}", "variant", "params", "fp32 bytes", "MB");
    for v in variants {
        let c = param_count(&cfg.train.generator.clone().with_variant(v))?;
        println!("{:<10} {:>12} {:>12} {:>10.3}", v.name(), c.count, c.fp32_bytes, c.megabytes());
        csv.push_str(&format!("{},{},{}\n", v.name(), c.count, c.fp32_bytes));
    }
    if let Some(p) = &a.out {
        error::write(p, csv.as_bytes())?;
    }
    Ok(())
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let cfg = load_config(cli, Preset::Paper, None)?;
    let size = a.size.unwrap_or(cfg.align_size);
    let lm = data::load_landmarks(&a.landmarks.clone().unwrap_or_else(|| data::landmarks_path(&a.image)))?;
    let img = ppm::read::<f32>(&a.image)?;
    let out = align_face(&img, &lm, &cfg.template_for(size), size)?;
    ppm::write(&a.out, &out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let o = SynthOptions { identities: a.identities, shots: a.shots, size: a.size, seed: cli.seed.unwrap_or(0), posed: a.posed };
    if o.identities == 0 || o.shots == 0 {
        return Err(Error::usage("need at least one identity and one shot"));
    }
    let corpus = forge::synth_corpus(&a.out, &o)?;
    println!("wrote {} images; corpus {}", o.identities * o.shots, corpus.display());
    Ok(())
}
