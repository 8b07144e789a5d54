//! Triplet manifest construction from a corpus of labelled images.
//!
//! Per image: one identity edit and one attribute edit, giving the four
//! single-image triplets. Per identity with several photos: a pair triplet
//! for each consecutive pair. Per image, if there are other identities: one
//! plain pair with a random other person. Edited images are written next to
//! the manifest in `<stem>_images/`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightswap_core::synth::{render_face, FaceStyle, Shot};
use lightswap_core::triplet::{
    pair_triplet, render_corpus, render_manifest, single_image_triplets, EditKind, EditOp, EditOperator, Face, ImageRecord,
    Schema, TripletRecord,
};
use lightswap_core::Tensor;

use crate::data::{self, base_dir, resolve, ImageCache};
use crate::error::{self, Result};
use crate::ppm;

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeOptions {
    pub seed: u64,
    /// Identity edits to draw from.
    pub identity_ops: Vec<EditOp>,
    /// Attribute edits to draw from.
    pub attribute_ops: Vec<EditOp>,
    pub plain_pairs: bool,
}

impl Default for ForgeOptions {
    fn default() -> Self {
        ForgeOptions {
            seed: 0,
            identity_ops: vec![EditOp::Bulge, EditOp::Age],
            attribute_ops: vec![EditOp::Glasses, EditOp::Tint, EditOp::Flip],
            plain_pairs: true,
        }
    }
}

impl ForgeOptions {
    fn validate(&self) -> lightswap_core::Result<()> {
        for (ops, kind) in [(&self.identity_ops, EditKind::Identity), (&self.attribute_ops, EditKind::Attribute)] {
            if ops.is_empty() {
                return Err(lightswap_core::Error::Config(format!("no {kind:?} edit operators selected")));
            }
            if let Some(op) = ops.iter().find(|op| op.kind() != kind) {
                return Err(lightswap_core::Error::Schema(format!("`{op}` is not an {kind:?} edit")));
            }
        }
        Ok(())
    }
}

fn stem(path: &str) -> String {
    let p = Path::new(path).with_extension("");
    p.to_string_lossy().chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Path of a corpus image as written into the manifest.
fn manifest_path(corpus_base: &Path, manifest_base: &Path, p: &str) -> String {
    let same = |a: &Path, b: &Path| a.canonicalize().ok().zip(b.canonicalize().ok()).is_some_and(|(x, y)| x == y);
    if Path::new(p).is_absolute() || same(corpus_base, manifest_base) {
        p.to_string()
    } else {
        let full = resolve(corpus_base, p);
        full.canonicalize().unwrap_or(full).to_string_lossy().into_owned()
    }
}

/// Builds triplet records for `corpus` (paths relative to `corpus_base`),
/// writing edited images and returning the records in manifest order.
pub fn forge(corpus: &[ImageRecord], corpus_base: &Path, manifest: &Path, opts: &ForgeOptions) -> Result<Vec<TripletRecord>> {
    opts.validate()?;
    if corpus.is_empty() {
        return Err(crate::Error::usage("corpus is empty"));
    }
    let out_base = base_dir(manifest);
    let dir_name = format!("{}_images", manifest.file_stem().map_or("manifest".into(), |s| s.to_string_lossy()));
    let mut cache = ImageCache::<f32>::new(corpus_base, None);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    let rel = |p: &str| manifest_path(corpus_base, &out_base, p);
    let save = |name: String, img: &Tensor<f32>| -> Result<String> {
        let r = format!("{dir_name}/{name}.ppm");
        ppm::write(&out_base.join(&r), img)?;
        Ok(r)
    };

    for rec in corpus {
        let id_op = EditOperator::new(*opts.identity_ops.choose(&mut rng).expect("validated"));
        let attr_op = EditOperator::new(*opts.attribute_ops.choose(&mut rng).expect("validated"));
        let seed: u64 = rng.gen();
        let img = cache.get(&rec.path)?;
        let [e, f, _, _] = single_image_triplets(img, &id_op, &attr_op, seed)?;
        let s = stem(&rec.path);
        let id_path = save(format!("{s}__{}_{seed:016x}", id_op.op), &e.target)?;
        let attr_path = save(format!("{s}__{}_{seed:016x}", attr_op.op), &f.target)?;
        let orig = rel(&rec.path);
        let mk = |schema, source: &str, target: &str, gt: &str| TripletRecord {
            schema,
            source: source.into(),
            target: target.into(),
            gt: Some(gt.into()),
            identity: rec.identity.clone(),
            seed,
        };
        records.push(mk(Schema::SingleE, &orig, &id_path, &orig));
        records.push(mk(Schema::SingleF, &orig, &attr_path, &attr_path));
        records.push(mk(Schema::SingleG, &id_path, &orig, &id_path));
        records.push(mk(Schema::SingleH, &attr_path, &orig, &orig));
    }

    let mut identities: Vec<&str> = Vec::new();
    for r in corpus {
        if !identities.contains(&r.identity.as_str()) {
            identities.push(&r.identity);
        }
    }
    for id in &identities {
        let members: Vec<&ImageRecord> = corpus.iter().filter(|r| r.identity == *id).collect();
        if members.len() < 2 {
            continue;
        }
        // A cycle over the photos; two photos give a single pair.
        let pairs = if members.len() == 2 { 1 } else { members.len() };
        for j in 0..pairs {
            let (a, b) = (members[j], members[(j + 1) % members.len()]);
            let op = EditOperator::new(*opts.identity_ops.choose(&mut rng).expect("validated"));
            let seed: u64 = rng.gen();
            let ia = cache.get(&a.path)?.clone();
            let ib = cache.get(&b.path)?.clone();
            let t = pair_triplet(
                Face { key: &a.path, identity: id, image: &ia },
                Face { key: &b.path, identity: id, image: &ib },
                &op,
                seed,
            )?;
            let target = save(format!("{}__pair_{}_{seed:016x}", stem(&b.path), op.op), &t.target)?;
            records.push(TripletRecord {
                schema: Schema::PairIdEdit,
                source: rel(&a.path),
                target,
                gt: Some(rel(&b.path)),
                identity: id.to_string(),
                seed,
            });
        }
    }

    if opts.plain_pairs && identities.len() > 1 {
        for r in corpus {
            let others: Vec<&ImageRecord> = corpus.iter().filter(|o| o.identity != r.identity).collect();
            let t = others.choose(&mut rng).expect("another identity exists");
            records.push(TripletRecord {
                schema: Schema::PairPlain,
                source: rel(&r.path),
                target: rel(&t.path),
                gt: None,
                identity: r.identity.clone(),
                seed: rng.gen(),
            });
        }
    }
    Ok(records)
}

/// Reads a corpus file, forges, and writes the manifest.
pub fn forge_files(corpus: &Path, manifest: &Path, opts: &ForgeOptions) -> Result<Vec<TripletRecord>> {
    let images = data::load_corpus(corpus)?;
    let records = forge(&images, &base_dir(corpus), manifest, opts)?;
    let text = render_manifest(&records)?;
    error::write(manifest, text.as_bytes())?;
    Ok(records)
}

/// Layout of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub identities: usize,
    pub shots: usize,
    pub size: usize,
    pub seed: u64,
    /// Random rotation and placement instead of template-aligned faces.
    pub posed: bool,
}

/// Renders procedural faces with landmark files and a `corpus.tsv`.
/// Returns the corpus path.
pub fn synth_corpus(dir: &Path, o: &SynthOptions) -> Result<PathBuf> {
    let mut records = Vec::new();
    for i in 0..o.identities {
        let id = o.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let style = FaceStyle::for_identity(id);
        for j in 0..o.shots {
            let shot_seed = id.wrapping_mul(97).wrapping_add(j as u64);
            let shot = if o.posed { Shot::posed(o.size, shot_seed, 0.5) } else { Shot::aligned(o.size, shot_seed) };
            let (img, lm) = render_face::<f32>(&style, &shot, o.size)?;
            let name = format!("id{i:03}_{j:02}.ppm");
            let path = dir.join(&name);
            ppm::write(&path, &img)?;
            error::write(&data::landmarks_path(&path), data::render_landmarks(&lm).as_bytes())?;
            records.push(ImageRecord { path: name, identity: format!("id{i:03}"), resolution: o.size });
        }
    }
    let corpus = dir.join("corpus.tsv");
    error::write(&corpus, render_corpus(&records)?.as_bytes())?;
    Ok(corpus)
}
