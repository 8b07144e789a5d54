//! Supervised triplets: edit operators, the ground-truth rules, batch
//! sampling, and the manifest and corpus text formats.
//!
//! An identity edit changes who the person looks like, so the unedited
//! image on the other side is the answer; an attribute edit keeps identity,
//! so the edited side itself is the answer.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::TEMPLATE_112;
use crate::error::{bail, Error, Result};
use crate::image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditKind {
    Identity,
    Attribute,
}

/// Builtin deterministic edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    /// Leaves the image unchanged; counts as an identity edit.
    None,
    /// Radial magnification of the lower face.
    Bulge,
    /// Desaturation with a contrast shift.
    Age,
    /// Dark lenses and a frame over the eyes.
    Glasses,
    /// Color cast outside the face oval.
    Tint,
    Flip,
}

impl EditOp {
    pub const ALL: [EditOp; 6] = [EditOp::None, EditOp::Bulge, EditOp::Age, EditOp::Glasses, EditOp::Tint, EditOp::Flip];

    pub fn name(self) -> &'static str {
        match self {
            EditOp::None => "none",
            EditOp::Bulge => "bulge",
            EditOp::Age => "age",
            EditOp::Glasses => "glasses",
            EditOp::Tint => "tint",
            EditOp::Flip => "flip",
        }
    }

    pub fn kind(self) -> EditKind {
        match self {
            EditOp::None | EditOp::Bulge | EditOp::Age => EditKind::Identity,
            EditOp::Glasses | EditOp::Tint | EditOp::Flip => EditKind::Attribute,
        }
    }

    pub fn of_kind(kind: EditKind) -> impl Iterator<Item = EditOp> {
        EditOp::ALL.into_iter().filter(move |op| op.kind() == kind)
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chubby" => return Ok(EditOp::Bulge),
            "aging" => return Ok(EditOp::Age),
            _ => {}
        }
        EditOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown edit operator `{s}`")))
    }
}

/// An operator with its strength. Magnitude 0 leaves the image unchanged for
/// every operator except flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditOperator {
    pub op: EditOp,
    pub magnitude: f64,
}

impl EditOperator {
    pub fn new(op: EditOp) -> Self {
        EditOperator { op, magnitude: 1.0 }
    }

    pub fn with_magnitude(op: EditOp, magnitude: f64) -> Self {
        EditOperator { op, magnitude }
    }

    pub fn kind(&self) -> EditKind {
        self.op.kind()
    }

    /// Applies the edit to `[B, 3, H, W]` images. Pure in `(image, seed)`;
    /// output keeps the resolution and stays within `[-1, 1]`.
    pub fn apply<T: Scalar>(&self, img: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        let (b, c, h, w) = img.dims4()?;
        if c != 3 {
            bail!(Dimension, "edits expect RGB images, got {c} channels");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self.op as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let m = self.magnitude;
        if m == 0.0 && self.op != EditOp::Flip {
            return Ok(img.clone());
        }
        let kx = w as f64 / 112.0;
        let ky = h as f64 / 112.0;
        let out = match self.op {
            EditOp::None => img.clone(),
            EditOp::Flip => image::hflip(img)?,
            EditOp::Bulge => {
                let strength = m * rng.gen_range(0.25..0.45);
                let cx = (56.0 + rng.gen_range(-2.0..2.0)) * kx;
                let cy = (80.0 + rng.gen_range(-2.0..2.0)) * ky;
                let radius = 42.0 * kx.min(ky);
                let mut parts = Vec::with_capacity(b);
                for i in 0..b {
                    let one = img.index0(i);
                    parts.push(image::warp(&one, h, w, -1.0, |x, y| {
                        let (dx, dy) = (x - cx, y - cy);
                        let r = (dx * dx + dy * dy).sqrt() / radius;
                        if r >= 1.0 {
                            (x, y)
                        } else {
                            // Pull samples toward the center: magnification.
                            let s = 1.0 - strength * (1.0 - r * r);
                            (cx + dx * s, cy + dy * s)
                        }
                    })?);
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                Tensor::stack0(&refs)?
            }
            EditOp::Age => {
                let desat = (m * rng.gen_range(0.4..0.7)).min(1.0);
                let contrast = 1.0 + m * rng.gen_range(0.1..0.3);
                let mut out = img.clone();
                let plane = h * w;
                let d = out.data_mut();
                for bi in 0..b {
                    let base = bi * 3 * plane;
                    for p in 0..plane {
                        let rgb = [0, 1, 2].map(|ch| d[base + ch * plane + p].as_f64());
                        let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                        for ch in 0..3 {
                            let v = rgb[ch] * (1.0 - desat) + gray * desat;
                            d[base + ch * plane + p] = T::from_f64((v * contrast - 0.05 * m).clamp(-1.0, 1.0));
                        }
                    }
                }
                out
            }
            EditOp::Glasses => {
                let lens = rng.gen_range(7.0..10.0);
                let shade = rng.gen_range(-0.9..-0.5);
                let frame: [f64; 3] = [rng.gen_range(-1.0..0.0), rng.gen_range(-1.0..0.0), rng.gen_range(-1.0..0.0)];
                let eyes = [TEMPLATE_112[0], TEMPLATE_112[1]];
                let mut out = img.clone();
                let plane = h * w;
                let d = out.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (x as f64 / kx, y as f64 / ky);
                        let mut alpha_lens: f64 = 0.0;
                        let mut alpha_frame: f64 = 0.0;
                        for e in eyes {
                            let r = ((u - e[0]).powi(2) + (v - e[1]).powi(2)).sqrt();
                            alpha_lens = alpha_lens.max(((lens - r) / 1.0 + 0.5).clamp(0.0, 1.0));
                            alpha_frame = alpha_frame.max((1.0 - ((r - lens).abs() - 0.8)).clamp(0.0, 1.0));
                        }
                        let bridge = (v - eyes[0][1]).abs() < 1.2 && u > eyes[0][0] + lens && u < eyes[1][0] - lens;
                        if bridge {
                            alpha_frame = 1.0;
                        }
                        let (al, af) = (m.min(1.0) * alpha_lens * 0.7, m.min(1.0) * alpha_frame);
                        for bi in 0..b {
                            for (ch, &fc) in frame.iter().enumerate() {
                                let i = bi * 3 * plane + ch * plane + y * w + x;
                                let v0 = d[i].as_f64();
                                let v1 = v0 * (1.0 - al) + shade * al;
                                d[i] = T::from_f64((v1 * (1.0 - af) + fc * af).clamp(-1.0, 1.0));
                            }
                        }
                    }
                }
                out
            }
            EditOp::Tint => {
                let cast = [0, 1, 2].map(|_| m * rng.gen_range(-0.35..0.35));
                let mut out = img.clone();
                let plane = h * w;
                let d = out.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (x as f64 / kx, y as f64 / ky);
                        let r = (((u - 56.0) / 40.0).powi(2) + ((v - 62.0) / 52.0).powi(2)).sqrt();
                        let outside = ((r - 1.0) * 8.0).clamp(0.0, 1.0);
                        for bi in 0..b {
                            for (ch, &k) in cast.iter().enumerate() {
                                let i = bi * 3 * plane + ch * plane + y * w + x;
                                d[i] = T::from_f64((d[i].as_f64() + k * outside).clamp(-1.0, 1.0));
                            }
                        }
                    }
                }
                out
            }
        };
        Ok(out)
    }
}

/// Which construction produced a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schema {
    /// Source and target of different people, no ground truth.
    PairPlain,
    /// Two photos of one person; the target is an identity edit of the second.
    PairIdEdit,
    /// Identity edit on the target; ground truth is the source.
    SingleE,
    /// Attribute edit on the target; ground truth is the target.
    SingleF,
    /// Identity edit on the source; ground truth is the source.
    SingleG,
    /// Attribute edit on the source; ground truth is the target.
    SingleH,
}

impl Schema {
    pub const ALL: [Schema; 6] =
        [Schema::PairPlain, Schema::PairIdEdit, Schema::SingleE, Schema::SingleF, Schema::SingleG, Schema::SingleH];
    /// The schemas that carry ground truth.
    pub const SUPERVISED: [Schema; 5] = [Schema::PairIdEdit, Schema::SingleE, Schema::SingleF, Schema::SingleG, Schema::SingleH];

    pub fn tag(self) -> &'static str {
        match self {
            Schema::PairPlain => "pair_plain",
            Schema::PairIdEdit => "pair_id_edit",
            Schema::SingleE => "single_e",
            Schema::SingleF => "single_f",
            Schema::SingleG => "single_g",
            Schema::SingleH => "single_h",
        }
    }

    pub fn has_gt(self) -> bool {
        self != Schema::PairPlain
    }

    /// Kind of edit the schema applies, if any.
    pub fn edit_kind(self) -> Option<EditKind> {
        match self {
            Schema::PairPlain => None,
            Schema::PairIdEdit | Schema::SingleE | Schema::SingleG => Some(EditKind::Identity),
            Schema::SingleF | Schema::SingleH => Some(EditKind::Attribute),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Schema::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown schema tag `{s}`")))
    }
}

/// A training sample over images of type `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<I> {
    pub schema: Schema,
    pub source: I,
    pub target: I,
    pub gt: Option<I>,
}

/// An image together with the person it shows and a unique key.
#[derive(Debug, Clone, Copy)]
pub struct Face<'a, T> {
    pub key: &'a str,
    pub identity: &'a str,
    pub image: &'a Tensor<T>,
}

fn expect_kind(op: &EditOperator, kind: EditKind, slot: &str) -> Result<()> {
    if op.kind() != kind {
        bail!(Schema, "{slot} needs an {kind:?} edit, `{}` is {:?}", op.op, op.kind());
    }
    Ok(())
}

/// `(a, op(b), b)` for two different photos of one person.
pub fn pair_triplet<T: Scalar>(a: Face<'_, T>, b: Face<'_, T>, op: &EditOperator, seed: u64) -> Result<Triplet<Tensor<T>>> {
    if a.identity != b.identity {
        bail!(Usage, "pair triplet needs one identity, got `{}` and `{}`", a.identity, b.identity);
    }
    if a.key == b.key {
        bail!(Usage, "pair triplet needs two different images, got `{}` twice", a.key);
    }
    expect_kind(op, EditKind::Identity, "pair_id_edit")?;
    Ok(Triplet {
        schema: Schema::PairIdEdit,
        source: a.image.clone(),
        target: op.apply(b.image, seed)?,
        gt: Some(b.image.clone()),
    })
}

/// The four single-image constructions e, f, g, h.
pub fn single_image_triplets<T: Scalar>(
    img: &Tensor<T>,
    id_op: &EditOperator,
    attr_op: &EditOperator,
    seed: u64,
) -> Result<[Triplet<Tensor<T>>; 4]> {
    expect_kind(id_op, EditKind::Identity, "identity slot")?;
    expect_kind(attr_op, EditKind::Attribute, "attribute slot")?;
    let id_edit = id_op.apply(img, seed)?;
    let attr_edit = attr_op.apply(img, seed)?;
    Ok([
        Triplet { schema: Schema::SingleE, source: img.clone(), target: id_edit.clone(), gt: Some(img.clone()) },
        Triplet { schema: Schema::SingleF, source: img.clone(), target: attr_edit.clone(), gt: Some(attr_edit.clone()) },
        Triplet { schema: Schema::SingleG, source: id_edit.clone(), target: img.clone(), gt: Some(id_edit) },
        Triplet { schema: Schema::SingleH, source: attr_edit, target: img.clone(), gt: Some(img.clone()) },
    ])
}

/// One corpus image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: String,
    pub identity: String,
    pub resolution: usize,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub schema: Schema,
    pub source: String,
    pub target: String,
    pub gt: Option<String>,
    pub identity: String,
    pub seed: u64,
}

pub const MANIFEST_HEADER: &str = "#fstriplets v1";

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        bail!(Usage, "{what} `{s}` is empty or contains a tab or newline");
    }
    Ok(())
}

/// Renders records as manifest text.
pub fn render_manifest(records: &[TripletRecord]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        for (v, what) in [(&r.source, "source path"), (&r.target, "target path"), (&r.identity, "identity")] {
            check_field(v, what)?;
        }
        if let Some(g) = &r.gt {
            check_field(g, "gt path")?;
            if g == "-" {
                bail!(Usage, "gt path `-` is reserved for absent ground truth");
            }
        }
        if r.schema.has_gt() != r.gt.is_some() {
            bail!(Schema, "schema {} with gt {:?}", r.schema, r.gt);
        }
        let gt = r.gt.as_deref().unwrap_or("-");
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.schema, r.source, r.target, gt, r.identity, r.seed));
    }
    Ok(out)
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parses manifest text. Line numbers in errors count from 1.
pub fn parse_manifest(text: &str) -> Result<Vec<TripletRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
        _ => return Err(parse_error(1, format!("expected header `{MANIFEST_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(parse_error(n, format!("expected 6 tab-separated fields, got {}", f.len())));
        }
        let schema = Schema::from_str(f[0]).map_err(|e| parse_error(n, e.to_string()))?;
        let gt = (f[3] != "-").then(|| f[3].to_string());
        if schema.has_gt() != gt.is_some() {
            return Err(parse_error(n, format!("schema {schema} disagrees with gt field `{}`", f[3])));
        }
        let seed = f[5].parse().map_err(|_| parse_error(n, format!("bad seed `{}`", f[5])))?;
        for (k, v) in f.iter().enumerate().take(5) {
            if v.is_empty() {
                return Err(parse_error(n, format!("field {} is empty", k + 1)));
            }
        }
        out.push(TripletRecord {
            schema,
            source: f[1].to_string(),
            target: f[2].to_string(),
            gt,
            identity: f[4].to_string(),
            seed,
        });
    }
    Ok(out)
}

/// Corpus text: `path<TAB>identity<TAB>resolution` per line; `#` starts a comment line.
pub fn parse_corpus(text: &str) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_error(n, format!("expected 3 tab-separated fields, got {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(parse_error(n, "empty path or identity"));
        }
        let resolution = f[2].parse().map_err(|_| parse_error(n, format!("bad resolution `{}`", f[2])))?;
        out.push(ImageRecord { path: f[0].to_string(), identity: f[1].to_string(), resolution });
    }
    Ok(out)
}

pub fn render_corpus(records: &[ImageRecord]) -> Result<String> {
    let mut out = String::from("# path\tidentity\tresolution\n");
    for r in records {
        check_field(&r.path, "path")?;
        check_field(&r.identity, "identity")?;
        out.push_str(&format!("{}\t{}\t{}\n", r.path, r.identity, r.resolution));
    }
    Ok(out)
}

/// Images available for plain pairs plus the supervised triplets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub triplets: Vec<TripletRecord>,
}

impl Dataset {
    /// Builds the image pool from the sources and targets of the manifest's
    /// unedited images (every source of a plain pair, every gt).
    pub fn from_manifest(records: Vec<TripletRecord>) -> Self {
        let mut images: Vec<ImageRecord> = Vec::new();
        let mut add = |path: &str, identity: &str| {
            if !images.iter().any(|r| r.path == path) {
                images.push(ImageRecord { path: path.to_string(), identity: identity.to_string(), resolution: 0 });
            }
        };
        for r in &records {
            match r.schema {
                Schema::PairPlain => {
                    add(&r.source, &r.identity);
                }
                Schema::PairIdEdit | Schema::SingleE | Schema::SingleH => add(r.gt.as_deref().unwrap_or(&r.source), &r.identity),
                Schema::SingleF => add(&r.source, &r.identity),
                Schema::SingleG => add(&r.target, &r.identity),
            }
        }
        let triplets = records.into_iter().filter(|r| r.schema.has_gt()).collect();
        Dataset { images, triplets }
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty() && self.triplets.is_empty()
    }
}

/// A sampled training item, borrowing paths from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw<'a> {
    pub schema: Schema,
    pub source: &'a str,
    pub target: &'a str,
    pub gt: Option<&'a str>,
}

/// Sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Probability that a sample is a supervised triplet.
    pub triplet_fraction: f64,
    /// Relative weights of the supervised schemas, in [`Schema::SUPERVISED`] order.
    pub schema_weights: [f64; 5],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { triplet_fraction: 0.4, schema_weights: [1.0; 5] }
    }
}

/// Draws `batch_size` samples. Each is a supervised triplet with probability
/// `triplet_fraction` (schema by weight, then uniform within the schema),
/// otherwise a plain pair of two images of different people.
pub fn sample_batch<'a>(dataset: &'a Dataset, batch_size: usize, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Draw<'a>>> {
    if dataset.is_empty() {
        bail!(Usage, "cannot sample from an empty dataset");
    }
    if !(0.0..=1.0).contains(&cfg.triplet_fraction) {
        bail!(Config, "triplet_fraction must lie in [0, 1], got {}", cfg.triplet_fraction);
    }
    let by_schema: Vec<Vec<&TripletRecord>> =
        Schema::SUPERVISED.iter().map(|s| dataset.triplets.iter().filter(|t| t.schema == *s).collect()).collect();
    let weights: Vec<f64> = (0..5).map(|i| if by_schema[i].is_empty() { 0.0 } else { cfg.schema_weights[i].max(0.0) }).collect();
    let weight_sum: f64 = weights.iter().sum();
    let multi_identity =
        dataset.images.iter().any(|r| r.identity != dataset.images.first().map_or("", |f| f.identity.as_str()));
    let have_pairs = dataset.images.len() >= 2 && multi_identity;
    if cfg.triplet_fraction > 0.0 && weight_sum <= 0.0 {
        bail!(Usage, "triplet_fraction is {} but the dataset has no weighted supervised triplets", cfg.triplet_fraction);
    }
    if cfg.triplet_fraction < 1.0 && !have_pairs {
        bail!(Usage, "plain pairs need images of at least two identities");
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        if rng.gen_bool(cfg.triplet_fraction) {
            let mut pick = rng.gen_range(0.0..weight_sum);
            let mut k = weights.iter().rposition(|&w| w > 0.0).expect("positive weight sum");
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && pick < w {
                    k = i;
                    break;
                }
                pick -= w;
            }
            let pool = &by_schema[k];
            let t = pool[rng.gen_range(0..pool.len())];
            out.push(Draw { schema: t.schema, source: &t.source, target: &t.target, gt: t.gt.as_deref() });
        } else {
            let n = dataset.images.len();
            let s = rng.gen_range(0..n);
            let t = loop {
                let t = rng.gen_range(0..n);
                if dataset.images[t].identity != dataset.images[s].identity {
                    break t;
                }
            };
            out.push(Draw {
                schema: Schema::PairPlain,
                source: &dataset.images[s].path,
                target: &dataset.images[t].path,
                gt: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_face, FaceStyle, Shot};
    use proptest::prelude::*;

    fn face(id: u64, shot: u64) -> Tensor<f32> {
        render_face(&FaceStyle::for_identity(id), &Shot::aligned(32, shot), 32).unwrap().0
    }

    fn record(schema: Schema, i: usize, identity: &str) -> TripletRecord {
        TripletRecord {
            schema,
            source: format!("s{i}.ppm"),
            target: format!("t{i}.ppm"),
            gt: schema.has_gt().then(|| format!("g{i}.ppm")),
            identity: identity.to_string(),
            seed: i as u64,
        }
    }

    fn dataset() -> Dataset {
        let mut records: Vec<TripletRecord> = (0..6).map(|i| record(Schema::PairPlain, i, &format!("p{}", i % 3))).collect();
        for (k, s) in Schema::SUPERVISED.iter().enumerate() {
            records.push(record(*s, 10 + k, "p0"));
        }
        Dataset::from_manifest(records)
    }

    #[test]
    fn single_image_triplets_obey_the_ground_truth_rules() {
        let img = face(1, 1);
        for id_op in EditOp::of_kind(EditKind::Identity) {
            for attr_op in EditOp::of_kind(EditKind::Attribute) {
                let [e, f, g, h] = single_image_triplets(&img, &EditOperator::new(id_op), &EditOperator::new(attr_op), 3).unwrap();
                assert_eq!(e.gt.as_ref(), Some(&e.source));
                assert_eq!(e.source, img);
                assert_eq!(f.gt.as_ref(), Some(&f.target));
                assert_eq!(g.gt.as_ref(), Some(&g.source));
                assert_eq!(g.target, img);
                assert_eq!(h.gt.as_ref(), Some(&h.target));
                assert_eq!(h.target, img);
                let tags = [e.schema, f.schema, g.schema, h.schema];
                assert_eq!(tags, [Schema::SingleE, Schema::SingleF, Schema::SingleG, Schema::SingleH]);
            }
        }
    }

    #[test]
    fn slot_kinds_are_enforced() {
        let img = face(1, 1);
        let bulge = EditOperator::new(EditOp::Bulge);
        let glasses = EditOperator::new(EditOp::Glasses);
        assert!(matches!(single_image_triplets(&img, &glasses, &glasses, 0), Err(Error::Schema(_))));
        assert!(matches!(single_image_triplets(&img, &bulge, &bulge, 0), Err(Error::Schema(_))));
        let (a, b) = (face(1, 1), face(1, 2));
        let fa = Face { key: "a", identity: "p", image: &a };
        let fb = Face { key: "b", identity: "p", image: &b };
        assert!(matches!(pair_triplet(fa, fb, &glasses, 0), Err(Error::Schema(_))));
        assert!(matches!(pair_triplet(fa, Face { identity: "q", ..fb }, &bulge, 0), Err(Error::Usage(_))));
        assert!(matches!(pair_triplet(fa, fa, &bulge, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn pair_triplet_edits_only_the_ground_truth_copy() {
        let (a, b) = (face(2, 1), face(2, 2));
        let fa = Face { key: "a", identity: "p", image: &a };
        let fb = Face { key: "b", identity: "p", image: &b };
        let t = pair_triplet(fa, fb, &EditOperator::new(EditOp::Bulge), 5).unwrap();
        assert_eq!(t.source, a);
        assert_eq!(t.gt, Some(b.clone()));
        assert!(t.target.max_abs_diff(&b) > 0.01);
        assert_eq!(t, pair_triplet(fa, fb, &EditOperator::new(EditOp::Bulge), 5).unwrap());
        let noop = pair_triplet(fa, fb, &EditOperator::new(EditOp::None), 5).unwrap();
        assert_eq!(Some(noop.target), noop.gt);
    }

    #[test]
    fn edit_operator_examples() {
        let img = face(3, 4);
        for op in EditOp::ALL {
            let e = EditOperator::new(op);
            let a = e.apply(&img, 11).unwrap();
            assert_eq!(a, e.apply(&img, 11).unwrap(), "{op}");
            assert_eq!(a.shape(), img.shape());
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)), "{op}");
            if op != EditOp::None {
                assert!(a.max_abs_diff(&img) > 1e-3, "{op} changed nothing");
            }
            if op != EditOp::Flip {
                assert_eq!(EditOperator::with_magnitude(op, 0.0).apply(&img, 11).unwrap(), img);
            }
        }
        let flip = EditOperator::new(EditOp::Flip);
        assert_eq!(flip.apply(&flip.apply(&img, 1).unwrap(), 2).unwrap(), img);
        assert!(matches!("warp".parse::<EditOp>(), Err(Error::Config(_))));
        assert_eq!("chubby".parse::<EditOp>().unwrap(), EditOp::Bulge);
        assert!(EditOperator::new(EditOp::Age).apply(&Tensor::<f32>::zeros(&[1, 1, 4, 4]), 0).is_err());
    }

    #[test]
    fn sampling_fractions() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = SamplerConfig::default();
        let draws = sample_batch(&ds, 10_000, &cfg, &mut rng).unwrap();
        let frac = draws.iter().filter(|d| d.gt.is_some()).count() as f64 / 10_000.0;
        assert!((frac - 0.40).abs() <= 0.02, "{frac}");
        let idents: std::collections::HashMap<&str, &str> = ds.images.iter().map(|r| (r.path.as_str(), r.identity.as_str())).collect();
        for d in draws.iter().filter(|d| d.schema == Schema::PairPlain) {
            assert_ne!(idents[d.source], idents[d.target]);
        }
        for (f, want) in [(0.0, 0), (1.0, 64)] {
            let b = sample_batch(&ds, 64, &SamplerConfig { triplet_fraction: f, ..cfg }, &mut rng).unwrap();
            assert_eq!(b.iter().filter(|d| d.gt.is_some()).count(), want);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_batch(&ds, 50, &cfg, &mut r1).unwrap(), sample_batch(&ds, 50, &cfg, &mut r2).unwrap());
    }

    #[test]
    fn sampling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplerConfig::default();
        assert!(matches!(sample_batch(&Dataset::default(), 4, &cfg, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(sample_batch(&dataset(), 4, &SamplerConfig { triplet_fraction: 1.5, ..cfg }, &mut rng), Err(Error::Config(_))));
        let pairs_only = Dataset::from_manifest((0..4).map(|i| record(Schema::PairPlain, i, &format!("p{i}"))).collect());
        assert!(matches!(sample_batch(&pairs_only, 4, &cfg, &mut rng), Err(Error::Usage(_))));
        let one_person = Dataset::from_manifest(alloc::vec![record(Schema::SingleE, 0, "p"), record(Schema::PairPlain, 1, "p")]);
        assert!(matches!(sample_batch(&one_person, 4, &cfg, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn manifest_parse_errors_carry_line_numbers() {
        let good = render_manifest(&[record(Schema::SingleF, 0, "p")]).unwrap();
        let line = |l: &str| format!("{MANIFEST_HEADER}\n{}{l}\n", good.lines().nth(1).unwrap().to_string() + "\n");
        let cases = [
            line("single_e\tonly"),
            line("odd\ta\tb\tc\tp\t1"),
            line("pair_plain\ta\tb\tc\tp\t1"),
            line("single_e\ta\tb\t-\tp\t1"),
            line("single_e\ta\tb\tc\tp\tx"),
            line("single_e\t\tb\tc\tp\t1"),
        ];
        for text in cases {
            assert!(matches!(parse_manifest(&text), Err(Error::Parse { line: 3, .. })), "{text:?}");
        }
        assert!(matches!(parse_manifest("nope\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_corpus("a\tb\n"), Err(Error::Parse { line: 1, .. })));
        assert!(render_manifest(&[TripletRecord { gt: None, ..record(Schema::SingleE, 0, "p") }]).is_err());
        assert!(render_manifest(&[TripletRecord { source: "a\tb".into(), ..record(Schema::PairPlain, 0, "p") }]).is_err());
    }

    #[test]
    fn from_manifest_pools_unedited_images() {
        let ds = dataset();
        assert_eq!(ds.triplets.len(), 5);
        let paths: Vec<&str> = ds.images.iter().map(|r| r.path.as_str()).collect();
        assert!(paths.contains(&"s0.ppm") && paths.contains(&"g10.ppm"));
        // single_f source, single_g target: both unedited.
        assert!(paths.contains(&"s12.ppm") && paths.contains(&"t13.ppm"));
        assert!(!paths.contains(&"t12.ppm") && !paths.contains(&"s13.ppm"));
    }

    fn field() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 éü_./-]{1,12}".prop_filter("reserved", |s| s != "-")
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn manifest_round_trip(rows in proptest::collection::vec((0..6usize, field(), field(), field(), field(), any::<u64>()), 0..8)) {
            let records: Vec<TripletRecord> = rows
                .into_iter()
                .map(|(k, s, t, g, id, seed)| {
                    let schema = Schema::ALL[k];
                    TripletRecord { schema, source: s, target: t, gt: schema.has_gt().then_some(g), identity: id, seed }
                })
                .collect();
            let text = render_manifest(&records).unwrap();
            prop_assert_eq!(parse_manifest(&text).unwrap(), records);
        }

        #[test]
        fn corpus_round_trip(rows in proptest::collection::vec((field(), field(), 1..2048usize), 0..8)) {
            let records: Vec<ImageRecord> = rows.into_iter().map(|(path, identity, resolution)| ImageRecord { path, identity, resolution }).collect();
            prop_assert_eq!(parse_corpus(&render_corpus(&records).unwrap()).unwrap(), records);
        }
    }
}
