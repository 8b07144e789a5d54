//! Image files referenced by corpora and manifests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use lightswap_core::train::Batch;
use lightswap_core::triplet::{self, Dataset, Draw, Triplet};
use lightswap_core::{Scalar, Tensor};

use crate::error::{self, Result, WithPath};
use crate::ppm;

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory that relative paths inside `file` refer to.
pub fn base_dir(file: &Path) -> PathBuf {
    file.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Loads each image once and checks its size.
pub struct ImageCache<T> {
    base: PathBuf,
    size: Option<usize>,
    images: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> ImageCache<T> {
    /// `size` is the required side length, if any.
    pub fn new(base: &Path, size: Option<usize>) -> Self {
        ImageCache { base: base.to_path_buf(), size, images: HashMap::new() }
    }

    pub fn get(&mut self, key: &str) -> Result<&Tensor<T>> {
        if !self.images.contains_key(key) {
            let path = resolve(&self.base, key);
            let img: Tensor<T> = ppm::read(&path)?;
            if let Some(s) = self.size {
                let (_, _, h, w) = img.dims4().at(&path)?;
                if h != s || w != s {
                    return Err(lightswap_core::Error::Dimension(format!("image is {w}×{h}, expected {s}×{s}"))).at(&path);
                }
            }
            self.images.insert(key.to_string(), img);
        }
        Ok(&self.images[key])
    }

    /// Stacks sampled draws into a batch.
    pub fn batch(&mut self, draws: &[Draw<'_>]) -> Result<Batch<T>> {
        for d in draws {
            self.get(d.source)?;
            self.get(d.target)?;
            if let Some(g) = d.gt {
                self.get(g)?;
            }
        }
        let items: Vec<Triplet<&Tensor<T>>> = draws
            .iter()
            .map(|d| Triplet {
                schema: d.schema,
                source: &self.images[d.source],
                target: &self.images[d.target],
                gt: d.gt.map(|g| &self.images[g]),
            })
            .collect();
        Ok(Batch::from_triplets(&items)?)
    }
}

/// Reads a manifest into a sampling dataset. Relative paths stay relative
/// to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = error::read_text(path)?;
    let records = triplet::parse_manifest(&text).at(path)?;
    Ok(Dataset::from_manifest(records))
}

pub fn load_corpus(path: &Path) -> Result<Vec<triplet::ImageRecord>> {
    triplet::parse_corpus(&error::read_text(path)?).at(path)
}

/// Landmark text: five lines of `x y` (comma or whitespace separated),
/// `#` comment lines allowed.
pub fn parse_landmarks(text: &str) -> lightswap_core::Result<lightswap_core::align::Landmarks5> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| lightswap_core::Error::Parse { line: i + 1, message: format!("bad landmark line `{line}`") })?;
        if nums.len() != 2 || pts.len() == 5 {
            return Err(lightswap_core::Error::Parse { line: i + 1, message: "expected five `x y` lines".into() });
        }
        pts.push([nums[0], nums[1]]);
    }
    let points: [[f64; 2]; 5] =
        pts.try_into().map_err(|_| lightswap_core::Error::Parse { line: 0, message: "expected five landmark points".into() })?;
    Ok(lightswap_core::align::Landmarks5::new(points))
}

pub fn render_landmarks(lm: &lightswap_core::align::Landmarks5) -> String {
    let mut s = String::from("# left eye, right eye, nose, left mouth, right mouth\n");
    for [x, y] in lm.points {
        s.push_str(&format!("{x} {y}\n"));
    }
    s
}

/// Reads landmarks; a missing file is a usage error.
pub fn load_landmarks(path: &Path) -> Result<lightswap_core::align::Landmarks5> {
    if !path.is_file() {
        return Err(crate::Error::usage(format!("landmarks file {} not found", path.display())));
    }
    parse_landmarks(&error::read_text(path)?).at(path)
}

/// Conventional landmarks path next to an image: `face.ppm` → `face.lm`.
pub fn landmarks_path(image: &Path) -> PathBuf {
    image.with_extension("lm")
}
