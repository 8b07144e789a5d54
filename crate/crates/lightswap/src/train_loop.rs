//! The training loop: sampling, steps, loss curves, checkpoints and sample grids.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt                   full configuration of the run
//! losses.csv                   step,term,value for every term of every step
//! checkpoints/step_NNNNNNN.fswt
//! samples/step_NNNNNNN_S.ppm   source | target | output rows at side S
//! checkpoint.fswt              state after the last step
//! generator.fswt               generator weights after the last step
//! ```

use std::path::{Path, PathBuf};

use lightswap_core::image::area_downsample;
use lightswap_core::losses::LossReport;
use lightswap_core::perception::{FaceEmbedder, FeatureExtractor};
use lightswap_core::train::{Batch, Trainer};
use lightswap_core::triplet::{sample_batch, Dataset};
use lightswap_core::{Scalar, Tensor};

use crate::config::{self, RunConfig};
use crate::curves::CurveWriter;
use crate::data::ImageCache;
use crate::error::Result;
use crate::{models, ppm};

/// Rows shown in a sample grid.
const SAMPLE_ROWS: usize = 4;

pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }
    pub fn checkpoint_at(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:07}.fswt"))
    }
    pub fn sample_at(&self, step: u64, size: usize) -> PathBuf {
        self.dir.join("samples").join(format!("step_{step:07}_{size}.ppm"))
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.fswt")
    }
    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.fswt")
    }
}

/// Writes one grid per output scale for the first rows of `batch`.
pub fn write_samples<T: Scalar>(
    out: &Outputs,
    step: u64,
    trainer: &Trainer<T>,
    batch: &Batch<T>,
    embedder: &dyn FaceEmbedder<T>,
) -> Result<()> {
    let n = batch.len().min(SAMPLE_ROWS);
    let pick = |t: &Tensor<T>| {
        let rows: Vec<Tensor<T>> = (0..n).map(|i| t.index0(i)).collect();
        Tensor::stack0(&rows.iter().collect::<Vec<_>>())
    };
    let source = pick(&batch.source)?;
    let target = pick(&batch.target)?;
    let f = embedder.embed(&source)?;
    let y = trainer.generator.infer(&target, &f)?;
    let res = trainer.config.generator.resolution;
    for (s, out_s) in y.scales().into_iter().enumerate() {
        let size = trainer.config.generator.output_sizes()[s];
        let (src, tgt) = (area_downsample(&source, res / size)?, area_downsample(&target, res / size)?);
        let mut tiles = Vec::with_capacity(3 * n);
        for i in 0..n {
            tiles.extend([src.index0(i), tgt.index0(i), out_s.index0(i)]);
        }
        let tiles: Vec<Tensor<T>> = tiles.into_iter().map(|t| t.reshape(&[1, 3, size, size])).collect::<lightswap_core::Result<_>>()?;
        ppm::write(&out.sample_at(step, size), &ppm::grid(&tiles, 3)?)?;
    }
    Ok(())
}

/// Runs from step 0 (or from `resume`) to `total_steps`, calling `progress`
/// after every step. Returns the final trainer.
pub fn train_loop<T: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset,
    images: &mut ImageCache<T>,
    embedder: &dyn FaceEmbedder<T>,
    extractor: &dyn FeatureExtractor<T>,
    out: &Outputs,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(u64, &LossReport),
) -> Result<Trainer<T>> {
    let tc = &cfg.train;
    config::save(&out.config(), cfg)?;
    let (mut trainer, mut curves) = match resume {
        Some(p) => {
            let t: Trainer<T> = models::load_checkpoint(p, tc)?;
            let w = CurveWriter::resume(&out.losses(), t.step_count())?;
            (t, w)
        }
        None => (Trainer::new(tc.clone())?, CurveWriter::create(&out.losses())?),
    };
    while trainer.step_count() < tc.total_steps {
        let draws = sample_batch(dataset, tc.batch_size, &tc.sampler, trainer.rng_mut())?;
        let batch = images.batch(&draws)?;
        let report = trainer.train_step(&batch, embedder, extractor)?;
        let step = trainer.step_count();
        curves.record(step, &report)?;
        progress(step, &report);
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 {
            curves.flush()?;
            models::save_checkpoint(&out.checkpoint_at(step), &trainer)?;
        }
        if tc.sample_every > 0 && step % tc.sample_every == 0 {
            write_samples(out, step, &trainer, &batch, embedder)?;
        }
    }
    curves.flush()?;
    models::save_checkpoint(&out.checkpoint(), &trainer)?;
    models::save_generator(&out.generator(), &trainer.generator)?;
    Ok(trainer)
}
