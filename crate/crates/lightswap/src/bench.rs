//! Generator latency measurement. Only the generator forward pass is
//! timed: the identity embedding is computed once beforehand and the timed
//! function never sees the embedder.

use std::time::Instant;

use lightswap_core::generator::{FaceEmbedding, Generator, GeneratorConfig, Variant};
use lightswap_core::perception::FaceEmbedder;
use lightswap_core::{Result, Scalar, Tensor};

use crate::config::BenchConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub variant: Variant,
    pub resolution: usize,
    pub param_count: usize,
    pub fp32_bytes: usize,
    /// Latency of each timed run in milliseconds.
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
}

impl BenchReport {
    pub fn megabytes(&self) -> f64 {
        self.fp32_bytes as f64 / 1e6
    }
}

/// Times `runs` forward passes after `warmup` untimed ones.
pub fn time_forward<T: Scalar>(g: &Generator<T>, target: &Tensor<T>, f: &FaceEmbedding<T>, cfg: &BenchConfig) -> Result<Vec<f64>> {
    for _ in 0..cfg.warmup {
        g.infer(target, f)?;
    }
    let mut runs = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let t0 = Instant::now();
        let y = g.infer(target, f)?;
        runs.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    Ok(runs)
}

/// Benchmarks one variant of `base` on a single image.
pub fn bench_variant<T: Scalar>(
    base: &GeneratorConfig,
    variant: Variant,
    seed: u64,
    target: &Tensor<T>,
    f: &FaceEmbedding<T>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let g = Generator::<T>::new(base.clone().with_variant(variant), seed)?;
    let count = g.param_count();
    let runs_ms = time_forward(&g, target, f, cfg)?;
    let mean_ms = runs_ms.iter().sum::<f64>() / runs_ms.len() as f64;
    Ok(BenchReport {
        variant,
        resolution: base.resolution,
        param_count: count.count,
        fp32_bytes: count.fp32_bytes,
        runs_ms,
        mean_ms,
    })
}

/// Embeds `source` once, then benchmarks each variant on `target`.
pub fn bench_variants<T: Scalar>(
    base: &GeneratorConfig,
    variants: &[Variant],
    seed: u64,
    embedder: &dyn FaceEmbedder<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &BenchConfig,
) -> Result<Vec<BenchReport>> {
    let f = embedder.embed(source)?;
    variants.iter().map(|&v| bench_variant(base, v, seed, target, &f, cfg)).collect()
}

pub fn render_table(reports: &[BenchReport]) -> String {
    let mut s = format!("{:<10} {:>6} {:>12} {:>10} {:>6} {:>12}\n", "variant", "size", "params", "fp32 MB", "runs", "mean ms");
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>6} {:>12} {:>10.3} {:>6} {:>12.3}\n",
            r.variant.name(),
            r.resolution,
            r.param_count,
            r.megabytes(),
            r.runs_ms.len(),
            r.mean_ms
        ));
    }
    s
}

/// One summary row per variant.
pub fn summary_csv(reports: &[BenchReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "resolution", "params", "fp32_bytes", "runs", "mean_ms"]).expect("in-memory write");
    for r in reports {
        w.write_record([
            r.variant.name().to_string(),
            r.resolution.to_string(),
            r.param_count.to_string(),
            r.fp32_bytes.to_string(),
            r.runs_ms.len().to_string(),
            r.mean_ms.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII")
}

/// One row per timed run.
pub fn runs_csv(reports: &[BenchReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "run", "latency_ms"]).expect("in-memory write");
    for r in reports {
        for (i, ms) in r.runs_ms.iter().enumerate() {
            w.write_record([r.variant.name().to_string(), i.to_string(), ms.to_string()]).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII")
}

#[cfg(test)]
mod tests {
    use super::*;
    use lightswap_core::perception::ConvEmbedder;
    use std::cell::Cell;

    /// Counts calls and delegates.
    struct Counting<'a> {
        inner: ConvEmbedder<f32>,
        calls: &'a Cell<usize>,
    }

    impl FaceEmbedder<f32> for Counting<'_> {
        fn embedding_dim(&self) -> usize {
            FaceEmbedder::<f32>::embedding_dim(&self.inner)
        }
        fn input_size(&self) -> usize {
            FaceEmbedder::<f32>::input_size(&self.inner)
        }
        fn embed_var(&self, tape: &mut lightswap_core::Tape<f32>, image: lightswap_core::Var) -> Result<lightswap_core::Var> {
            self.calls.set(self.calls.get() + 1);
            self.inner.embed_var(tape, image)
        }
    }

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            channels: 8,
            embedding_dim: 8,
            identity_blocks: [1, 1, 1],
            attribute_blocks: [2, 2, 2],
            decoder_blocks: [2, 2, 2],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn embedding_happens_once_outside_timing() {
        let calls = Cell::new(0);
        let e = Counting { inner: ConvEmbedder::builtin(16, 8).unwrap(), calls: &calls };
        let x = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        let cfg = BenchConfig { runs: 7, warmup: 2 };
        let reports = bench_variants(&tiny(), &[Variant::Baseline, Variant::Shallow], 0, &e, &x, &x, &cfg).unwrap();
        assert_eq!(calls.get(), 1);
        for r in &reports {
            assert_eq!(r.runs_ms.len(), 7);
            let mean = r.runs_ms.iter().sum::<f64>() / 7.0;
            assert_eq!(r.mean_ms, mean);
            assert!(r.runs_ms.iter().all(|&v| v > 0.0));
        }
        assert!(reports[1].param_count < reports[0].param_count);
        let table = render_table(&reports);
        assert!(table.contains("baseline") && table.contains("shallow"));
        assert_eq!(summary_csv(&reports).lines().count(), 3);
        assert_eq!(runs_csv(&reports).lines().count(), 15);
    }
}
