use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lightswap::config::{self, Preset, RunConfig};
use lightswap::{data, models, ppm};
use lightswap_core::generator::{Generator, Variant};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightswap")).args(args).output().expect("spawn lightswap")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::preset(Preset::Smoke);
    let g = &mut c.train.generator;
    g.resolution = 16;
    g.channels = 8;
    g.embedding_dim = 16;
    g.identity_blocks = [1, 1, 1];
    g.attribute_blocks = [1, 1, 1];
    g.decoder_blocks = [1, 1, 1];
    c.train.critic.base_channels = 4;
    c.embedder.input_size = 16;
    c.finalize().unwrap();
    c
}

/// A run directory with random weights and its config, plus a synthetic corpus.
fn fixture(dir: &Path, variant: Variant) -> (PathBuf, PathBuf) {
    let mut cfg = tiny_config();
    cfg.train.generator.variant = variant;
    let run = dir.join("run");
    config::save(&run.join("config.txt"), &cfg).unwrap();
    let g = Generator::<f32>::new(cfg.train.generator.clone(), 1).unwrap();
    let weights = run.join("generator.fswt");
    models::save_generator(&weights, &g).unwrap();
    let o = run_synth(dir, 2, 1, 24);
    assert!(o.status.success(), "{}", stderr(&o));
    (weights, dir.join("faces"))
}

fn run_synth(dir: &Path, identities: usize, shots: usize, size: usize) -> Output {
    let out = dir.join("faces");
    run(&[
        "synth",
        "--out",
        s(&out),
        "--identities",
        &identities.to_string(),
        "--shots",
        &shots.to_string(),
        "--size",
        &size.to_string(),
        "--posed",
    ])
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = run(&[flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}");
        assert!(!stdout(&o).is_empty());
    }
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["paramcount", "--variant", "enormous"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("enormous"));
    let o = run(&["train", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1), "missing --manifest");
}

#[test]
fn paramcount_prints_count_and_bytes() {
    let o = run(&["paramcount", "--variant", "baseline"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let row = text.lines().find(|l| l.starts_with("baseline")).expect("baseline row");
    let fields: Vec<&str> = row.split_whitespace().collect();
    let count: usize = fields[1].parse().unwrap();
    let bytes: usize = fields[2].parse().unwrap();
    assert_eq!(bytes, 4 * count);
    assert!((9_200_000..=11_200_000).contains(&bytes), "{bytes}");
    let all = run(&["paramcount"]);
    assert_eq!(stdout(&all).lines().count(), 6);
}

#[test]
fn forge_twice_with_one_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_synth(dir.path(), 3, 2, 16).status.success());
    let corpus = dir.path().join("faces/corpus.tsv");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let manifest = dir.path().join(name).join("triplets.tsv");
        let o = run(&["forge", "--corpus", s(&corpus), "--out", s(&manifest), "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let mut files: Vec<(String, Vec<u8>)> = walk(&dir.path().join(name))
            .into_iter()
            .map(|p| (p.strip_prefix(dir.path().join(name)).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert!(outputs[0].len() > 10);
    assert_eq!(outputs[0], outputs[1]);
    let text = std::fs::read_to_string(dir.path().join("a/triplets.tsv")).unwrap();
    assert!(text.starts_with(lightswap_core::triplet::MANIFEST_HEADER));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn swap_with_random_weights_is_live_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, faces) = fixture(dir.path(), Variant::Baseline);
    let (src, tgt) = (faces.join("id000_00.ppm"), faces.join("id001_00.ppm"));
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}.ppm"));
        let o = run(&["swap", "--weights", s(&weights), "--source", s(&src), "--target", s(&tgt), "--out", s(&out), "--all-scales"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let img = ppm::read::<f32>(&out).unwrap();
        assert_eq!(img.shape(), &[1, 3, 16, 16]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for side in [4, 8] {
            let small = ppm::read::<f32>(&dir.path().join(format!("out{i}_{side}.ppm"))).unwrap();
            assert_eq!(small.shape(), &[1, 3, side, side]);
        }
        bytes.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn swap_without_landmarks_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, faces) = fixture(dir.path(), Variant::Baseline);
    let src = faces.join("id000_00.ppm");
    std::fs::remove_file(data::landmarks_path(&src)).unwrap();
    let out = dir.path().join("out.ppm");
    let o = run(&["swap", "--weights", s(&weights), "--source", s(&src), "--target", s(&src), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("landmarks"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn mismatched_or_damaged_weights_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, faces) = fixture(dir.path(), Variant::Wide);
    let face = faces.join("id000_00.ppm");
    let out = dir.path().join("out.ppm");
    let baseline = dir.path().join("baseline.txt");
    config::save(&baseline, &tiny_config()).unwrap();
    let o = run(&["swap", "--config", s(&baseline), "--weights", s(&weights), "--source", s(&face), "--target", s(&face), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("header.down_id.weight"), "{}", stderr(&o));

    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() - 3]).unwrap();
    let o = run(&["swap", "--weights", s(&weights), "--source", s(&face), "--target", s(&face), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("generator.fswt"), "{}", stderr(&o));
}

#[test]
fn align_writes_a_crop_of_the_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_synth(dir.path(), 1, 1, 48).status.success());
    let img = dir.path().join("faces/id000_00.ppm");
    let out = dir.path().join("aligned.ppm");
    let o = run(&["align", "--image", s(&img), "--out", s(&out), "--size", "32"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(ppm::read::<f32>(&out).unwrap().shape(), &[1, 3, 32, 32]);
    let o = run(&["align", "--image", s(&dir.path().join("nope.ppm")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "missing landmarks for a missing image");
}

#[test]
fn train_runs_resumes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_synth(dir.path(), 3, 2, 16).status.success());
    let corpus = dir.path().join("faces/corpus.tsv");
    let manifest = dir.path().join("triplets.tsv");
    assert!(run(&["forge", "--corpus", s(&corpus), "--out", s(&manifest)]).status.success());
    let mut cfg = tiny_config();
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 2;
    cfg.train.sample_every = 2;
    cfg.train.sampler.triplet_fraction = 0.5;
    let cfg_path = dir.path().join("tiny.txt");
    config::save(&cfg_path, &cfg).unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg_path), "--manifest", s(&manifest), "--out", s(&out), "--steps", "4", "--log-every", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("step")).count(), 4);
    for f in ["config.txt", "losses.csv", "generator.fswt", "checkpoint.fswt", "checkpoints/step_0000002.fswt", "samples/step_0000004_16.ppm"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let ck = out.join("checkpoints/step_0000002.fswt");
    let o = run(&[
        "train", "--config", s(&cfg_path), "--manifest", s(&manifest), "--out", s(&out), "--steps", "6", "--resume", s(&ck),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = lightswap::curves::read(&out.join("losses.csv")).unwrap();
    let steps: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
}
