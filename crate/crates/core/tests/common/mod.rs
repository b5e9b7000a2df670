#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssip_core::dataset::Sample;
use ssip_core::fem::{BackboneOutput, FeatureCache, ToyBackbone, ToyBackboneConfig};
use ssip_core::nn::Matrix;
use ssip_core::pipeline::{prepare, PrepareOptions, Prepared};
use ssip_core::synth::{generate, SynthConfig};
use ssip_core::{CalibrationCurveSet, Score};

/// Fresh scratch directory under the cargo-provided temp root.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Generate a synthetic CPC-layout dataset and prepare it.
pub fn prepared_synth(name: &str, cfg: &SynthConfig) -> Prepared {
    let root = scratch(name);
    let curves = CalibrationCurveSet::builtin_default();
    generate(root.join("cpc"), cfg, &curves).unwrap();
    prepare(&root.join("cpc"), &root.join("prepared"), &PrepareOptions::default()).unwrap()
}

pub fn toy_cache(layers: usize, dim: usize) -> FeatureCache {
    FeatureCache::new(Arc::new(
        ToyBackbone::new(ToyBackboneConfig {
            layers,
            dim,
            ..Default::default()
        })
        .unwrap(),
    ))
}

pub fn random_features(layers: usize, frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> BackboneOutput {
    BackboneOutput::new(
        (0..layers)
            .map(|_| Matrix::from_vec(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect(),
    )
    .unwrap()
}

/// Labeled samples for one listener whose features are registered in
/// `cache` directly.
pub fn listener_pool(
    cache: &FeatureCache,
    listener: &str,
    n: usize,
    layers: usize,
    frames: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let id = format!("{listener}_{i:03}");
            cache.insert(&id, random_features(layers, frames, dim, rng));
            Sample::new(&id, listener, Score::new(rng.gen_range(0.0..100.0)).unwrap())
        })
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Print a result line that is visible even when test output is captured.
pub fn report_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
