//! Frozen speech backbones that produce per-layer frame features.
//!
//! Two implementations are provided. [`ToyBackbone`] is a small seeded
//! random filterbank followed by a stack of temporal convolutions; it runs
//! anywhere and is what tests and desk-scale experiments use.
//! [`FeatureStoreBackbone`] reads per-sample feature tensors that an
//! external pretrained speech foundation model has already dumped to disk
//! as `.npy` arrays of shape `(layers, frames, channels)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SsipError};
use crate::nn::Matrix;
use crate::signal::Waveform;

/// Environment variable naming the directory of precomputed backbone features.
pub const BACKBONE_DIR_ENV: &str = "SSIP_BACKBONE_DIR";

/// Features from every encoder layer: `layers[l]` is `frames × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    layers: Vec<Matrix>,
}

impl BackboneOutput {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| SsipError::Shape("backbone output has no layers".into()))?;
        let shape = first.shape();
        if let Some(bad) = layers.iter().position(|m| m.shape() != shape) {
            return Err(SsipError::Shape(format!(
                "layer {bad} has shape {:?}, expected {shape:?}",
                layers[bad].shape()
            )));
        }
        if shape.0 == 0 {
            return Err(SsipError::DegenerateSignal("backbone output has zero frames".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols
    }
}

/// A frozen feature extractor. Implementations never change their weights.
pub trait BackboneExtractor: Send + Sync {
    fn n_layers(&self) -> usize;
    fn dim(&self) -> usize;
    /// Sample rate the extractor expects; resampling is the caller's job.
    fn sample_rate(&self) -> Option<u32>;
    /// `id` names the audio for extractors backed by precomputed features.
    fn extract(&self, id: &str, waveform: &Waveform) -> Result<BackboneOutput>;
    /// Digest of the frozen weights (or of the configuration for stores).
    fn checksum(&self) -> String;
}

pub fn extract_backbone_features(
    backbone: &dyn BackboneExtractor,
    id: &str,
    waveform: &Waveform,
) -> Result<BackboneOutput> {
    let out = backbone.extract(id, waveform)?;
    if out.n_layers() != backbone.n_layers() || out.dim() != backbone.dim() {
        return Err(SsipError::Backbone(format!(
            "extractor returned {} layers of width {}, configured {} x {}",
            out.n_layers(),
            out.dim(),
            backbone.n_layers(),
            backbone.dim()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub sample_rate: u32,
    /// Samples per output frame (frames do not overlap).
    pub frame_len: usize,
    pub kernel_len: usize,
    pub kernel_stride: usize,
    pub min_freq: f64,
    pub max_freq: f64,
    pub seed: u64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 16,
            sample_rate: 8000,
            frame_len: 256,
            kernel_len: 64,
            kernel_stride: 8,
            min_freq: 80.0,
            max_freq: 3600.0,
            seed: 0,
        }
    }
}

/// Seeded random filterbank plus `layers - 1` kernel-3 temporal convolutions.
///
/// Layer 0 is the log energy of each random band-pass filter per frame,
/// centered across channels so it carries spectral shape rather than level.
/// Each further layer is `tanh` of a width-3 convolution over frames.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: ToyBackboneConfig,
    kernels: Matrix,
    convs: Vec<(Matrix, Vec<f64>)>,
}

impl ToyBackbone {
    pub fn new(config: ToyBackboneConfig) -> Result<Self> {
        if config.layers == 0 || config.dim == 0 {
            return Err(SsipError::Config("toy backbone needs layers >= 1 and dim >= 1".into()));
        }
        if config.kernel_len == 0 || config.kernel_len > config.frame_len || config.kernel_stride == 0 {
            return Err(SsipError::Config(
                "toy backbone kernel must fit inside a frame with a positive stride".into(),
            ));
        }
        if !(config.min_freq > 0.0 && config.max_freq > config.min_freq) || config.sample_rate == 0 {
            return Err(SsipError::Config("toy backbone frequency range is invalid".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (lo, hi) = (config.min_freq.ln(), config.max_freq.ln());
        let mut freqs: Vec<f64> = (0..config.dim).map(|_| rng.gen_range(lo..hi).exp()).collect();
        freqs.sort_by(f64::total_cmp);

        let k = config.kernel_len;
        let mut kernels = Matrix::zeros(config.dim, k);
        for (c, &f) in freqs.iter().enumerate() {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let row = kernels.row_mut(c);
            for (j, v) in row.iter_mut().enumerate() {
                let window = 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / (k - 1).max(1) as f64).cos();
                *v = window * (std::f64::consts::TAU * f * j as f64 / config.sample_rate as f64 + phase).cos();
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
        }

        let d = config.dim;
        let spread = 1.2 * 3f64.sqrt() / ((3 * d) as f64).sqrt();
        let convs = (1..config.layers)
            .map(|_| {
                let w = Matrix::from_vec(3 * d, d, (0..3 * d * d).map(|_| rng.gen_range(-spread..spread)).collect());
                let b = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
                (w, b)
            })
            .collect();
        Ok(Self {
            config,
            kernels,
            convs,
        })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.config
    }

    fn filterbank(&self, samples: &[f64], frames: usize) -> Matrix {
        let cfg = &self.config;
        let mut out = Matrix::zeros(frames, cfg.dim);
        let positions: Vec<usize> = (0..=cfg.frame_len - cfg.kernel_len).step_by(cfg.kernel_stride).collect();
        for f in 0..frames {
            let frame = &samples[f * cfg.frame_len..(f + 1) * cfg.frame_len];
            let row = out.row_mut(f);
            for (c, v) in row.iter_mut().enumerate() {
                let kernel = self.kernels.row(c);
                let energy: f64 = positions
                    .iter()
                    .map(|&p| {
                        let y: f64 = kernel.iter().zip(&frame[p..p + cfg.kernel_len]).map(|(a, b)| a * b).sum();
                        y * y
                    })
                    .sum::<f64>()
                    / positions.len() as f64;
                *v = 10.0 * (energy + 1e-12).log10();
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v = (*v - mean) / 10.0);
        }
        out
    }
}

impl BackboneExtractor for ToyBackbone {
    fn n_layers(&self) -> usize {
        self.config.layers
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn sample_rate(&self) -> Option<u32> {
        Some(self.config.sample_rate)
    }

    fn extract(&self, _id: &str, waveform: &Waveform) -> Result<BackboneOutput> {
        if waveform.sample_rate != self.config.sample_rate {
            return Err(SsipError::Backbone(format!(
                "toy backbone expects {} Hz audio, got {} Hz",
                self.config.sample_rate, waveform.sample_rate
            )));
        }
        let frames = waveform.len() / self.config.frame_len;
        if frames == 0 {
            return Err(SsipError::DegenerateSignal(format!(
                "{} samples is shorter than one {}-sample frame",
                waveform.len(),
                self.config.frame_len
            )));
        }
        let d = self.config.dim;
        let mut layers = vec![self.filterbank(&waveform.samples, frames)];
        for (w, b) in &self.convs {
            let prev = layers.last().expect("at least one layer");
            let mut next = Matrix::zeros(frames, d);
            let mut window = vec![0.0; 3 * d];
            for t in 0..frames {
                for (k, dt) in [-1isize, 0, 1].iter().enumerate() {
                    let src = t as isize + dt;
                    let slot = &mut window[k * d..(k + 1) * d];
                    if src < 0 || src >= frames as isize {
                        slot.fill(0.0);
                    } else {
                        slot.copy_from_slice(prev.row(src as usize));
                    }
                }
                let row = next.row_mut(t);
                for (j, out) in row.iter_mut().enumerate() {
                    let mut acc = b[j];
                    for (i, x) in window.iter().enumerate() {
                        acc += x * w.get(i, j);
                    }
                    *out = acc.tanh();
                }
            }
            layers.push(next);
        }
        BackboneOutput::new(layers)
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"toy-backbone");
        for v in &self.kernels.data {
            h.update(v.to_le_bytes());
        }
        for (w, b) in &self.convs {
            for v in w.data.iter().chain(b) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Reads `<dir>/<id>.npy` arrays dumped by an external foundation model.
#[derive(Debug, Clone)]
pub struct FeatureStoreBackbone {
    dir: PathBuf,
    layers: usize,
    dim: usize,
}

impl FeatureStoreBackbone {
    pub fn new(dir: impl Into<PathBuf>, layers: usize, dim: usize) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(SsipError::Backbone(format!(
                "feature directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self { dir, layers, dim })
    }

    /// Directory from [`BACKBONE_DIR_ENV`], if set.
    pub fn from_env(layers: usize, dim: usize) -> Result<Self> {
        let dir = std::env::var_os(BACKBONE_DIR_ENV).ok_or_else(|| {
            SsipError::Backbone(format!("{BACKBONE_DIR_ENV} is not set"))
        })?;
        Self::new(PathBuf::from(dir), layers, dim)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn read_npy(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| SsipError::io(path, e))?;
    let npy = npyz::NpyFile::new(&bytes[..])
        .map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))?;
    if npy.order() != npyz::Order::C {
        return Err(SsipError::Format(format!("{}: Fortran-ordered arrays are not supported", path.display())));
    }
    let shape = npy.shape().to_vec();
    let bad = |e: std::io::Error| SsipError::Format(format!("{}: {e}", path.display()));
    let data = match npy.try_data::<f32>() {
        Ok(reader) => reader.map(|x| x.map(f64::from)).collect::<std::io::Result<Vec<f64>>>().map_err(bad)?,
        Err(npy) => match npy.try_data::<f64>() {
            Ok(reader) => reader.collect::<std::io::Result<Vec<f64>>>().map_err(bad)?,
            Err(npy) => {
                return Err(SsipError::Format(format!(
                    "{}: unsupported dtype {}",
                    path.display(),
                    npy.dtype().descr()
                )))
            }
        },
    };
    Ok((shape, data))
}

impl BackboneExtractor for FeatureStoreBackbone {
    fn n_layers(&self) -> usize {
        self.layers
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_rate(&self) -> Option<u32> {
        None
    }

    fn extract(&self, id: &str, _waveform: &Waveform) -> Result<BackboneOutput> {
        let path = self.dir.join(format!("{id}.npy"));
        if !path.exists() {
            return Err(SsipError::Backbone(format!("no precomputed features at {}", path.display())));
        }
        let (shape, data) = read_npy(&path)?;
        let [layers, frames, dim] = shape[..] else {
            return Err(SsipError::Shape(format!("{}: expected 3-d array, got {shape:?}", path.display())));
        };
        let (layers, frames, dim) = (layers as usize, frames as usize, dim as usize);
        if layers != self.layers || dim != self.dim {
            return Err(SsipError::Shape(format!(
                "{}: array is {layers} x {frames} x {dim}, configured {} layers of width {}",
                path.display(),
                self.layers,
                self.dim
            )));
        }
        if frames == 0 {
            return Err(SsipError::DegenerateSignal(format!("{}: zero frames", path.display())));
        }
        let per_layer = frames * dim;
        BackboneOutput::new(
            data.chunks_exact(per_layer)
                .map(|c| Matrix::from_vec(frames, dim, c.to_vec()))
                .collect(),
        )
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("feature-store:{}:{}", self.layers, self.dim));
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n).map(|i| 0.05 * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn toy_backbone_shapes() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let out = extract_backbone_features(&bb, "x", &tone(440.0, 0.5, 8000)).unwrap();
        assert_eq!(out.n_layers(), 4);
        assert_eq!(out.dim(), 16);
        assert_eq!(out.frames(), 4000 / 256);
        assert!(out.layers().iter().all(Matrix::all_finite));
    }

    #[test]
    fn toy_backbone_is_deterministic() {
        let cfg = ToyBackboneConfig::default();
        let a = ToyBackbone::new(cfg.clone()).unwrap();
        let b = ToyBackbone::new(cfg).unwrap();
        let w = tone(300.0, 0.3, 8000);
        assert_eq!(a.extract("x", &w).unwrap(), b.extract("x", &w).unwrap());
        assert_eq!(a.extract("x", &w).unwrap(), a.extract("x", &w).unwrap());
        assert_eq!(a.checksum(), b.checksum());
        let c = ToyBackbone::new(ToyBackboneConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn toy_backbone_separates_frequencies() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let lo = bb.extract("a", &tone(200.0, 0.3, 8000)).unwrap();
        let hi = bb.extract("b", &tone(2000.0, 0.3, 8000)).unwrap();
        let diff: f64 = lo.layers()[0].row(1).iter().zip(hi.layers()[0].row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1.0, "filterbank should respond to tone frequency ({diff})");
    }

    #[test]
    fn configurable_layers_and_width() {
        let bb = ToyBackbone::new(ToyBackboneConfig { layers: 2, dim: 8, ..Default::default() }).unwrap();
        let out = bb.extract("x", &tone(500.0, 0.1, 8000)).unwrap();
        assert_eq!((out.n_layers(), out.dim()), (2, 8));
    }

    #[test]
    fn short_audio_and_wrong_rate_are_rejected() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let short = Waveform::new(vec![0.1; 100], 8000).unwrap();
        assert!(matches!(bb.extract("x", &short), Err(SsipError::DegenerateSignal(_))));
        assert!(matches!(bb.extract("x", &tone(100.0, 0.5, 16_000)), Err(SsipError::Backbone(_))));
    }

    #[test]
    fn feature_store_reads_npy() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..2 * 3 * 4).map(|x| x as f32 * 0.5).collect();
        let mut buf = Vec::new();
        {
            use npyz::WriterBuilder;
            let mut w = npyz::WriteOptions::<f32>::new()
                .default_dtype()
                .shape(&[2, 3, 4])
                .writer(&mut buf)
                .begin_nd()
                .unwrap();
            w.extend(data.iter().copied()).unwrap();
            w.finish().unwrap();
        }
        std::fs::write(dir.path().join("S1.npy"), &buf).unwrap();
        let store = FeatureStoreBackbone::new(dir.path(), 2, 4).unwrap();
        let dummy = Waveform::new(vec![0.0], 16_000).unwrap();
        let out = extract_backbone_features(&store, "S1", &dummy).unwrap();
        assert_eq!((out.n_layers(), out.frames(), out.dim()), (2, 3, 4));
        assert_eq!(out.layers()[1].get(0, 1), 6.5);
        assert!(matches!(store.extract("missing", &dummy), Err(SsipError::Backbone(_))));
        let wrong = FeatureStoreBackbone::new(dir.path(), 3, 4).unwrap();
        assert!(matches!(wrong.extract("S1", &dummy), Err(SsipError::Shape(_))));
    }
}
