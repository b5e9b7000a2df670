//! Deterministic synthetic dataset in the CPC directory layout.
//!
//! Each signal is a tone whose pitch encodes a hidden statistic
//! `s ∈ [0, 1]`. Each listener scores a signal with their own affine
//! function of `s` at the normalized level; the offset drops with hearing
//! loss. Raw scores are written at the signal's own presentation level,
//! so `prepare` has real calibration work to undo.
//!
//! Layout written under the output directory:
//!
//! ```text
//! metadata/listeners.json   {"L0001": {"audiogram_cfs": [...], "audiogram_levels_l": [...], "audiogram_levels_r": [...]}}
//! metadata/scores.json      [{"signal": "S0001_L0001_E001", "listener": "L0001", "system": "E001", "correctness": 61.2}]
//! signals/<signal>.wav      stereo 16-bit PCM
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{curve_value, CalibrationCurveSet};
use crate::error::{Result, SsipError};
use crate::fsutil::{create_dir_all, write_json_pretty};
use crate::signal::{LevelReference, TARGET_LEVEL_DB_SPL};

pub const AUDIOGRAM_FREQUENCIES: [u32; 8] = [250, 500, 1000, 2000, 3000, 4000, 6000, 8000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub listeners: usize,
    pub samples_per_listener: usize,
    pub sample_rate: u32,
    pub min_duration: f64,
    pub max_duration: f64,
    /// Standard deviation of per-sample score noise (percentage points).
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            listeners: 27,
            samples_per_listener: 40,
            sample_rate: 8000,
            min_duration: 0.3,
            max_duration: 0.6,
            score_noise: 3.0,
            seed: 7,
        }
    }
}

/// Hidden generating parameters of one listener.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerTruth {
    pub listener_id: String,
    pub hearing_loss: f64,
    /// Score at `s = 0.5`, at the normalized level.
    pub offset: f64,
    /// Score change per unit of `s`, divided by 100.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTruth {
    pub signal: String,
    pub listener_id: String,
    pub statistic: f64,
    pub level: f64,
    /// Score at the normalized level, before clamping of the raw score.
    pub normalized_score: f64,
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub listeners: Vec<ListenerTruth>,
    pub signals: Vec<SignalTruth>,
}

#[derive(Serialize)]
struct ListenerRecord {
    audiogram_cfs: Vec<u32>,
    audiogram_levels_l: Vec<f64>,
    audiogram_levels_r: Vec<f64>,
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    signal: &'a str,
    listener: &'a str,
    system: &'a str,
    correctness: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn tone(statistic: f64, level: f64, duration: f64, snr_db: f64, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (duration * sample_rate as f64).round() as usize;
    let f0 = 150.0 * 2f64.powf(4.0 * statistic);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let sr = sample_rate as f64;
    let clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let w = std::f64::consts::TAU * f0 * t + phase;
            w.sin() + 0.3 * (2.0 * w).sin()
        })
        .collect();
    let clean_rms = (clean.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let noise = Normal::new(0.0, clean_rms * 10f64.powf(-snr_db / 20.0)).expect("finite noise scale");
    let mixed: Vec<f64> = clean.iter().map(|x| x + noise.sample(rng)).collect();
    let rms = (mixed.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    let target = 10f64.powf((level - LevelReference::default().spl_at_full_scale_rms) / 20.0);
    mixed.into_iter().map(|x| x * target / rms).collect()
}

/// Write a synthetic CPC-layout dataset to `dir` and return its hidden truth.
pub fn generate(dir: impl AsRef<Path>, cfg: &SynthConfig, curves: &CalibrationCurveSet) -> Result<SynthTruth> {
    let dir = dir.as_ref();
    if cfg.listeners == 0 || cfg.samples_per_listener == 0 {
        return Err(SsipError::Config("synthetic dataset needs listeners and samples".into()));
    }
    if !(cfg.min_duration > 0.0 && cfg.max_duration >= cfg.min_duration) {
        return Err(SsipError::Config("invalid synthetic duration range".into()));
    }
    let meta = dir.join("metadata");
    let signals_dir = dir.join("signals");
    create_dir_all(&meta)?;
    create_dir_all(&signals_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: cfg.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };

    let mut listeners_json = BTreeMap::new();
    let mut scores_json = Vec::new();
    let mut truth = SynthTruth {
        listeners: Vec::new(),
        signals: Vec::new(),
    };
    for l in 0..cfg.listeners {
        let listener_id = format!("L{:04}", l + 1);
        let hearing_loss = rng.gen_range(15.0..65.0);
        // Sloping loss: better at low frequencies, worse at high ones.
        let shape = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 20.0];
        let left: Vec<f64> = shape.iter().map(|d| round2(hearing_loss + d + 2.0 * unit.sample(&mut rng))).collect();
        let right: Vec<f64> = shape.iter().map(|d| round2(hearing_loss + d + 2.0 * unit.sample(&mut rng))).collect();
        let avg = |i: usize| (left[i] + right[i]) / 2.0;
        let hearing_loss = (avg(1) + avg(2) + avg(3)) / 3.0;
        listeners_json.insert(
            listener_id.clone(),
            ListenerRecord {
                audiogram_cfs: AUDIOGRAM_FREQUENCIES.to_vec(),
                audiogram_levels_l: left,
                audiogram_levels_r: right,
            },
        );
        let offset = 85.0 - 0.8 * hearing_loss + 8.0 * unit.sample(&mut rng);
        let slope = rng.gen_range(0.45..0.65);
        truth.listeners.push(ListenerTruth {
            listener_id: listener_id.clone(),
            hearing_loss,
            offset,
            slope,
        });

        for k in 0..cfg.samples_per_listener {
            let system = format!("E{:03}", k % 10 + 1);
            let signal = format!("S{:04}_{listener_id}_{system}", k + 1);
            let statistic: f64 = rng.gen();
            let level = 60.0 + 0.3 * hearing_loss + 3.0 * unit.sample(&mut rng);
            let duration = rng.gen_range(cfg.min_duration..=cfg.max_duration);
            let snr = rng.gen_range(10.0..30.0);
            let samples = tone(statistic, level, duration, snr, cfg.sample_rate, &mut rng);

            let normalized_score = (offset + slope * (statistic - 0.5) * 100.0 + cfg.score_noise * unit.sample(&mut rng))
                .clamp(0.0, 100.0);
            let raw = normalized_score - curve_value(curves, hearing_loss, TARGET_LEVEL_DB_SPL)
                + curve_value(curves, hearing_loss, level);
            let raw_score = round2(raw.clamp(0.0, 100.0));

            let path = signals_dir.join(format!("{signal}.wav"));
            let mut w = hound::WavWriter::create(&path, spec).map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))?;
            for x in &samples {
                let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                for _ in 0..2 {
                    w.write_sample(v).map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))?;
                }
            }
            w.finalize().map_err(|e| SsipError::Format(format!("{}: {e}", path.display())))?;

            truth.signals.push(SignalTruth {
                signal: signal.clone(),
                listener_id: listener_id.clone(),
                statistic,
                level,
                normalized_score,
                raw_score,
            });
            scores_json.push((signal, listener_id.clone(), system, raw_score));
        }
    }

    write_json_pretty(&meta.join("listeners.json"), &listeners_json)?;
    let records: Vec<ScoreRecord> = scores_json
        .iter()
        .map(|(signal, listener, system, correctness)| ScoreRecord {
            signal,
            listener,
            system,
            correctness: *correctness,
        })
        .collect();
    write_json_pretty(&meta.join("scores.json"), &records)?;
    write_json_pretty(&meta.join("truth.json"), &truth)?;
    Ok(truth)
}
