//! Audio I/O, RMS level measurement and presentation-level normalization.
//!
//! Digital audio carries no absolute sound pressure level, so every level
//! operation takes a [`LevelReference`] that pins the SPL of a full-scale
//! RMS of 1.0. Only level differences enter the score calibration, so the
//! exact constant matters little as long as it is used consistently.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsipError};

/// Presentation level every waveform is normalized to before feature extraction.
pub const TARGET_LEVEL_DB_SPL: f64 = 65.0;

/// A mono waveform with samples on the full-scale [-1, 1] convention.
///
/// Samples may exceed the unit range after gain is applied; nothing here clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SsipError::Format("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|x| x * x).sum();
        (energy / self.samples.len() as f64).sqrt()
    }
}

/// Maps digital full-scale RMS to dB SPL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelReference {
    /// dB SPL assigned to a waveform whose RMS amplitude equals 1.0.
    pub spl_at_full_scale_rms: f64,
}

impl LevelReference {
    pub fn new(spl_at_full_scale_rms: f64) -> Result<Self> {
        if !spl_at_full_scale_rms.is_finite() {
            return Err(SsipError::Config(
                "level reference must be a finite dB value".into(),
            ));
        }
        Ok(Self {
            spl_at_full_scale_rms,
        })
    }
}

impl Default for LevelReference {
    fn default() -> Self {
        Self {
            spl_at_full_scale_rms: 100.0,
        }
    }
}

/// RMS level of `w` in dB SPL under `reference`.
pub fn rms_level_db(w: &Waveform, reference: LevelReference) -> Result<f64> {
    if w.is_empty() {
        return Err(SsipError::DegenerateSignal("empty waveform".into()));
    }
    let rms = w.rms();
    if rms == 0.0 {
        return Err(SsipError::DegenerateSignal(
            "all-zero waveform has no level".into(),
        ));
    }
    if !rms.is_finite() {
        return Err(SsipError::DegenerateSignal(
            "waveform contains non-finite samples".into(),
        ));
    }
    Ok(reference.spl_at_full_scale_rms + 20.0 * rms.log10())
}

/// Linear gain that moves a waveform measured at `current_db` to `target_db`.
pub fn gain_for(current_db: f64, target_db: f64) -> f64 {
    10f64.powf((target_db - current_db) / 20.0)
}

/// Scale `w` so that its RMS level equals `target_db` dB SPL.
pub fn normalize_to_spl(w: &Waveform, target_db: f64, reference: LevelReference) -> Result<Waveform> {
    let level = rms_level_db(w, reference)?;
    let gain = gain_for(level, target_db);
    if gain == 1.0 {
        return Ok(w.clone());
    }
    Ok(Waveform {
        samples: w.samples.iter().map(|x| x * gain).collect(),
        sample_rate: w.sample_rate,
    })
}

/// On-disk sample encoding; normalized cache files mirror the source encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleEncoding {
    Int16,
    Int24,
    Int32,
    Float32,
}

impl SampleEncoding {
    fn spec(self, sample_rate: u32) -> hound::WavSpec {
        let (bits_per_sample, sample_format) = match self {
            SampleEncoding::Int16 => (16, hound::SampleFormat::Int),
            SampleEncoding::Int24 => (24, hound::SampleFormat::Int),
            SampleEncoding::Int32 => (32, hound::SampleFormat::Int),
            SampleEncoding::Float32 => (32, hound::SampleFormat::Float),
        };
        hound::WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample,
            sample_format,
        }
    }
}

fn map_hound(path: &Path, err: hound::Error) -> SsipError {
    match err {
        hound::Error::IoError(e) => SsipError::io(path, e),
        other => SsipError::Format(format!("{}: {other}", path.display())),
    }
}

/// Load a PCM WAV file, averaging multichannel audio down to mono.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    load_waveform_with_encoding(path).map(|(w, _)| w)
}

/// Like [`load_waveform`] but also reports the source sample encoding.
pub fn load_waveform_with_encoding(path: impl AsRef<Path>) -> Result<(Waveform, SampleEncoding)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SsipError::io(path, e))?;
    let mut reader =
        hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(SsipError::Format(format!("{}: zero channels", path.display())));
    }

    let (interleaved, encoding): (Vec<f64>, SampleEncoding) =
        match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Float, 32) => (
                reader
                    .samples::<f32>()
                    .map(|s| s.map(f64::from))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| map_hound(path, e))?,
                SampleEncoding::Float32,
            ),
            (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
                let full_scale = (1u64 << (bits - 1)) as f64;
                let encoding = match bits {
                    16 => SampleEncoding::Int16,
                    24 => SampleEncoding::Int24,
                    _ => SampleEncoding::Int32,
                };
                (
                    reader
                        .samples::<i32>()
                        .map(|s| s.map(|v| v as f64 / full_scale))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| map_hound(path, e))?,
                    encoding,
                )
            }
            (format, bits) => {
                return Err(SsipError::Format(format!(
                    "{}: unsupported sample format {format:?} with {bits} bits",
                    path.display()
                )))
            }
        };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Ok((Waveform::new(samples, spec.sample_rate)?, encoding))
}

/// Write a mono WAV file. Integer encodings saturate at full scale.
pub fn write_waveform(path: impl AsRef<Path>, w: &Waveform, encoding: SampleEncoding) -> Result<()> {
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, encoding.spec(w.sample_rate))
        .map_err(|e| map_hound(path, e))?;
    match encoding {
        SampleEncoding::Float32 => {
            for &s in &w.samples {
                writer.write_sample(s as f32).map_err(|e| map_hound(path, e))?;
            }
        }
        SampleEncoding::Int16 | SampleEncoding::Int24 | SampleEncoding::Int32 => {
            let bits = encoding.spec(w.sample_rate).bits_per_sample;
            let full_scale = (1u64 << (bits - 1)) as f64;
            let (lo, hi) = (-full_scale, full_scale - 1.0);
            for &s in &w.samples {
                let v = (s * full_scale).round().clamp(lo, hi) as i32;
                writer.write_sample(v).map_err(|e| map_hound(path, e))?;
            }
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> LevelReference {
        LevelReference::default()
    }

    fn sine(amplitude: f64, freq: f64, sample_rate: u32, periods: usize) -> Waveform {
        let per_period = sample_rate as f64 / freq;
        let n = (per_period * periods as f64).round() as usize;
        let samples = (0..n)
            .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate as f64).sin())
            .collect();
        Waveform::new(samples, sample_rate).unwrap()
    }

    #[test]
    fn constant_full_scale_is_reference_level() {
        let w = Waveform::new(vec![1.0; 1000], 16_000).unwrap();
        assert_eq!(rms_level_db(&w, reference()).unwrap(), 100.0);
    }

    #[test]
    fn unit_sine_level_matches_direct_rms() {
        // 100 Hz at 16 kHz: exactly 160 samples per period.
        let w = sine(1.0, 100.0, 16_000, 50);
        let direct = (w.samples.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        let oracle = 100.0 + 20.0 * direct.log10();
        let level = rms_level_db(&w, reference()).unwrap();
        assert!((level - oracle).abs() < 1e-12);
        assert!((level - 96.9897).abs() < 0.01, "{level}");
    }

    #[test]
    fn zero_and_empty_waveforms_are_degenerate() {
        let zero = Waveform::new(vec![0.0; 64], 8000).unwrap();
        assert!(matches!(rms_level_db(&zero, reference()), Err(SsipError::DegenerateSignal(_))));
        let empty = Waveform::new(vec![], 8000).unwrap();
        assert!(matches!(rms_level_db(&empty, reference()), Err(SsipError::DegenerateSignal(_))));
        assert!(matches!(
            normalize_to_spl(&zero, 65.0, reference()),
            Err(SsipError::DegenerateSignal(_))
        ));
    }

    #[test]
    fn zero_sample_rate_rejected() {
        assert!(Waveform::new(vec![0.1], 0).is_err());
    }

    #[test]
    fn normalize_identity_at_target() {
        let w = sine(1.0, 100.0, 16_000, 10);
        let at_65 = normalize_to_spl(&w, 65.0, reference()).unwrap();
        let again = normalize_to_spl(&at_65, 65.0, reference()).unwrap();
        let level = rms_level_db(&again, reference()).unwrap();
        assert!((level - 65.0).abs() < 1e-9);
        for (a, b) in at_65.samples.iter().zip(&again.samples) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn normalize_halves_signal_six_db_above_target() {
        // Constant signal at 71.0206 dB SPL: amplitude 10^((71.0206 - 100) / 20).
        let amp = 10f64.powf((71.020_599_913_279_62 - 100.0) / 20.0);
        let w = Waveform::new(vec![amp; 256], 8000).unwrap();
        let out = normalize_to_spl(&w, 65.0, reference()).unwrap();
        for (o, i) in out.samples.iter().zip(&w.samples) {
            assert!((o / i - 0.5).abs() < 1e-9);
        }
        // Oracle: recompute RMS after scaling.
        assert!((out.rms() / w.rms() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn normalize_boosts_signal_twenty_db_below_target() {
        // Peak chosen so the sine's RMS sits at 45 dB SPL.
        let amp = 2f64.sqrt() * 10f64.powf((45.0 - 100.0) / 20.0);
        let w = sine(amp, 250.0, 16_000, 20);
        assert!((rms_level_db(&w, reference()).unwrap() - 45.0).abs() < 1e-9);
        let out = normalize_to_spl(&w, 65.0, reference()).unwrap();
        assert!((out.rms() / w.rms() - 10.0).abs() < 1e-9);
        assert_eq!(out.sample_rate, w.sample_rate);
    }

    #[test]
    fn wav_round_trip_int16_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 32767, -32768, 100] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let (w, enc) = load_waveform_with_encoding(&path).unwrap();
        assert_eq!(enc, SampleEncoding::Int16);
        assert_eq!(w.samples[1], 32767.0 / 32768.0);
        assert_eq!(w.samples[2], -1.0);
    }

    #[test]
    fn stereo_antiphase_averages_to_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            let x = (i as f32 * 0.1).sin() * 0.5;
            wr.write_sample(x).unwrap();
            wr.write_sample(-x).unwrap();
        }
        wr.finalize().unwrap();
        let w = load_waveform(&path).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn missing_file_is_io_error_and_garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_waveform(dir.path().join("nope.wav")),
            Err(SsipError::Io { .. })
        ));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"definitely not a RIFF file").unwrap();
        assert!(matches!(load_waveform(&junk), Err(SsipError::Format(_))));
    }

    fn arb_waveform() -> impl Strategy<Value = Waveform> {
        prop::collection::vec(-1.0f64..1.0, 8..256)
            .prop_filter("needs energy", |v| v.iter().any(|x| x.abs() > 1e-3))
            .prop_map(|v| Waveform::new(v, 16_000).unwrap())
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(w in arb_waveform(), target in 30.0f64..100.0) {
            let once = normalize_to_spl(&w, target, reference()).unwrap();
            let twice = normalize_to_spl(&once, target, reference()).unwrap();
            for (a, b) in once.samples.iter().zip(&twice.samples) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn level_is_scale_covariant(w in arb_waveform(), k in 1e-3f64..1e3) {
            let scaled = Waveform::new(w.samples.iter().map(|x| x * k).collect(), w.sample_rate).unwrap();
            let lhs = rms_level_db(&scaled, reference()).unwrap();
            let rhs = rms_level_db(&w, reference()).unwrap() + 20.0 * k.log10();
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn normalization_preserves_sign_pattern_and_length(w in arb_waveform(), target in 30.0f64..100.0) {
            let out = normalize_to_spl(&w, target, reference()).unwrap();
            prop_assert_eq!(out.len(), w.len());
            for (a, b) in out.samples.iter().zip(&w.samples) {
                prop_assert_eq!(a.signum(), b.signum());
                prop_assert_eq!(*a == 0.0, *b == 0.0);
            }
            let level = rms_level_db(&out, reference()).unwrap();
            prop_assert!((level - target).abs() <= 1e-6);
        }
    }
}
