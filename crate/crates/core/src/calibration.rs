//! Score calibration that removes the audiogram information carried by
//! presentation level.
//!
//! A score `s0` measured at presentation level `l0` is moved to level `l1`
//! along the listener's level–intelligibility curve:
//! `s1 = s0 + C_hl(l1) - C_hl(l0)`, where `hl` is the listener's average
//! hearing loss at 500/1000/2000 Hz. All listeners are treated as having a
//! conductive loss, so `C_hl` is a single family indexed by `hl`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SsipError};

/// Frequencies whose thresholds are averaged into the hearing-loss index.
pub const AVERAGE_HL_FREQUENCIES: [u32; 3] = [500, 1000, 2000];

const CURVES_HEADER: &str = "ssip-curves 1";
const DEFAULT_CURVES: &str = include_str!("../data/default_curves.txt");

/// Intelligibility percentage, or the `-1` sentinel for "unknown".
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Score(f64);

impl Score {
    pub const UNKNOWN: Score = Score(-1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value == -1.0 || (0.0..=100.0).contains(&value) {
            Ok(Score(value))
        } else {
            Err(SsipError::Format(format!(
                "score {value} outside [0, 100] and not the -1 sentinel"
            )))
        }
    }

    /// Known score, saturated into [0, 100].
    pub fn clamped(value: f64) -> Self {
        Score(value.clamp(0.0, 100.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_known(self) -> bool {
        self.0 != -1.0
    }

    pub fn known(self) -> Option<f64> {
        self.is_known().then_some(self.0)
    }
}

impl TryFrom<f64> for Score {
    type Error = SsipError;
    fn try_from(v: f64) -> Result<Self> {
        Score::new(v)
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> f64 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_known() {
            write!(f, "{}", self.0)
        } else {
            f.write_str("unknown")
        }
    }
}

/// Pure-tone thresholds in dB HL keyed by frequency in Hz.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Audiogram {
    pub thresholds: BTreeMap<u32, f64>,
}

impl Audiogram {
    pub fn new(thresholds: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let thresholds: BTreeMap<u32, f64> = thresholds.into_iter().collect();
        for (&f, &v) in &thresholds {
            if f == 0 || !v.is_finite() {
                return Err(SsipError::Format(format!(
                    "invalid audiogram entry {f} Hz -> {v} dB HL"
                )));
            }
        }
        Ok(Self { thresholds })
    }

    /// Thresholds at `frequencies`, in order; used as the baseline condition vector.
    pub fn vector(&self, frequencies: &[u32]) -> Result<Vec<f64>> {
        frequencies
            .iter()
            .map(|f| {
                self.thresholds
                    .get(f)
                    .copied()
                    .ok_or(SsipError::IncompleteAudiogram {
                        record: None,
                        missing: *f,
                    })
            })
            .collect()
    }
}

/// Mean threshold over 500, 1000 and 2000 Hz.
pub fn average_hearing_loss(audiogram: &Audiogram) -> Result<f64> {
    let values = audiogram.vector(&AVERAGE_HL_FREQUENCIES)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One monotone piecewise-linear level → intelligibility function.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCurve {
    pub hearing_loss: f64,
    /// (level dB SPL, intelligibility %) with strictly increasing levels.
    pub breakpoints: Vec<(f64, f64)>,
}

impl LevelCurve {
    pub fn new(hearing_loss: f64, breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if !hearing_loss.is_finite() {
            return Err(SsipError::InvalidCurve("non-finite hearing-loss index".into()));
        }
        if breakpoints.len() < 2 {
            return Err(SsipError::InvalidCurve(format!(
                "curve at HL {hearing_loss} needs at least two breakpoints"
            )));
        }
        for &(level, pct) in &breakpoints {
            if !level.is_finite() || !pct.is_finite() || !(0.0..=100.0).contains(&pct) {
                return Err(SsipError::InvalidCurve(format!(
                    "curve at HL {hearing_loss}: breakpoint ({level}, {pct}) out of range"
                )));
            }
        }
        for pair in breakpoints.windows(2) {
            let ((l0, p0), (l1, p1)) = (pair[0], pair[1]);
            if l1 <= l0 {
                return Err(SsipError::InvalidCurve(format!(
                    "curve at HL {hearing_loss}: levels not strictly increasing at {l1}"
                )));
            }
            if p1 < p0 {
                return Err(SsipError::InvalidCurve(format!(
                    "curve at HL {hearing_loss}: decreasing segment {l0}->{l1} dB ({p0}->{p1} %)"
                )));
            }
        }
        Ok(Self {
            hearing_loss,
            breakpoints,
        })
    }

    /// Linear interpolation, clamped to the end values outside the table.
    pub fn eval(&self, level: f64) -> f64 {
        let bp = &self.breakpoints;
        let (first, last) = (bp[0], bp[bp.len() - 1]);
        if level <= first.0 {
            return first.1;
        }
        if level >= last.0 {
            return last.1;
        }
        // First breakpoint strictly above `level`; guaranteed in 1..len.
        let hi = bp.partition_point(|&(l, _)| l <= level);
        let (l0, p0) = bp[hi - 1];
        let (l1, p1) = bp[hi];
        let w = (level - l0) / (l1 - l0);
        p0 + w * (p1 - p0)
    }

    /// Steepest segment slope in %/dB.
    pub fn max_slope(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .fold(0.0, f64::max)
    }
}

/// Family of level curves indexed by average hearing loss, sorted by HL.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurveSet {
    curves: Vec<LevelCurve>,
}

impl CalibrationCurveSet {
    pub fn new(mut curves: Vec<LevelCurve>) -> Result<Self> {
        if curves.len() < 2 {
            return Err(SsipError::InvalidCurve(format!(
                "need at least two hearing-loss curves, got {}",
                curves.len()
            )));
        }
        curves.sort_by(|a, b| a.hearing_loss.total_cmp(&b.hearing_loss));
        if let Some(w) = curves.windows(2).find(|w| w[0].hearing_loss == w[1].hearing_loss) {
            return Err(SsipError::InvalidCurve(format!(
                "duplicate hearing-loss index {}",
                w[0].hearing_loss
            )));
        }
        Ok(Self { curves })
    }

    /// Non-authoritative curves shipped with the crate.
    pub fn builtin_default() -> Self {
        parse_curves(DEFAULT_CURVES).expect("shipped default curve file is valid")
    }

    pub fn builtin_default_text() -> &'static str {
        DEFAULT_CURVES
    }

    pub fn curves(&self) -> &[LevelCurve] {
        &self.curves
    }

    /// SHA-256 over the exact curve values, for provenance records.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.curves {
            h.update(c.hearing_loss.to_le_bytes());
            h.update((c.breakpoints.len() as u64).to_le_bytes());
            for (l, s) in &c.breakpoints {
                h.update(l.to_le_bytes());
                h.update(s.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Upper bound on |dC/dHL| between adjacent curves, in %/dB.
    pub fn hl_lipschitz_bound(&self) -> f64 {
        self.curves
            .windows(2)
            .map(|w| 100.0 / (w[1].hearing_loss - w[0].hearing_loss))
            .fold(0.0, f64::max)
    }

    pub fn level_lipschitz_bound(&self) -> f64 {
        self.curves.iter().map(LevelCurve::max_slope).fold(0.0, f64::max)
    }
}

/// Evaluate `C_hl(level)`, bilinear with edge clamping on both axes.
pub fn curve_value(curves: &CalibrationCurveSet, hl: f64, level: f64) -> f64 {
    let cs = &curves.curves;
    let (first, last) = (&cs[0], &cs[cs.len() - 1]);
    if hl <= first.hearing_loss {
        return first.eval(level);
    }
    if hl >= last.hearing_loss {
        return last.eval(level);
    }
    let hi = cs.partition_point(|c| c.hearing_loss <= hl);
    let (lo_curve, hi_curve) = (&cs[hi - 1], &cs[hi]);
    let w = (hl - lo_curve.hearing_loss) / (hi_curve.hearing_loss - lo_curve.hearing_loss);
    let (a, b) = (lo_curve.eval(level), hi_curve.eval(level));
    a + w * (b - a)
}

/// Move a score measured at level `l0` to presentation level `l1`.
///
/// The result is clamped to [0, 100].
pub fn calibrate_score(
    s0: Score,
    l0: f64,
    l1: f64,
    hl: f64,
    curves: &CalibrationCurveSet,
) -> Result<Score> {
    let s = s0.known().ok_or(SsipError::UnknownScore)?;
    if !(l0.is_finite() && l1.is_finite() && hl.is_finite()) {
        return Err(SsipError::Range(format!(
            "calibration inputs must be finite (l0={l0}, l1={l1}, hl={hl})"
        )));
    }
    if l0 == l1 {
        return Ok(s0);
    }
    let shifted = s + curve_value(curves, hl, l1) - curve_value(curves, hl, l0);
    Ok(Score::clamped(shifted))
}

/// Parse the `ssip-curves 1` text format.
pub fn parse_curves(text: &str) -> Result<CalibrationCurveSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    match lines.next() {
        Some((_, header)) if header == CURVES_HEADER => {}
        Some((n, other)) => {
            return Err(SsipError::Format(format!(
                "line {n}: expected header '{CURVES_HEADER}', found '{other}'"
            )))
        }
        None => return Err(SsipError::Format("empty curve file".into())),
    }

    let parse_num = |n: usize, tok: &str| -> Result<f64> {
        tok.parse::<f64>()
            .map_err(|_| SsipError::Format(format!("line {n}: '{tok}' is not a number")))
    };

    let mut pending: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for (n, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["curve", hl] => pending.push((parse_num(n, hl)?, Vec::new())),
            [level, pct] => {
                let current = pending.last_mut().ok_or_else(|| {
                    SsipError::Format(format!("line {n}: breakpoint before any 'curve' line"))
                })?;
                current.1.push((parse_num(n, level)?, parse_num(n, pct)?));
            }
            _ => return Err(SsipError::Format(format!("line {n}: cannot parse '{line}'"))),
        }
    }
    if pending.is_empty() {
        return Err(SsipError::Format("curve file defines no curves".into()));
    }
    let curves = pending
        .into_iter()
        .map(|(hl, bp)| LevelCurve::new(hl, bp))
        .collect::<Result<Vec<_>>>()?;
    CalibrationCurveSet::new(curves)
}

pub fn load_curves(path: impl AsRef<Path>) -> Result<CalibrationCurveSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SsipError::io(path, e))?;
    parse_curves(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_curves() -> CalibrationCurveSet {
        CalibrationCurveSet::new(vec![
            LevelCurve::new(0.0, vec![(40.0, 20.0), (60.0, 40.0), (80.0, 90.0)]).unwrap(),
            LevelCurve::new(40.0, vec![(40.0, 0.0), (60.0, 60.0), (80.0, 80.0)]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn average_hl_is_mean_of_three_frequencies() {
        let a = Audiogram::new([(250, 5.0), (500, 40.0), (1000, 50.0), (2000, 60.0)]).unwrap();
        assert_eq!(average_hearing_loss(&a).unwrap(), 50.0);
        let z = Audiogram::new([(500, 0.0), (1000, 0.0), (2000, 0.0)]).unwrap();
        assert_eq!(average_hearing_loss(&z).unwrap(), 0.0);
        let missing = Audiogram::new([(500, 10.0), (1000, 20.0)]).unwrap();
        assert!(matches!(
            average_hearing_loss(&missing),
            Err(SsipError::IncompleteAudiogram { missing: 2000, .. })
        ));
    }

    #[test]
    fn curve_lookup_exact_midpoint_and_clamp() {
        let cs = two_curves();
        assert_eq!(curve_value(&cs, 0.0, 60.0), 40.0);
        assert_eq!(curve_value(&cs, 40.0, 60.0), 60.0);
        // Midway between HL curves valued 40 and 60 at 60 dB.
        assert_eq!(curve_value(&cs, 20.0, 60.0), 50.0);
        assert_eq!(curve_value(&cs, 0.0, 120.0), 90.0);
        assert_eq!(curve_value(&cs, 0.0, -10.0), 20.0);
        assert_eq!(curve_value(&cs, -30.0, 60.0), 40.0);
        assert_eq!(curve_value(&cs, 99.0, 60.0), 60.0);
        assert_eq!(curve_value(&cs, 0.0, 50.0), 30.0);
    }

    #[test]
    fn calibrate_formula_cases() {
        let cs = two_curves();
        let s = Score::new(50.0).unwrap();
        assert_eq!(calibrate_score(s, 63.0, 63.0, 17.0, &cs).unwrap(), s);

        // C(l1) = 70 and C(l0) = 55 on a single-slope curve pair.
        let flat = CalibrationCurveSet::new(vec![
            LevelCurve::new(0.0, vec![(0.0, 0.0), (100.0, 100.0)]).unwrap(),
            LevelCurve::new(50.0, vec![(0.0, 0.0), (100.0, 100.0)]).unwrap(),
        ])
        .unwrap();
        let oracle = |s0: f64, l0: f64, l1: f64| (s0 + l1 - l0).clamp(0.0, 100.0);
        let out = calibrate_score(s, 55.0, 70.0, 10.0, &flat).unwrap();
        assert!((out.value() - 65.0).abs() < 1e-12);
        assert_eq!(out.value(), oracle(50.0, 55.0, 70.0));
        let high = calibrate_score(Score::new(95.0).unwrap(), 40.0, 60.0, 10.0, &flat).unwrap();
        assert_eq!(high.value(), 100.0);
        assert_eq!(high.value(), oracle(95.0, 40.0, 60.0));
    }

    #[test]
    fn sentinel_cannot_be_calibrated() {
        let cs = two_curves();
        assert!(matches!(
            calibrate_score(Score::UNKNOWN, 60.0, 65.0, 10.0, &cs),
            Err(SsipError::UnknownScore)
        ));
    }

    #[test]
    fn score_range_validation() {
        assert!(Score::new(101.0).is_err());
        assert!(Score::new(-0.5).is_err());
        assert!(!Score::new(-1.0).unwrap().is_known());
        assert!(Score::new(0.0).unwrap().is_known());
        let s: Score = serde_json::from_str("42.5").unwrap();
        assert_eq!(s.value(), 42.5);
        assert!(serde_json::from_str::<Score>("250").is_err());
    }

    #[test]
    fn default_curves_parse_with_at_least_four_indices() {
        let cs = CalibrationCurveSet::builtin_default();
        assert!(cs.curves().len() >= 4);
        for c in cs.curves() {
            assert!(c.breakpoints.windows(2).all(|w| w[1].1 >= w[0].1));
        }
    }

    #[test]
    fn parser_rejects_bad_files() {
        assert!(matches!(parse_curves(""), Err(SsipError::Format(_))));
        assert!(matches!(parse_curves("# only a comment\n"), Err(SsipError::Format(_))));
        assert!(matches!(parse_curves("wrong header\n"), Err(SsipError::Format(_))));
        let decreasing = "ssip-curves 1\ncurve 0\n40 10\n60 5\ncurve 20\n40 0\n60 10\n";
        assert!(matches!(parse_curves(decreasing), Err(SsipError::InvalidCurve(_))));
        let single = "ssip-curves 1\ncurve 0\n40 10\n60 50\n";
        assert!(matches!(parse_curves(single), Err(SsipError::InvalidCurve(_))));
        let orphan = "ssip-curves 1\n40 10\n";
        assert!(matches!(parse_curves(orphan), Err(SsipError::Format(_))));
        let ok = "ssip-curves 1\ncurve 0 # normal\n40 10\n60 50\n\ncurve 30\n40 0\n60 20\n";
        assert_eq!(parse_curves(ok).unwrap().curves().len(), 2);
    }

    #[test]
    fn load_curves_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, CalibrationCurveSet::builtin_default_text()).unwrap();
        assert_eq!(load_curves(&p).unwrap(), CalibrationCurveSet::builtin_default());
        assert!(matches!(load_curves(dir.path().join("x")), Err(SsipError::Io { .. })));
    }

    proptest! {
        #[test]
        fn calibration_round_trip_and_additivity(
            s in 20.0f64..80.0,
            l0 in 40.0f64..90.0,
            l1 in 40.0f64..90.0,
            l2 in 40.0f64..90.0,
            hl in 0.0f64..80.0,
        ) {
            let cs = CalibrationCurveSet::builtin_default();
            let unclamped = |from: f64, to: f64, v: f64| v + curve_value(&cs, hl, to) - curve_value(&cs, hl, from);
            let fwd = unclamped(l0, l1, s);
            prop_assume!((0.0..=100.0).contains(&fwd));
            let s0 = Score::new(s).unwrap();
            let s1 = calibrate_score(s0, l0, l1, hl, &cs).unwrap();
            let back = calibrate_score(s1, l1, l0, hl, &cs).unwrap();
            prop_assert!((back.value() - s).abs() <= 1e-9);

            let two_step = unclamped(l1, l2, fwd);
            prop_assume!((0.0..=100.0).contains(&two_step));
            let via = calibrate_score(s1, l1, l2, hl, &cs).unwrap();
            let direct = calibrate_score(s0, l0, l2, hl, &cs).unwrap();
            prop_assert!((via.value() - direct.value()).abs() <= 1e-9);
        }

        #[test]
        fn calibrated_score_monotone_in_target_level(
            s in 0.0f64..100.0, l0 in 30.0f64..100.0, hl in -10.0f64..100.0,
            a in 0.0f64..120.0, b in 0.0f64..120.0,
        ) {
            let cs = CalibrationCurveSet::builtin_default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s0 = Score::new(s).unwrap();
            let x = calibrate_score(s0, l0, lo, hl, &cs).unwrap().value();
            let y = calibrate_score(s0, l0, hi, hl, &cs).unwrap().value();
            prop_assert!(x <= y + 1e-12);
        }

        #[test]
        fn curve_value_is_lipschitz(hl in -20.0f64..110.0, level in -10.0f64..130.0) {
            let cs = CalibrationCurveSet::builtin_default();
            let h = 0.05;
            let base = curve_value(&cs, hl, level);
            let dl = (curve_value(&cs, hl, level + h) - base).abs();
            let dh = (curve_value(&cs, hl + h, level) - base).abs();
            prop_assert!(dl <= cs.level_lipschitz_bound() * h + 1e-9);
            prop_assert!(dh <= cs.hl_lipschitz_bound() * h + 1e-9);
        }
    }
}
