//! Prediction metrics (RMSE, Pearson correlation) and the listener-level
//! hearing-loss correlation analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::average_hearing_loss;
use crate::dataset::{group_by_listener, Sample};
use crate::error::{Result, SsipError};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(SsipError::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(SsipError::EmptyInput("rmse of zero pairs".into()));
    }
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn ncc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.len() < 2 {
        return Err(SsipError::EmptyInput(format!(
            "correlation needs at least 2 pairs, got {}",
            pred.len()
        )));
    }
    Ok(pearson(pred, truth))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    // The rounded mean of a constant vector can differ from its elements,
    // so constancy is checked directly.
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if x.is_empty() || constant(x) || constant(y) {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

fn defined(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerMetrics {
    pub rmse: f64,
    /// `None` when undefined (fewer than two queries or zero variance).
    pub ncc: Option<f64>,
    pub n: usize,
}

/// Pooled metrics over every query of an evaluation, plus per-listener rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    /// `None` flags an undefined correlation.
    pub ncc: Option<f64>,
    pub n_queries: usize,
    pub per_listener: BTreeMap<String, ListenerMetrics>,
    pub n_support: usize,
    /// Whether predictions were clamped to [0, 100] before scoring.
    pub clamped: bool,
    pub fold_index: Option<u8>,
}

/// One scored query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub listener_id: String,
    pub prediction: f64,
    pub target: f64,
}

impl MetricsReport {
    pub fn from_queries(queries: &[ScoredQuery], n_support: usize, clamped: bool, fold_index: Option<u8>) -> Result<Self> {
        let pred: Vec<f64> = queries.iter().map(|q| q.prediction).collect();
        let truth: Vec<f64> = queries.iter().map(|q| q.target).collect();
        let rmse = rmse(&pred, &truth)?;
        let ncc = if pred.len() >= 2 { defined(pearson(&pred, &truth)) } else { None };

        let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for q in queries {
            let entry = grouped.entry(&q.listener_id).or_default();
            entry.0.push(q.prediction);
            entry.1.push(q.target);
        }
        let per_listener = grouped
            .into_iter()
            .map(|(id, (p, t))| {
                let m = ListenerMetrics {
                    rmse: self::rmse(&p, &t)?,
                    ncc: if p.len() >= 2 { defined(pearson(&p, &t)) } else { None },
                    n: p.len(),
                };
                Ok((id.to_owned(), m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rmse,
            ncc,
            n_queries: queries.len(),
            per_listener,
            n_support,
            clamped,
            fold_index,
        })
    }
}

/// Headline numbers across folds, aggregated two ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean_rmse: f64,
    pub mean_ncc: Option<f64>,
    pub pooled_rmse: f64,
    pub pooled_ncc: Option<f64>,
    pub folds: usize,
}

/// Mean of per-fold values, and metrics over all folds' queries pooled.
pub fn summarize_folds(folds: &[(MetricsReport, Vec<ScoredQuery>)]) -> Result<FoldSummary> {
    if folds.is_empty() {
        return Err(SsipError::EmptyInput("no folds to summarize".into()));
    }
    let n = folds.len() as f64;
    let mean_rmse = folds.iter().map(|(r, _)| r.rmse).sum::<f64>() / n;
    let mean_ncc = folds
        .iter()
        .map(|(r, _)| r.ncc)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    let all: Vec<ScoredQuery> = folds.iter().flat_map(|(_, q)| q.iter().cloned()).collect();
    let pooled = MetricsReport::from_queries(&all, folds[0].0.n_support, folds[0].0.clamped, None)?;
    Ok(FoldSummary {
        mean_rmse,
        mean_ncc,
        pooled_rmse: pooled.rmse,
        pooled_ncc: pooled.ncc,
        folds: folds.len(),
    })
}

/// Least-squares line `y = slope · x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerPoint {
    pub listener_id: String,
    pub hearing_loss: f64,
    pub mean_score: f64,
    pub mean_level: f64,
    pub n_samples: usize,
}

/// How much of a listener's intelligibility and presentation level is
/// explained by average hearing loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerCorrelationReport {
    pub points: Vec<ListenerPoint>,
    /// `None` when undefined (one listener or zero variance).
    pub r_hl_vs_intelligibility: Option<f64>,
    pub r_hl_vs_level: Option<f64>,
    pub fit_hl_vs_intelligibility: Option<LinearFit>,
    pub fit_hl_vs_level: Option<LinearFit>,
}

/// Per listener: average hearing loss, mean known score and mean original
/// RMS level, then Pearson r across listeners.
pub fn listener_correlation_report(samples: &[Sample]) -> Result<ListenerCorrelationReport> {
    if samples.is_empty() {
        return Err(SsipError::EmptyInput("no samples to analyze".into()));
    }
    let mut points = Vec::new();
    for (listener, pool) in group_by_listener(samples) {
        let first = &pool[0];
        let audiogram = first.audiogram.as_ref().ok_or_else(|| SsipError::IncompleteAudiogram {
            record: Some(first.sample_id.clone()),
            missing: crate::calibration::AVERAGE_HL_FREQUENCIES[0],
        })?;
        let hearing_loss = average_hearing_loss(audiogram).map_err(|e| match e {
            SsipError::IncompleteAudiogram { missing, .. } => SsipError::IncompleteAudiogram {
                record: Some(first.sample_id.clone()),
                missing,
            },
            other => other,
        })?;
        let scores: Vec<f64> = pool.iter().filter_map(|s| s.score.known()).collect();
        if scores.is_empty() {
            return Err(SsipError::InsufficientSamples(format!("listener {listener} has no scored samples")));
        }
        let levels = pool
            .iter()
            .map(|s| {
                s.original_level
                    .ok_or_else(|| SsipError::Format(format!("sample {} has no level", s.sample_id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        points.push(ListenerPoint {
            listener_id: listener,
            hearing_loss,
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            mean_level: levels.iter().sum::<f64>() / levels.len() as f64,
            n_samples: pool.len(),
        });
    }
    let hl: Vec<f64> = points.iter().map(|p| p.hearing_loss).collect();
    let score: Vec<f64> = points.iter().map(|p| p.mean_score).collect();
    let level: Vec<f64> = points.iter().map(|p| p.mean_level).collect();
    let r = |y: &[f64]| if hl.len() >= 2 { defined(pearson(&hl, y)) } else { None };
    Ok(ListenerCorrelationReport {
        r_hl_vs_intelligibility: r(&score),
        r_hl_vs_level: r(&level),
        fit_hl_vs_intelligibility: linear_fit(&hl, &score),
        fit_hl_vs_level: linear_fit(&hl, &level),
        points,
    })
}
