//! SVG figures: metric versus support count, and listener scatter plots
//! with a regression line.

use std::path::Path;

use plotters::prelude::*;
use ssip_core::metrics::{LinearFit, ListenerCorrelationReport};
use ssip_core::pipeline::SweepResult;

use crate::error::CliError;

const SIZE: (u32, u32) = (800, 520);

fn plot_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |e| CliError::Plot(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy)]
pub enum SweepMetric {
    Rmse,
    Ncc,
}

impl SweepMetric {
    fn label(self) -> &'static str {
        match self {
            SweepMetric::Rmse => "RMSE",
            SweepMetric::Ncc => "NCC",
        }
    }

    fn of(self, rmse: f64, ncc: Option<f64>) -> Option<f64> {
        match self {
            SweepMetric::Rmse => Some(rmse).filter(|x| x.is_finite()),
            SweepMetric::Ncc => ncc,
        }
    }
}

/// Padded range covering every value, never empty.
fn span(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-3 * hi.abs().max(1.0));
    (lo - pad, hi + pad)
}

/// Fold-averaged metric against the support count on a log₂ axis, with the
/// audiogram baseline as a dashed horizontal line.
pub fn sweep_plot(path: &Path, result: &SweepResult, metric: SweepMetric) -> Result<(), CliError> {
    let err = plot_err(path);
    let points: Vec<(f64, f64)> = result
        .rows
        .iter()
        .filter_map(|r| metric.of(r.mean_rmse, r.mean_ncc).map(|v| ((r.n_support as f64).log2(), v)))
        .collect();
    let baseline = result.baseline.as_ref().and_then(|b| metric.of(b.mean_rmse, b.mean_ncc));
    let x_max = result.rows.iter().map(|r| (r.n_support as f64).log2()).fold(0.0, f64::max);
    let (x0, x1) = (-0.3, x_max + 0.3);
    let (y0, y1) = span(points.iter().map(|p| p.1).chain(baseline));

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} versus number of support pairs", metric.label()), ("sans-serif", 22))
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("support pairs")
        .y_desc(metric.label())
        .x_labels(2 * x_max as usize + 3)
        .x_label_formatter(&|x| {
            // Label only whole powers of two.
            if (x - x.round()).abs() < 1e-9 {
                format!("{}", 2f64.powf(x.round()))
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(|e| err(e.to_string()))?;

    chart
        .draw_series(LineSeries::new(points.clone(), BLUE.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("support-conditioned")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.stroke_width(2)));
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| err(e.to_string()))?;
    if let Some(b) = baseline {
        chart
            .draw_series(DashedLineSeries::new(vec![(x0, b), (x1, b)], 8, 5, RED.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label("audiogram baseline")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

pub fn r_annotation(r: Option<f64>) -> String {
    match r {
        Some(r) => format!("r = {r:.2}"),
        None => "r = n/a".to_owned(),
    }
}

/// One point per listener, the least-squares line and Pearson r.
pub fn scatter_plot(
    path: &Path,
    points: &[(f64, f64)],
    fit: Option<LinearFit>,
    r: Option<f64>,
    labels: (&str, &str),
) -> Result<(), CliError> {
    let err = plot_err(path);
    let (x0, x1) = span(points.iter().map(|p| p.0));
    let (y0, y1) = span(points.iter().map(|p| p.1));

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} versus {}", labels.1, labels.0), ("sans-serif", 22))
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(labels.0)
        .y_desc(labels.1)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| err(e.to_string()))?;
    if let Some(f) = fit {
        let line = [x0, x1].map(|x| (x, f.intercept + f.slope * x));
        chart
            .draw_series(LineSeries::new(line, RED.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?;
    }
    let anchor = (x0 + 0.05 * (x1 - x0), y1 - 0.06 * (y1 - y0));
    chart
        .draw_series(std::iter::once(Text::new(r_annotation(r), anchor, ("sans-serif", 20))))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

pub const HL_VS_INTELLIGIBILITY: &str = "hl_vs_intelligibility.svg";
pub const HL_VS_LEVEL: &str = "hl_vs_level.svg";

pub fn analysis_plots(dir: &Path, report: &ListenerCorrelationReport) -> Result<(), CliError> {
    let hl_score: Vec<(f64, f64)> = report.points.iter().map(|p| (p.hearing_loss, p.mean_score)).collect();
    let hl_level: Vec<(f64, f64)> = report.points.iter().map(|p| (p.hearing_loss, p.mean_level)).collect();
    scatter_plot(
        &dir.join(HL_VS_INTELLIGIBILITY),
        &hl_score,
        report.fit_hl_vs_intelligibility,
        report.r_hl_vs_intelligibility,
        ("average hearing loss (dB HL)", "mean intelligibility (%)"),
    )?;
    scatter_plot(
        &dir.join(HL_VS_LEVEL),
        &hl_level,
        report.fit_hl_vs_level,
        report.r_hl_vs_level,
        ("average hearing loss (dB HL)", "mean presentation level (dB SPL)"),
    )
}

pub const SWEEP_RMSE: &str = "sweep_rmse.svg";
pub const SWEEP_NCC: &str = "sweep_ncc.svg";

pub fn sweep_plots(dir: &Path, result: &SweepResult) -> Result<(), CliError> {
    sweep_plot(&dir.join(SWEEP_RMSE), result, SweepMetric::Rmse)?;
    sweep_plot(&dir.join(SWEEP_NCC), result, SweepMetric::Ncc)
}
