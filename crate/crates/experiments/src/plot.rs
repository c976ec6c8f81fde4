//! SVG charts drawn from the same rows that go to CSV.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum Style {
    Line,
    /// Markers with symmetric vertical error bars.
    Markers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub style: Style,
    /// (x, y, half-width of the error bar)
    pub points: Vec<(f64, f64, f64)>,
}

impl Series {
    pub fn line(label: impl Into<String>, xy: impl IntoIterator<Item = (f64, f64)>) -> Self {
        Self {
            label: label.into(),
            style: Style::Line,
            points: xy.into_iter().map(|(x, y)| (x, y, 0.0)).collect(),
        }
    }

    pub fn markers(label: impl Into<String>, xye: impl IntoIterator<Item = (f64, f64, f64)>) -> Self {
        Self {
            label: label.into(),
            style: Style::Markers,
            points: xye.into_iter().collect(),
        }
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Plot(e.to_string())
}

fn bounds(series: &[Series]) -> Option<((f64, f64), (f64, f64))> {
    let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y, e) in &s.points {
            if x.is_finite() && y.is_finite() {
                xs = (xs.0.min(x), xs.1.max(x));
                ys = (ys.0.min(y - e), ys.1.max(y + e));
            }
        }
    }
    if !(xs.0.is_finite() && ys.0.is_finite()) {
        return None;
    }
    let pad = |(lo, hi): (f64, f64)| {
        let w = (hi - lo).max(1e-12);
        (lo - 0.05 * w, hi + 0.05 * w)
    };
    Some((pad(xs), pad(ys)))
}

/// Draw all series on one set of axes. Non-finite points are skipped.
pub fn chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> CliResult<()> {
    let root = SVGBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let Some(((x0, x1), (y0, y1))) = bounds(series) else {
        root.present().map_err(plot_err)?;
        return Ok(());
    };
    let mut ctx = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    ctx.configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|(x, y, _)| x.is_finite() && y.is_finite())
            .collect();
        let legend = move |(x, y): (i32, i32)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2));
        match s.style {
            Style::Line => {
                ctx.draw_series(LineSeries::new(pts.iter().map(|&(x, y, _)| (x, y)), color.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(s.label.as_str())
                    .legend(legend);
            }
            Style::Markers => {
                ctx.draw_series(
                    pts.iter()
                        .map(|&(x, y, e)| ErrorBar::new_vertical(x, y - e, y, y + e, color.filled(), 6)),
                )
                .map_err(plot_err)?;
                ctx.draw_series(pts.iter().map(|&(x, y, _)| Circle::new((x, y), 3, color.filled())))
                    .map_err(plot_err)?
                    .label(s.label.as_str())
                    .legend(move |(x, y)| Circle::new((x + 9, y), 3, color.filled()));
            }
        }
    }
    ctx.configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
