//! SVG figures: grids of accuracy curves and intensity histograms.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::experiments::{ExperimentResult, IntensityHistogram, HISTOGRAM_BINS};
use crate::stimulus::Condition;

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 300;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Serde(format!("plotting failed: {e}"))
}

fn color(c: Condition) -> RGBColor {
    match c {
        Condition::A => RGBColor(0, 0, 0),
        Condition::Ax => RGBColor(31, 119, 180),
        Condition::Xa => RGBColor(44, 160, 44),
        Condition::Xax => RGBColor(214, 39, 40),
    }
}

/// One panel of a grid: a title and the result whose curves it shows.
pub struct Panel<'a> {
    pub title: String,
    pub result: Option<&'a ExperimentResult>,
}

/// Draws `panels` row-major into a grid with `cols` columns, one line per
/// condition, accuracy on `[0, 1]`. Missing results leave an empty panel.
pub fn curve_grid(path: &Path, title: &str, panels: &[Panel<'_>], cols: usize) -> Result<()> {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let root = SVGBackend::new(path, (PANEL_W * cols as u32, PANEL_H * rows as u32 + 40))
        .into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (header, body) = root.split_vertically(40);
    header
        .titled(title, ("sans-serif", 20))
        .map_err(plot_err)?;
    let areas = body.split_evenly((rows, cols));
    for (area, panel) in areas.iter().zip(panels) {
        let Some(result) = panel.result else {
            area.titled(&format!("{} (missing)", panel.title), ("sans-serif", 14))
                .map_err(plot_err)?;
            continue;
        };
        let xs: Vec<i64> = result.points.iter().map(|p| p.x_px).collect();
        let (lo, hi) = (
            xs.iter().copied().min().unwrap_or(0),
            xs.iter().copied().max().unwrap_or(1),
        );
        let pad = ((hi - lo) / 20).max(10);
        let mut chart = ChartBuilder::on(area)
            .caption(&panel.title, ("sans-serif", 14))
            .margin(8)
            .x_label_area_size(32)
            .y_label_area_size(40)
            .build_cartesian_2d(lo - pad..hi + pad, 0f64..1f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(result.sweep.x_label())
            .y_desc("accuracy")
            .x_labels(8)
            .y_labels(6)
            .draw()
            .map_err(plot_err)?;
        for c in result.conditions() {
            let col = color(c);
            chart
                .draw_series(LineSeries::new(result.curve(c), col.stroke_width(2)))
                .map_err(plot_err)?
                .label(c.name())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], col.stroke_width(2)));
            chart
                .draw_series(result.curve(c).into_iter().map(|p| Circle::new(p, 3, col.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerLeft)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Overlaid histograms of per-image white-pixel fractions, as fractions of
/// each set's images.
pub fn histogram(path: &Path, title: &str, hist: &[IntensityHistogram]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let peak = hist
        .iter()
        .flat_map(|h| h.counts.iter().map(move |c| *c as f64 / h.images.max(1) as f64))
        .fold(0.0f64, f64::max)
        .max(0.05);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..1f64, 0f64..peak * 1.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("fraction of white pixels")
        .y_desc("fraction of images")
        .draw()
        .map_err(plot_err)?;
    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(214, 39, 40),
        RGBColor(44, 160, 44),
        RGBColor(148, 103, 189),
    ];
    let width = 1.0 / HISTOGRAM_BINS as f64;
    for (i, h) in hist.iter().enumerate() {
        let col = palette[i % palette.len()];
        let n = h.images.max(1) as f64;
        let steps: Vec<(f64, f64)> = h
            .counts
            .iter()
            .enumerate()
            .flat_map(|(b, c)| {
                let y = *c as f64 / n;
                [(b as f64 * width, y), ((b + 1) as f64 * width, y)]
            })
            .collect();
        chart
            .draw_series(LineSeries::new(steps, col.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{} (mean {:.2})", h.dataset, h.mean))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], col.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
