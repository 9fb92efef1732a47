//! Static SVG figures: recall against x, and discovered vs reference group ratios.

use std::path::Path;

use plotters::prelude::*;

use crate::bias::ScatterPoint;
use crate::{Error, Result};

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        message: format!("plot: {e}"),
    }
}

/// One line per named series of `(x, recall)` points.
pub fn recall_vs_x(path: &Path, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let err = draw_err(path);
    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .ok_or_else(|| Error::Empty("no series to plot".into()))?;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("recall vs x", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0usize..x_max + 1, 0f64..1.0)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("x (words per filter)")
        .y_desc("recall")
        .draw()
        .map_err(&err)?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(&err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(&err)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)
}

/// Discovered concept ratio against the reference ratio, with the identity line.
pub fn ratio_scatter(path: &Path, points: &[ScatterPoint], pearson: f64) -> Result<()> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (480, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("group ratio, rho = {pearson:.3}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1.0, 0f64..1.0)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("reference ratio")
        .y_desc("discovered ratio")
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3)))
        .map_err(&err)?;
    chart
        .draw_series(points.iter().map(|p| {
            EmptyElement::at((p.reference, p.discovered))
                + Circle::new((0, 0), 4, PALETTE[0].filled())
                + Text::new(p.concept.clone(), (6, -6), ("sans-serif", 12))
        }))
        .map_err(&err)?;
    root.present().map_err(&err)
}
