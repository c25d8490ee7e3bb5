//! Static figures: training curves as SVG and segmentation overlays as PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use dias_core::types::VesselMask;
use plotters::prelude::*;

use crate::CliError;

/// Line chart of several named `(x, y)` series.
pub fn render_curves(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<(), CliError> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(CliError::Plot(format!("nothing to plot for {title}")));
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let plot_err = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Grayscale `base` (any range, min-max scaled) with predictions painted
/// over it: true positives green, false positives red, false negatives blue.
/// Without ground truth every predicted pixel is green.
pub fn write_overlay(path: &Path, base: &[f64], pred: &VesselMask, gt: Option<&VesselMask>) -> Result<(), CliError> {
    let (h, w) = (pred.height(), pred.width());
    let lo = base.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = base.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (k, &v) in base.iter().enumerate() {
        let g = (((v - lo) / span) * 255.0).round() as u8;
        let p = pred.pixels()[k] == 1;
        let t = gt.map(|m| m.pixels()[k] == 1);
        let px = match (p, t) {
            (true, Some(true)) | (true, None) => [0, 200, 0],
            (true, Some(false)) => [220, 0, 0],
            (false, Some(true)) => [0, 80, 255],
            _ => [g, g, g],
        };
        rgb.extend_from_slice(&px);
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CliError::Plot(e.to_string()))?;
    writer.write_image_data(&rgb).map_err(|e| CliError::Plot(e.to_string()))?;
    Ok(())
}
