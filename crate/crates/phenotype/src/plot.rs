//! Static SVG figures: the per-series overlay (original points, warped
//! series, GP mean with a ±1σ band), the grid of first-layer weight
//! signatures, and the embedding scatter colored by class.

use std::fmt::Write as _;

use crate::cohort::LabSeries;
use crate::error::{Error, Result};
use crate::gpr::InterpolatedSeries;
use crate::preprocess::{warp_times, WarpParams};

const CLASS_COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

struct SvgCanvas {
    width: f64,
    height: f64,
    body: String,
}

impl SvgCanvas {
    fn new(width: f64, height: f64) -> Self {
        SvgCanvas { width, height, body: String::new() }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{x:.2},{y:.2} ");
        }
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#,
            d.trim_end()
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}"/>"#
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="{stroke}" stroke-width="0.5"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, fill: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" fill="{fill}" font-family="monospace" font-size="12">{content}</text>"#
        );
    }

    fn group_open(&mut self, class: &str, translate: (f64, f64)) {
        let _ = writeln!(
            self.body,
            r#"<g class="{class}" transform="translate({:.2},{:.2})">"#,
            translate.0, translate.1
        );
    }

    fn group_close(&mut self) {
        let _ = writeln!(self.body, "</g>");
    }

    fn finish(self) -> String {
        format!(
            "<svg version=\"1.1\" width=\"{}\" height=\"{}\" xmlns=\"http://www.w3.org/2000/svg\">\n{}</svg>\n",
            self.width, self.height, self.body
        )
    }
}

/// Affine map from data range to pixel range.
struct Scale {
    lo: f64,
    span: f64,
    px_lo: f64,
    px_span: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let span = if hi > lo { hi - lo } else { 1.0 };
        Scale { lo, span, px_lo, px_span: px_hi - px_lo }
    }

    fn at(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / self.span * self.px_span
    }
}

/// Mean ± one standard deviation curves; the upper curve is pointwise at or
/// above the mean.
pub fn sigma_band(means: &[f64], variances: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let upper = means
        .iter()
        .zip(variances)
        .map(|(m, v)| m + v.max(0.0).sqrt())
        .collect();
    let lower = means
        .iter()
        .zip(variances)
        .map(|(m, v)| m - v.max(0.0).sqrt())
        .collect();
    (upper, lower)
}

/// Overlay of one admission's series: original samples (black, with dots),
/// the time-warped series (red), and the GP interpolation (blue mean,
/// dashed ±1σ band).
pub fn series_overlay_svg(
    series: &LabSeries,
    warp: &WarpParams,
    interp: &InterpolatedSeries,
) -> Result<String> {
    let warped = warp_times(&series.times, warp)?;
    let (upper, lower) = sigma_band(&interp.means, &interp.variances);

    let x_min = interp
        .grid_times
        .first()
        .copied()
        .unwrap_or(0.0)
        .min(0.0);
    // warping stretches sub-day gaps, so the warped series can outrun the grid
    let x_max = interp
        .grid_times
        .last()
        .copied()
        .unwrap_or(1.0)
        .max(*series.times.last().unwrap())
        .max(*warped.last().unwrap());
    let y_min = series
        .values
        .iter()
        .chain(&lower)
        .fold(f64::INFINITY, |m, v| m.min(*v));
    let y_max = series
        .values
        .iter()
        .chain(&upper)
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));

    let (w, h, margin) = (900.0, 480.0, 50.0);
    let sx = Scale::new(x_min, x_max, margin, w - margin);
    let sy = Scale::new(y_min, y_max, h - margin, margin);
    let mut svg = SvgCanvas::new(w, h);
    svg.rect(margin, margin, w - 2.0 * margin, h - 2.0 * margin, "#999999");

    let to_pts = |xs: &[f64], ys: &[f64]| -> Vec<(f64, f64)> {
        xs.iter().zip(ys).map(|(x, y)| (sx.at(*x), sy.at(*y))).collect()
    };
    svg.polyline(&to_pts(&interp.grid_times, &upper), "#1f77b4", 1.0, true);
    svg.polyline(&to_pts(&interp.grid_times, &lower), "#1f77b4", 1.0, true);
    svg.polyline(&to_pts(&interp.grid_times, &interp.means), "#1f77b4", 2.0, false);
    svg.polyline(&to_pts(&warped, &series.values), "#d62728", 1.5, false);
    svg.polyline(&to_pts(&series.times, &series.values), "#000000", 1.5, false);
    for (t, v) in series.times.iter().zip(&series.values) {
        svg.circle(sx.at(*t), sy.at(*v), 3.0, "#000000");
    }

    svg.text(margin, 20.0, "#000000", &format!("hadm_id {} (label {})", interp.hadm_id, interp.label));
    svg.text(margin, 36.0, "#000000", "black: original  red: warped  blue: GP mean +/- 1 sd");
    svg.text(w / 2.0, h - 12.0, "#000000", "days from first sample");
    Ok(svg.finish())
}

/// One small panel per hidden unit, each drawn as a time-series signature;
/// 100 units lay out as a 10×10 grid.
pub fn signature_grid_svg(signatures: &[Vec<f64>]) -> Result<String> {
    if signatures.is_empty() {
        return Err(Error::Data("no signatures to plot".to_string()));
    }
    let n = signatures.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (panel_w, panel_h, gap) = (80.0, 50.0, 6.0);
    let width = cols as f64 * (panel_w + gap) + gap;
    let height = rows as f64 * (panel_h + gap) + gap;
    let mut svg = SvgCanvas::new(width, height);

    for (i, sig) in signatures.iter().enumerate() {
        let row = i / cols;
        let col = i % cols;
        let x0 = gap + col as f64 * (panel_w + gap);
        let y0 = gap + row as f64 * (panel_h + gap);
        svg.group_open("panel", (x0, y0));
        svg.rect(0.0, 0.0, panel_w, panel_h, "#cccccc");
        let lo = sig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = sig.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sy = Scale::new(lo, hi, panel_h - 4.0, 4.0);
        let sx = Scale::new(0.0, (sig.len().max(2) - 1) as f64, 2.0, panel_w - 2.0);
        let pts: Vec<(f64, f64)> = sig
            .iter()
            .enumerate()
            .map(|(j, v)| (sx.at(j as f64), sy.at(*v)))
            .collect();
        svg.polyline(&pts, "#333333", 1.0, false);
        svg.group_close();
    }
    Ok(svg.finish())
}

/// Scatter of the 2-D embedding, one dot per patch, colored by class label.
pub fn embedding_scatter_svg(coords: &[[f64; 2]], labels: &[u8]) -> Result<String> {
    if coords.is_empty() || coords.len() != labels.len() {
        return Err(Error::Data(
            "embedding scatter needs matching non-empty coords and labels".to_string(),
        ));
    }
    let (w, h, margin) = (700.0, 700.0, 40.0);
    let x_lo = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let x_hi = coords.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
    let y_lo = coords.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let y_hi = coords.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
    let sx = Scale::new(x_lo, x_hi, margin, w - margin);
    let sy = Scale::new(y_lo, y_hi, h - margin, margin);

    let mut svg = SvgCanvas::new(w, h);
    svg.rect(margin, margin, w - 2.0 * margin, h - 2.0 * margin, "#999999");
    for (c, label) in coords.iter().zip(labels) {
        let color = CLASS_COLORS[usize::from(*label % 2)];
        svg.circle(sx.at(c[0]), sy.at(c[1]), 3.0, color);
    }
    svg.text(margin, 24.0, CLASS_COLORS[0], "label 0");
    svg.text(margin + 80.0, 24.0, CLASS_COLORS[1], "label 1");
    Ok(svg.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_well_formed(svg: &str) {
        roxmltree::Document::parse(svg).expect("well-formed SVG");
    }

    fn toy_interp() -> InterpolatedSeries {
        InterpolatedSeries {
            hadm_id: 7,
            label: 1,
            grid_times: (0..9).map(|i| -0.5 + i as f64 * 0.25).collect(),
            means: (0..9).map(|i| (i as f64 * 0.6).sin()).collect(),
            variances: (0..9).map(|i| 0.01 + 0.002 * i as f64).collect(),
        }
    }

    #[test]
    fn overlay_is_well_formed_and_band_ordered() {
        let series = LabSeries {
            hadm_id: 7,
            subject_id: 1,
            times: vec![0.0, 0.6, 1.5],
            values: vec![0.2, 0.9, 0.4],
            label: 1,
        };
        let interp = toy_interp();
        let svg = series_overlay_svg(&series, &WarpParams::default(), &interp).unwrap();
        assert_well_formed(&svg);
        assert!(svg.matches("<polyline").count() >= 5);

        let (upper, lower) = sigma_band(&interp.means, &interp.variances);
        for i in 0..interp.means.len() {
            assert!(upper[i] >= interp.means[i]);
            assert!(lower[i] <= interp.means[i]);
        }
    }

    #[test]
    fn signature_grid_has_one_panel_per_unit() {
        let signatures: Vec<Vec<f64>> = (0..100)
            .map(|i| (0..40).map(|j| ((i + j) as f64 * 0.1).sin()).collect())
            .collect();
        let svg = signature_grid_svg(&signatures).unwrap();
        assert_well_formed(&svg);
        assert_eq!(svg.matches(r#"<g class="panel""#).count(), 100);
    }

    #[test]
    fn embedding_scatter_draws_every_point() {
        let coords: Vec<[f64; 2]> = (0..12)
            .map(|i| [i as f64, (i as f64 * 0.7).cos()])
            .collect();
        let labels: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let svg = embedding_scatter_svg(&coords, &labels).unwrap();
        assert_well_formed(&svg);
        assert_eq!(svg.matches("<circle").count(), 12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(signature_grid_svg(&[]).is_err());
        assert!(embedding_scatter_svg(&[], &[]).is_err());
    }
}
