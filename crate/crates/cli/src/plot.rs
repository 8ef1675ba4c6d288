//! SVG line charts for attack traces and sweep reports.

use anyhow::{anyhow, bail, Result};
use conceal_core::attack::TraceRecord;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

const SIZE: (u32, u32) = (720, 480);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One figure: a y quantity against the sweep variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub x_label: String,
    pub panels: Vec<Panel>,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// A line chart as an SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let points = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        bail!("nothing to plot for '{title}'");
    }
    let (x0, x1) = padded(x0, x1);
    let (y0, y1) = padded(y0, y1);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for (i, s) in series.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), colour.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
        }
        if series.len() > 1 || series.iter().any(|s| !s.label.is_empty()) {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| anyhow!("{e}"))?;
        }
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    Ok(svg)
}

/// The four trace panels: distortion, attack loss, similarity to the target
/// and to the carrier, each against the iteration count over all restarts.
pub fn trace_charts(records: &[TraceRecord]) -> Result<Vec<(&'static str, String)>> {
    if records.is_empty() {
        bail!("empty trace: nothing to plot");
    }
    let series = |label: &str, f: &dyn Fn(&TraceRecord) -> f64| Series {
        label: label.to_string(),
        points: records.iter().enumerate().map(|(i, r)| (i as f64, f(r))).collect(),
    };
    Ok(vec![
        (
            "distortion",
            line_chart("Distortion to carrier", "iteration", "distortion", &[series("", &|r| r.metrics.distortion)])?,
        ),
        (
            "loss",
            line_chart(
                "Loss",
                "iteration",
                "loss",
                &[
                    series("attack loss", &|r| r.attack_loss),
                    series("test-model loss", &|r| r.metrics.perf_loss),
                ],
            )?,
        ),
        (
            "sim-target",
            line_chart("Similarity to target", "iteration", "cosine similarity", &[series("", &|r| r.metrics.sim_target)])?,
        ),
        (
            "sim-carrier",
            line_chart("Similarity to carrier", "iteration", "cosine similarity", &[series("", &|r| r.metrics.sim_carrier)])?,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_both_series() {
        let s = vec![
            Series {
                label: "blur".into(),
                points: vec![(100.0, 0.9), (200.0, 0.95)],
            },
            Series {
                label: "no blur".into(),
                points: vec![(100.0, 0.7), (200.0, 0.94)],
            },
        ];
        let svg = line_chart("sim", "resolution", "similarity", &s).unwrap();
        assert!(svg.contains("<svg"));
        let lines: Vec<&str> = svg.lines().map(str::trim).collect();
        assert!(lines.contains(&"blur") && lines.contains(&"no blur"), "legend missing");
        // two data lines plus two legend marks
        assert_eq!(svg.matches("stroke-width=\"2\"").count(), 4);
    }

    #[test]
    fn single_point_and_constant_series_render() {
        let s = vec![Series {
            label: String::new(),
            points: vec![(0.0, 1.0)],
        }];
        assert!(line_chart("one", "x", "y", &s).is_ok());
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(trace_charts(&[]).is_err());
        assert!(line_chart("none", "x", "y", &[]).is_err());
    }
}
