//! SVG figures: confusion-matrix heatmaps, per-class ROC curves and
//! predicted-probability histograms.

use std::path::Path;

use anyhow::{anyhow, Result};
use lesionfuse_core::evaluation::{ConfusionMatrix, RocCurve};
use plotters::prelude::*;

const SERIES: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

fn render(path: &Path, size: (u32, u32), draw: impl FnOnce(&DrawingArea<SVGBackend, plotters::coord::Shift>) -> Result<()>) -> Result<()> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, size).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        draw(&root)?;
        root.present().map_err(err)?;
    }
    crate::io::write_atomic(path, svg.as_bytes())
}

/// Row-normalized heatmap with raw counts printed in each cell.
pub fn confusion_heatmap(path: &Path, cm: &ConfusionMatrix, classes: &[String], title: &str) -> Result<()> {
    let n = cm.n_classes();
    let cell = 56i32;
    let (left, top) = (70i32, 50i32);
    let side = left + cell * n as i32 + 20;
    render(path, (side as u32, (top + cell * n as i32 + 60) as u32), |root| {
        root.draw(&Text::new(title.to_string(), (left, 15), ("sans-serif", 16))).map_err(err)?;
        for i in 0..n {
            let support = cm.row_sum(i).max(1) as f64;
            for j in 0..n {
                let frac = cm.counts[i][j] as f64 / support;
                let shade = (255.0 * (1.0 - 0.85 * frac)) as u8;
                let (x, y) = (left + cell * j as i32, top + cell * i as i32);
                root.draw(&Rectangle::new([(x, y), (x + cell, y + cell)], RGBColor(shade, shade, 255).filled()))
                    .map_err(err)?;
                root.draw(&Rectangle::new([(x, y), (x + cell, y + cell)], BLACK.mix(0.3))).map_err(err)?;
                let ink = if frac > 0.5 { WHITE } else { BLACK };
                root.draw(&Text::new(
                    cm.counts[i][j].to_string(),
                    (x + cell / 2 - 8, y + cell / 2 - 6),
                    ("sans-serif", 13).into_font().color(&ink),
                ))
                .map_err(err)?;
            }
            root.draw(&Text::new(classes[i].clone(), (10, top + cell * i as i32 + cell / 2 - 6), ("sans-serif", 13)))
                .map_err(err)?;
            root.draw(&Text::new(
                classes[i].clone(),
                (left + cell * i as i32 + cell / 2 - 14, top + cell * n as i32 + 8),
                ("sans-serif", 13),
            ))
            .map_err(err)?;
        }
        root.draw(&Text::new("predicted", (left + cell * n as i32 / 2 - 30, top + cell * n as i32 + 32), ("sans-serif", 13)))
            .map_err(err)?;
        Ok(())
    })
}

/// One-vs-rest ROC curve per class present in the fold.
pub fn roc_plot(path: &Path, curves: &[RocCurve], title: &str) -> Result<()> {
    render(path, (520, 460), |root| {
        let mut chart = ChartBuilder::on(root)
            .caption(title, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("false positive rate")
            .y_desc("true positive rate")
            .draw()
            .map_err(err)?;
        chart
            .draw_series(LineSeries::new(vec![(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3)))
            .map_err(err)?;
        for (k, c) in curves.iter().enumerate() {
            let Some(auc) = c.auc else { continue };
            let color = SERIES[k % SERIES.len()];
            chart
                .draw_series(LineSeries::new(c.points.iter().copied(), color.stroke_width(2)))
                .map_err(err)?
                .label(format!("{} (AUC {auc:.3})", c.class))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK.mix(0.3))
            .draw()
            .map_err(err)?;
        Ok(())
    })
}

/// For each true class, the histogram (10 bins, as a fraction of the class)
/// of the probability the model assigned to that class.
pub fn probability_plot(path: &Path, labels: &[usize], probs: &[Vec<f64>], classes: &[String], title: &str) -> Result<()> {
    const BINS: usize = 10;
    render(path, (520, 420), |root| {
        let mut chart = ChartBuilder::on(root)
            .caption(title, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(44)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("predicted probability of the true class")
            .y_desc("fraction of samples")
            .draw()
            .map_err(err)?;
        for (c, name) in classes.iter().enumerate() {
            let own: Vec<f64> = labels.iter().zip(probs).filter(|(&l, _)| l == c).map(|(_, p)| p[c]).collect();
            if own.is_empty() {
                continue;
            }
            let mut hist = [0.0; BINS];
            for p in &own {
                hist[((p * BINS as f64) as usize).min(BINS - 1)] += 1.0 / own.len() as f64;
            }
            let color = SERIES[c % SERIES.len()];
            let pts: Vec<(f64, f64)> = hist
                .iter()
                .enumerate()
                .map(|(b, &h)| ((b as f64 + 0.5) / BINS as f64, h))
                .collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(err)?
                .label(format!("{name} (n={})", own.len()))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK.mix(0.3))
            .draw()
            .map_err(err)?;
        Ok(())
    })
}
