//! SVG chart emission from metrics files and sweep tables.

use crate::commands::SweepRow;
use dfkd_core::error::{Error, Result};
use dfkd_core::report::{read_metrics, MetricRow};
use plotters::prelude::*;
use std::path::{Path, PathBuf};

fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<()> {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return Err(Error::invalid(format!("no data for chart {title}")));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &finite {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::invalid(format!("chart fill: {e}")))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| Error::invalid(format!("chart build: {e}")))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| Error::invalid(format!("chart mesh: {e}")))?;
    let palette = [&BLUE, &RED, &GREEN, &MAGENTA, &CYAN, &BLACK];
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(|e| Error::invalid(format!("chart series: {e}")))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| Error::invalid(format!("chart legend: {e}")))?;
    root.present()
        .map_err(|e| Error::invalid(format!("chart present: {e}")))?;
    Ok(())
}

/// Loss curves, accuracy trajectory, and retention per round.
pub fn emit_run_plots(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(metrics)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let mut kd = Vec::new();
    let mut self_sup = Vec::new();
    let mut total = Vec::new();
    let mut acc = Vec::new();
    let mut retained = Vec::new();
    let mut mean_sim = Vec::new();
    for row in &rows {
        match row {
            MetricRow::Step(s) => {
                let x = kd.len() as f64;
                kd.push((x, s.kd));
                self_sup.push((x, s.self_sup));
                total.push((x, s.total));
            }
            MetricRow::Round {
                round,
                retained_fraction,
                mean_similarity,
                accuracy,
                ..
            } => {
                if let Some(a) = accuracy {
                    acc.push((*round as f64, *a));
                }
                retained.push((*round as f64, *retained_fraction));
                mean_sim.push((*round as f64, *mean_similarity));
            }
            _ => {}
        }
    }

    if !kd.is_empty() {
        let p = out.join("loss_curves.svg");
        line_chart(
            &p,
            "distillation loss components",
            "step",
            "loss",
            &[("kd", kd), ("self-supervised", self_sup), ("total", total)],
        )?;
        written.push(p);
    }
    if !acc.is_empty() {
        let p = out.join("accuracy.svg");
        line_chart(
            &p,
            "student accuracy per round",
            "round",
            "accuracy",
            &[("accuracy", acc)],
        )?;
        written.push(p);
    }
    if !retained.is_empty() {
        let p = out.join("retention.svg");
        line_chart(
            &p,
            "filter retention and similarity per round",
            "round",
            "fraction / cosine",
            &[("retained fraction", retained), ("mean similarity", mean_sim)],
        )?;
        written.push(p);
    }
    Ok(written)
}

/// Accuracy and mean-similarity curves over a sweep.
pub fn emit_sweep_plots(rows: &[SweepRow], parameter: &str, out: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out)?;
    let acc: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, r.accuracy)).collect();
    let sim: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, r.mean_similarity)).collect();
    let mut written = Vec::new();
    let p1 = out.join("sweep_accuracy.svg");
    line_chart(
        &p1,
        &format!("accuracy vs {parameter}"),
        parameter,
        "accuracy",
        &[("accuracy", acc)],
    )?;
    written.push(p1);
    let p2 = out.join("sweep_similarity.svg");
    line_chart(
        &p2,
        &format!("mean cosine similarity vs {parameter}"),
        parameter,
        "mean similarity",
        &[("mean similarity", sim)],
    )?;
    written.push(p2);
    Ok(written)
}
