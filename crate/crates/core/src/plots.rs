//! Static SVG plots of result records.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::forge::TransitionMatrix;
use crate::harness::ResultRecord;

const SIZE: (u32, u32) = (720, 480);

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn label(record: &ResultRecord) -> String {
    format!("{} ({})", record.name, record.method.name())
}

/// Trajectory of one disentanglement metric, one line per record.
fn curves(path: &Path, title: &str, series: &[(String, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let len = series
        .iter()
        .map(|(_, s)| s.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let top = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0usize..len - 1, 0.0..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                values.iter().copied().enumerate(),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Grouped bars: overall, head, middle, tail per record.
fn accuracy_bars(path: &Path, records: &[&ResultRecord]) -> Result<()> {
    const GROUPS: [&str; 4] = ["overall", "head", "middle", "tail"];
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = records.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption("test accuracy (%)", ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..GROUPS.len() as f64, 0.0..100.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(GROUPS.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let g = (*x - 0.5).round();
            if (x - 0.5 - g).abs() < 1e-6 && g >= 0.0 && (g as usize) < GROUPS.len() {
                GROUPS[g as usize].to_string()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / n as f64;
    for (r, record) in records.iter().enumerate() {
        let Some(m) = &record.metrics else { continue };
        let color = Palette99::pick(r).to_rgba();
        let values = [m.overall, m.head, m.middle, m.tail];
        chart
            .draw_series(values.iter().enumerate().map(|(g, &v)| {
                let x0 = g as f64 + 0.1 + r as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], color.filled())
            }))
            .map_err(plot_err)?
            .label(label(record))
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Raw flip counts, true class on the vertical axis; the diagonal is left blank.
fn flip_heatmap(path: &Path, t: &TransitionMatrix) -> Result<()> {
    let c = t.class_count;
    let root = SVGBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("label flips (true → observed)", ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(36)
        .build_cartesian_2d(0..c, 0..c)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("observed")
        .y_desc("true")
        .draw()
        .map_err(plot_err)?;
    let max = (0..c)
        .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| t.counts[i * c + j])
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    chart
        .draw_series(
            (0..c)
                .flat_map(|i| (0..c).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let style = if i == j {
                        WHITE.filled()
                    } else {
                        let v = t.counts[i * c + j] as f64 / max;
                        RGBColor(255, (255.0 * (1.0 - v)) as u8, (255.0 * (1.0 - v)) as u8).filled()
                    };
                    // row 0 at the top
                    let y = c - 1 - i;
                    Rectangle::new([(j, y), (j + 1, y + 1)], style)
                }),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Renders every plot the records support into `dir` and returns the written paths.
pub fn emit_plots(records: &[ResultRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let dull: Vec<&ResultRecord> = records.iter().filter(|r| !r.om.is_empty()).collect();

    let om = dir.join("om.svg");
    curves(
        &om,
        "OM",
        &dull
            .iter()
            .map(|r| (label(r), r.om.clone()))
            .collect::<Vec<_>>(),
    )?;
    written.push(om);
    let lsm = dir.join("lsm.svg");
    curves(
        &lsm,
        "LSM",
        &dull
            .iter()
            .map(|r| (label(r), r.lsm.clone()))
            .collect::<Vec<_>>(),
    )?;
    written.push(lsm);

    let acc = dir.join("accuracy.svg");
    accuracy_bars(&acc, &records.iter().collect::<Vec<_>>())?;
    written.push(acc);

    let mut seen = Vec::new();
    for r in records {
        let Some(t) = &r.transition else { continue };
        if seen.contains(&r.config_hash) {
            continue;
        }
        seen.push(r.config_hash.clone());
        let path = dir.join(format!("flips-{}.svg", r.name));
        flip_heatmap(&path, t)?;
        written.push(path);
    }
    Ok(written)
}
