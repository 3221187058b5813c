//! Training-curve images from metrics logs.

use std::path::{Path, PathBuf};

use log::warn;
use plotters::prelude::*;
use refgame::trainer::EpochRecord;
use refgame::{Error, Result};

/// One run's metrics log and the label its curve gets.
#[derive(Debug, Clone)]
pub struct LabelledLog {
    pub label: String,
    pub records: Vec<EpochRecord>,
}

struct Series {
    file: &'static str,
    title: &'static str,
    y_label: &'static str,
    value: fn(&EpochRecord) -> Option<f64>,
}

const SERIES: [Series; 4] = [
    Series {
        file: "loss.svg",
        title: "Training game loss",
        y_label: "game loss",
        value: |r| Some(r.game_loss),
    },
    Series {
        file: "comm_rate.svg",
        title: "Communication rate",
        y_label: "comm. rate",
        value: |r| Some(r.comm_rate),
    },
    Series {
        file: "msg_len.svg",
        title: "Mean message length",
        y_label: "tokens",
        value: |r| Some(r.mean_msg_len),
    },
    Series {
        file: "rotation_acc.svg",
        title: "Rotation accuracy",
        y_label: "accuracy",
        value: |r| r.rotation_accuracy,
    },
];

const COLOURS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plotting failed: {e}")))
}

/// Write one SVG per quantity into `out_dir`, all logs overlaid. Empty logs
/// are skipped with a warning; a quantity no log carries (rotation accuracy
/// outside dual-task runs) gets no file. Each image names the config hashes
/// of its sources.
pub fn emit_plots(logs: &[LabelledLog], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let logs: Vec<&LabelledLog> = logs
        .iter()
        .filter(|l| {
            if l.records.is_empty() {
                warn!("metrics log {} is empty; nothing to plot", l.label);
            }
            !l.records.is_empty()
        })
        .collect();
    if logs.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let mut hashes: Vec<String> = logs
        .iter()
        .filter_map(|l| l.records.first().map(|r| r.config_hash[..16.min(r.config_hash.len())].to_string()))
        .collect();
    hashes.dedup();
    let footer = format!("config {}", hashes.join(", "));

    let mut written = Vec::new();
    for series in &SERIES {
        let curves: Vec<(&str, Vec<(f64, f64)>)> = logs
            .iter()
            .map(|l| {
                let points = l
                    .records
                    .iter()
                    .filter_map(|r| (series.value)(r).map(|v| (r.epoch as f64, v)))
                    .collect();
                (l.label.as_str(), points)
            })
            .filter(|(_, p): &(&str, Vec<(f64, f64)>)| !p.is_empty())
            .collect();
        if curves.is_empty() {
            continue;
        }
        let path = out_dir.join(series.file);
        draw(&path, series, &curves, &footer)?;
        written.push(path);
    }
    Ok(written)
}

fn draw(path: &Path, series: &Series, curves: &[(&str, Vec<(f64, f64)>)], footer: &str) -> Result<()> {
    let points = curves.iter().flat_map(|(_, p)| p.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let (chart_area, footer_area) = root.split_vertically(470);
    footer_area
        .draw_text(footer, &("sans-serif", 12).into_text_style(&footer_area), (10, 8))
        .map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&chart_area)
        .caption(series.title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(series.y_label)
        .draw()
        .map_err(plot_error)?;
    for (i, (label, pts)) in curves.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), colour.stroke_width(2)))
            .map_err(plot_error)?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}
