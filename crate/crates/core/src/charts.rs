//! PNG charts: training curves and grouped bar comparisons.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};
use plotters::style::FontStyle;

use crate::error::{Error, Result};
use crate::train::TrainRecord;

pub const FONT_ENV: &str = "STONECRACK_FONT";

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

const PALETTE: [RGBColor; 11] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
    RGBColor(188, 189, 34),
    RGBColor(23, 190, 207),
    RGBColor(0, 0, 128),
];

fn font_path() -> Option<PathBuf> {
    std::env::var_os(FONT_ENV)
        .map(PathBuf::from)
        .into_iter()
        .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
        .find(|p| p.is_file())
}

/// Registers a system font for chart text once per process.
fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let path = font_path().ok_or_else(|| format!("no usable font found; set {FONT_ENV}"))?;
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font("sans-serif", FontStyle::Normal, bytes)
            .map_err(|_| format!("{}: not a usable font", path.display()))
    })
    .clone()
    .map_err(Error::Chart)
}

fn chart_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Chart(e.to_string())
}

/// Accuracy and loss against epoch, train and validation.
pub fn training_curves(record: &TrainRecord, path: &Path) -> Result<()> {
    ensure_font()?;
    let root = BitMapBackend::new(path, (1100, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let (left, right) = root.split_horizontally(550);
    let n = record.epochs.len().max(1) as f64;
    let epoch = |e: &crate::train::EpochStats| e.epoch as f64;

    let mut acc = ChartBuilder::on(&left)
        .caption(format!("{} accuracy", record.backbone), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1.0..n.max(2.0), 0.0..1.0)
        .map_err(chart_err)?;
    acc.configure_mesh().x_desc("epoch").y_desc("accuracy").draw().map_err(chart_err)?;
    for (name, color, f) in [
        ("train", PALETTE[0], (|e| e.train_acc) as fn(&crate::train::EpochStats) -> f64),
        ("validation", PALETTE[1], |e| e.val_acc),
    ] {
        acc.draw_series(LineSeries::new(record.epochs.iter().map(|e| (epoch(e), f(e))), color.stroke_width(2)))
            .map_err(chart_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    acc.configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(chart_err)?;

    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let ymax = record
        .epochs
        .iter()
        .flat_map(|e| [finite(e.train_loss), finite(e.val_loss)])
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let mut loss = ChartBuilder::on(&right)
        .caption(format!("{} loss", record.backbone), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1.0..n.max(2.0), 0.0..ymax)
        .map_err(chart_err)?;
    loss.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(chart_err)?;
    for (name, color, f) in [
        ("train", PALETTE[0], (|e| e.train_loss) as fn(&crate::train::EpochStats) -> f64),
        ("validation", PALETTE[1], |e| e.val_loss),
    ] {
        loss.draw_series(LineSeries::new(
            record.epochs.iter().map(|e| (epoch(e), finite(f(e)))),
            color.stroke_width(2),
        ))
        .map_err(chart_err)?
        .label(name)
        .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    loss.configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(chart_err)?;
    root.present().map_err(chart_err)
}

/// One named bar series; `None` leaves a gap in that group.
#[derive(Debug, Clone)]
pub struct BarSeries {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

/// Bars grouped along x by `groups`, one colour per series.
pub fn grouped_bars(path: &Path, title: &str, y_desc: &str, groups: &[String], series: &[BarSeries]) -> Result<()> {
    ensure_font()?;
    if groups.is_empty() {
        return Err(Error::Chart("no groups to plot".into()));
    }
    let ymax = series
        .iter()
        .flat_map(|s| s.values.iter().flatten().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.1 } else { 1.0 };
    let ng = groups.len();
    let root = BitMapBackend::new(path, (1250, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let (plot, side) = root.split_horizontally(1030);
    let mut chart = ChartBuilder::on(&plot)
        .caption(title, ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..ng as f64, 0.0..ymax)
        .map_err(chart_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc(y_desc)
        .draw()
        .map_err(chart_err)?;
    let label_style = TextStyle::from(("sans-serif", 16).into_font()).pos(Pos::new(HPos::Center, VPos::Top));
    for (g, name) in groups.iter().enumerate() {
        let (px, py) = chart.backend_coord(&(g as f64 + 0.5, 0.0));
        plot.draw(&Text::new(name.clone(), (px, py + 8), label_style.clone()))
            .map_err(chart_err)?;
    }

    let ns = series.len().max(1);
    let slot = 0.8 / ns as f64;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let bars = s.values.iter().enumerate().filter_map(|(g, v)| {
            let v = (*v)?;
            let x0 = g as f64 + 0.1 + k as f64 * slot;
            Some(Rectangle::new([(x0, 0.0), (x0 + slot * 0.92, v.max(0.0))], color.filled()))
        });
        chart.draw_series(bars).map_err(chart_err)?;
        let y = 60 + 24 * k as i32;
        side.draw(&Rectangle::new([(8, y - 6), (22, y + 6)], color.filled()))
            .map_err(chart_err)?;
        let style = TextStyle::from(("sans-serif", 15).into_font()).pos(Pos::new(HPos::Left, VPos::Center));
        side.draw(&Text::new(s.name.clone(), (30, y), style)).map_err(chart_err)?;
    }
    root.present().map_err(chart_err)
}
