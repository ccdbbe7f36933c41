use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};
use plotters::prelude::*;

use styleinv_core::training::{read_training_log, StepRecord};

use crate::ConfigArgs;

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

#[derive(Args, Debug)]
pub struct Report {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSON-lines training log.
    #[arg(long)]
    log: PathBuf,
    /// Defaults to the log's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TrueType font for axis labels; common system locations are tried
    /// otherwise, and plots are drawn without text when none is found.
    #[arg(long)]
    font: Option<PathBuf>,
    /// Moving-average window for the smoothed loss curve.
    #[arg(long, default_value_t = 25)]
    window: usize,
}

fn register_font(explicit: Option<&Path>) -> bool {
    let candidates: Vec<PathBuf> = match explicit {
        Some(p) => vec![p.to_path_buf()],
        None => FONT_CANDIDATES.iter().map(PathBuf::from).collect(),
    };
    for p in candidates {
        if let Ok(bytes) = std::fs::read(&p) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    false
}

pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for (i, x) in v.iter().enumerate() {
        sum += x;
        if i >= w {
            sum -= v[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Draws `series` (name, colour, points) into a PNG.
fn line_plot(path: &Path, title: &str, series: &[(&str, RGBColor, Vec<(f64, f64)>)], text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let (x0, x1) = range(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(35).y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("step");
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.draw()?;
    for (name, color, points) in series {
        let drawn = chart.draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))?;
        if text {
            let c = *color;
            drawn.label(*name).legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], c.stroke_width(2)));
        }
    }
    if text {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn loss_series(log: &[StepRecord], window: usize) -> Vec<(&'static str, RGBColor, Vec<(f64, f64)>)> {
    let steps: Vec<f64> = log.iter().map(|r| r.step as f64).collect();
    let smooth = |f: fn(&StepRecord) -> f64| -> Vec<(f64, f64)> {
        let v: Vec<f64> = log.iter().map(f).collect();
        steps.iter().copied().zip(moving_average(&v, window)).collect()
    };
    vec![
        ("total", BLACK, smooth(|r| r.loss)),
        ("image, base", BLUE, smooth(|r| r.terms.img_base)),
        ("image, refined", RED, smooth(|r| r.terms.img_ref)),
        ("triplet", GREEN, smooth(|r| r.triplet)),
    ]
}

impl Report {
    pub fn run(self) -> Result<()> {
        let log = read_training_log(&self.log)?;
        if log.is_empty() {
            bail!("{} has no training steps", self.log.display());
        }
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => self.log.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = register_font(self.font.as_deref());
        if !text {
            warn!("no usable font found; plots are drawn without labels");
        }
        let loss_path = dir.join("loss_curve.png");
        line_plot(&loss_path, "training loss (moving average)", &loss_series(&log, self.window), text)?;
        let ratio: Vec<(f64, f64)> = log.iter().filter_map(|r| r.probe_ratio.map(|v| (r.step as f64, v))).collect();
        let ratio_path = dir.join("invariance_ratio.png");
        line_plot(&ratio_path, "latent invariance ratio", &[("probe ratio", BLUE, ratio.clone())], text)?;
        if ratio.is_empty() {
            warn!("the log has no invariance probes; the ratio plot is empty");
        }
        let cfg = styleinv_core::config::RunConfig::resolve(self.config.config.as_deref(), &self.config.overrides)?;
        cfg.write_snapshot(dir.join("report.config.toml"))?;
        info!("plots written to {} and {}", loss_path.display(), ratio_path.display());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_uses_partial_windows() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[1.0, 2.0], 0), vec![1.0, 2.0]);
        assert!(moving_average(&[], 3).is_empty());
    }
}
