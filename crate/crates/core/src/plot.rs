//! Raster figures from a finished run directory: per-seed sample grids,
//! sensitivity curves and uncertainty-per-round curves. Charts carry no text;
//! the numbers behind each chart sit in the run's CSV files and in
//! `plots/summary.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::config::ExperimentConfig;
use crate::data::store::read_f32_file;
use crate::data::ImageGrid;
use crate::error::{Error, IoContext, Result};
use crate::experiment::{plan_cells, CONFIG_FILE, MAPS_DIR};
use crate::raster;

pub const PLOTS_DIR: &str = "plots";

const CHART_W: u32 = 480;
const CHART_H: u32 = 320;
const MARGIN: f32 = 36.0;
const TILE_SCALE: u32 = 2;
const GAP: u32 = 4;

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

#[derive(Debug, Default)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
    pub missing: Vec<String>,
    /// One line per (cell, seed) uncertainty curve describing its trend.
    pub trends: Vec<String>,
}

/// A curve with optional symmetric error bars.
struct Series {
    points: Vec<(f64, f64)>,
    errors: Option<Vec<f64>>,
    color: Rgb<u8>,
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut it = series.iter().flat_map(|s| {
        s.points.iter().enumerate().map(move |(i, &(x, y))| {
            let e = s.errors.as_ref().map_or(0.0, |e| e[i]);
            (x, y - e, y + e)
        })
    });
    let (x0, lo0, hi0) = it.next()?;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (x0, x0, lo0, hi0);
    for (x, lo, hi) in it {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(lo);
        ymax = ymax.max(hi);
    }
    if xmax == xmin {
        xmin -= 0.5;
        xmax += 0.5;
    }
    let pad = if ymax > ymin { 0.08 * (ymax - ymin) } else { ymin.abs().max(1e-6) * 0.1 };
    Some((xmin, xmax, ymin - pad, ymax + pad))
}

/// Line chart with axes and tick marks at every distinct x.
fn line_chart(series: &[Series], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, Rgb([255, 255, 255]));
    let (xmin, xmax, ymin, ymax) = bounds(series).ok_or_else(|| Error::InvalidArgument("chart without points".into()))?;
    let (w, h) = (CHART_W as f32, CHART_H as f32);
    let px = |x: f64| MARGIN + ((x - xmin) / (xmax - xmin)) as f32 * (w - 2.0 * MARGIN);
    let py = |y: f64| h - MARGIN - ((y - ymin) / (ymax - ymin)) as f32 * (h - 2.0 * MARGIN);
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    draw_line_segment_mut(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    for s in series {
        for &(x, _) in &s.points {
            draw_line_segment_mut(&mut img, (px(x), h - MARGIN), (px(x), h - MARGIN + 5.0), axis);
        }
        for pair in s.points.windows(2) {
            draw_line_segment_mut(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), s.color);
        }
        for (i, &(x, y)) in s.points.iter().enumerate() {
            if let Some(e) = s.errors.as_ref().map(|e| e[i]) {
                draw_line_segment_mut(&mut img, (px(x), py(y - e)), (px(x), py(y + e)), s.color);
                draw_line_segment_mut(&mut img, (px(x) - 3.0, py(y - e)), (px(x) + 3.0, py(y - e)), s.color);
                draw_line_segment_mut(&mut img, (px(x) - 3.0, py(y + e)), (px(x) + 3.0, py(y + e)), s.color);
            }
            draw_filled_circle_mut(&mut img, (px(x).round() as i32, py(y).round() as i32), 3, s.color);
        }
    }
    img.save(path)?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect())
}

fn field(row: &[String], i: usize, path: &Path) -> Result<f64> {
    row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: format!("bad numeric field {i} in row {row:?}"),
    })
}

fn sensitivity_plots(run_dir: &Path, plots: &Path, summary: &mut PlotSummary) -> Result<()> {
    let path = run_dir.join("sensitivity.csv");
    if !path.is_file() {
        summary.missing.push("sensitivity.csv".into());
        return Ok(());
    }
    let rows = read_csv(&path)?;
    for param in ["beta", "k"] {
        let mut pts: Vec<(f64, f64, f64)> = Vec::new();
        for r in rows.iter().filter(|r| r[0] == param) {
            pts.push((field(r, 1, &path)?, field(r, 3, &path)?, field(r, 4, &path)?));
        }
        if pts.is_empty() {
            summary.missing.push(format!("sensitivity.csv rows for {param}"));
            continue;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let series = Series {
            points: pts.iter().map(|p| (p.0, p.1)).collect(),
            errors: Some(pts.iter().map(|p| p.2).collect()),
            color: Rgb(PALETTE[0]),
        };
        let out = plots.join(format!("sensitivity_{param}.png"));
        line_chart(&[series], &out)?;
        summary.written.push(out);
    }
    Ok(())
}

/// Describes a curve: nonincreasing, decreasing overall, or not decreasing.
pub fn trend_label(values: &[f64]) -> &'static str {
    if values.len() < 2 {
        return "too short";
    }
    if values.windows(2).all(|w| w[1] <= w[0]) {
        "nonincreasing"
    } else if values[values.len() - 1] < values[0] {
        "decreasing overall"
    } else {
        "not decreasing"
    }
}

fn uncertainty_plots(run_dir: &Path, cfg: &ExperimentConfig, plots: &Path, summary: &mut PlotSummary) -> Result<()> {
    for cell in plan_cells(cfg).iter().filter(|c| c.method.adapts()) {
        let mut series = Vec::new();
        for (n, &seed) in cfg.seeds.iter().enumerate() {
            let path = run_dir.join(format!("seed_{seed}")).join(cell.dir_name()).join("uncertainty.csv");
            if !path.is_file() {
                summary.missing.push(format!("seed_{seed}/{}/uncertainty.csv", cell.dir_name()));
                continue;
            }
            let mut points = Vec::new();
            for r in read_csv(&path)? {
                points.push((field(&r, 0, &path)?, field(&r, 1, &path)?));
            }
            let values: Vec<f64> = points.iter().map(|p| p.1).collect();
            summary.trends.push(format!("{} seed {seed}: {}", cell.label(), trend_label(&values)));
            if points.is_empty() {
                continue;
            }
            series.push(Series {
                points,
                errors: None,
                color: Rgb(PALETTE[n % PALETTE.len()]),
            });
        }
        if !series.is_empty() {
            let out = plots.join(format!("uncertainty_{}.png", cell.dir_name()));
            line_chart(&series, &out)?;
            summary.written.push(out);
        }
    }
    Ok(())
}

fn read_map(maps: &Path, name: &str) -> Result<Option<ImageGrid>> {
    let path = maps.join(format!("{name}.bin"));
    if !path.is_file() {
        return Ok(None);
    }
    let dims_path = maps.join("dims.txt");
    let dims = fs::read_to_string(&dims_path).at(&dims_path)?;
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|v| v.parse().ok()).collect();
    let [h, w] = parsed[..] else {
        return Err(Error::Format {
            path: dims_path,
            message: "expected `height width`".into(),
        });
    };
    read_f32_file(&path, h, w, (0.0, 1.0)).map(Some)
}

/// Tile for one map: intensities on the nominal scale, uncertainty
/// autoscaled, masks on `[0, 1]`.
fn tile(grid: &ImageGrid, name: &str) -> GrayImage {
    let img = match name {
        "u_total" => raster::to_gray(grid, grid.min(), grid.max()),
        "mask" | "attention" => raster::to_gray(grid, 0.0, 1.0),
        _ => raster::to_gray(grid, 0.0, 255.0),
    };
    imageops::resize(&img, img.width() * TILE_SCALE, img.height() * TILE_SCALE, imageops::FilterType::Nearest)
}

const GRID_COLUMNS: [&str; 5] = ["input", "pred", "truth", "u_total", "mask"];

/// One row per cell: input, prediction, truth, total uncertainty, mask.
fn sample_grid(run_dir: &Path, cfg: &ExperimentConfig, seed: u64, plots: &Path, summary: &mut PlotSummary) -> Result<()> {
    let mut rows: Vec<Vec<Option<GrayImage>>> = Vec::new();
    for cell in plan_cells(cfg) {
        let maps = run_dir.join(format!("seed_{seed}")).join(cell.dir_name()).join(MAPS_DIR);
        if !maps.is_dir() {
            summary.missing.push(format!("seed_{seed}/{}/{MAPS_DIR}", cell.dir_name()));
            continue;
        }
        let mut row = Vec::new();
        for name in GRID_COLUMNS {
            row.push(read_map(&maps, name)?.map(|g| tile(&g, name)));
        }
        rows.push(row);
    }
    let Some((tw, th)) = rows.iter().flatten().flatten().next().map(|t| (t.width(), t.height())) else {
        return Ok(());
    };
    let cols = GRID_COLUMNS.len() as u32;
    let mut canvas = GrayImage::from_pixel(cols * (tw + GAP) + GAP, rows.len() as u32 * (th + GAP) + GAP, Luma([255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            let (x, y) = (GAP + c as u32 * (tw + GAP), GAP + r as u32 * (th + GAP));
            match t {
                Some(t) => imageops::overlay(&mut canvas, t, x as i64, y as i64),
                None => {
                    let mut rgb = RgbImage::from_pixel(tw, th, Rgb([255, 255, 255]));
                    draw_hollow_rect_mut(&mut rgb, Rect::at(0, 0).of_size(tw, th), Rgb([160, 160, 160]));
                    imageops::overlay(&mut canvas, &image::DynamicImage::ImageRgb8(rgb).to_luma8(), x as i64, y as i64);
                }
            }
        }
    }
    let out = plots.join(format!("samples_seed_{seed}.png"));
    canvas.save(&out)?;
    summary.written.push(out);
    Ok(())
}

/// Renders every figure whose inputs exist and lists the ones that do not.
/// A directory without a resolved config is an error naming what a run
/// directory should contain.
pub fn cmd_plot(run_dir: &Path) -> Result<PlotSummary> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(Error::MissingArtifacts(vec![
            format!("{}", cfg_path.display()),
            "report.csv".into(),
            "sensitivity.csv".into(),
            "seed_<s>/<cell>/uncertainty.csv".into(),
            "seed_<s>/<cell>/maps/".into(),
        ]));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let plots = run_dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots).at(&plots)?;
    let mut summary = PlotSummary::default();
    for &seed in &cfg.seeds {
        sample_grid(run_dir, &cfg, seed, &plots, &mut summary)?;
    }
    if !cfg.sweep_beta.is_empty() || !cfg.sweep_k.is_empty() {
        sensitivity_plots(run_dir, &plots, &mut summary)?;
    }
    uncertainty_plots(run_dir, &cfg, &plots, &mut summary)?;
    let mut text = String::from("figures:\n");
    for p in &summary.written {
        text.push_str(&format!("  {}\n", p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())));
    }
    text.push_str("uncertainty per round (monitor slice):\n");
    for t in &summary.trends {
        text.push_str(&format!("  {t}\n"));
    }
    if !summary.missing.is_empty() {
        text.push_str("missing:\n");
        for m in &summary.missing {
            text.push_str(&format!("  {m}\n"));
        }
    }
    let path = plots.join("summary.txt");
    fs::write(&path, text).at(&path)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_labels() {
        assert_eq!(trend_label(&[3.0, 2.0, 2.0, 1.0]), "nonincreasing");
        assert_eq!(trend_label(&[3.0, 3.5, 1.0]), "decreasing overall");
        assert_eq!(trend_label(&[1.0, 2.0]), "not decreasing");
        assert_eq!(trend_label(&[1.0]), "too short");
    }

    #[test]
    fn empty_dir_lists_expectations() {
        let dir = tempfile::tempdir().unwrap();
        match cmd_plot(dir.path()) {
            Err(Error::MissingArtifacts(items)) => assert!(items.iter().any(|i| i.contains("config.txt"))),
            other => panic!("expected missing artifacts, got {other:?}"),
        }
    }

    #[test]
    fn chart_renders_to_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let s = Series {
            points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.5)],
            errors: Some(vec![0.1, 0.0, 0.2]),
            color: Rgb(PALETTE[1]),
        };
        line_chart(&[s], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (CHART_W, CHART_H));
        assert!(img.pixels().any(|p| *p == Rgb(PALETTE[1])));
    }
}
