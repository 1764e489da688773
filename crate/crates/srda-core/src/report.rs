//! Report generation: validation-DSC curves, a results table, and
//! per-subject prediction/entropy panels rendered straight to PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Axis;

use crate::data_synth::{load_volumes, split, LoadedVolume, SliceLayout};
use crate::error::{Result, SrdaError};
use crate::fsprobe;
use crate::metrics::{argmax_mask, entropy_map};
use crate::models::load_checkpoint;
use crate::trainer::{
    Method, RunSummary, Segmenter, BEST_CHECKPOINT_FILE, RECORD_FILE, SUMMARY_FILE,
};

/// One training run's persisted artifacts, as found on disk.
pub struct RunInfo {
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// (epoch, val_dsc) pairs from `record.csv`.
    pub curve: Vec<(usize, f64)>,
}

fn parse_record_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = String::from_utf8(fsprobe::read_bytes(path)?)
        .map_err(|_| SrdaError::format(path, "record is not UTF-8"))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            return Err(SrdaError::format(path, format!("short row '{line}'")));
        }
        let epoch: usize = cols[0]
            .parse()
            .map_err(|_| SrdaError::format(path, "bad epoch"))?;
        let dsc: f64 = cols[5]
            .parse()
            .map_err(|_| SrdaError::format(path, "bad val_dsc"))?;
        out.push((epoch, dsc));
    }
    Ok(out)
}

/// Scan a directory of run directories (anything holding a `summary.json`).
pub fn scan_runs(runs_root: &Path) -> Result<Vec<RunInfo>> {
    let mut runs = Vec::new();
    for entry in fsprobe::read_dir_sorted(runs_root)? {
        let summary_path = entry.join(SUMMARY_FILE);
        if !summary_path.is_file() {
            continue;
        }
        let summary: RunSummary = serde_json::from_slice(&fsprobe::read_bytes(&summary_path)?)?;
        let record_path = entry.join(RECORD_FILE);
        let curve = if record_path.is_file() {
            parse_record_curve(&record_path)?
        } else {
            Vec::new()
        };
        runs.push(RunInfo {
            dir: entry,
            summary,
            curve,
        });
    }
    if runs.is_empty() {
        return Err(SrdaError::MissingInput(format!(
            "no run directories with {SUMMARY_FILE} under {}",
            runs_root.display()
        )));
    }
    Ok(runs)
}

fn method_color(method: Method) -> Rgb<u8> {
    match method {
        Method::NoAdapt => Rgb([200, 60, 60]),
        Method::AdaEnt => Rgb([50, 90, 200]),
        Method::AdaSource => Rgb([220, 150, 40]),
        Method::Oracle => Rgb([60, 160, 80]),
    }
}

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        let mut img = RgbImage::new(w, h);
        for p in img.pixels_mut() {
            *p = BG;
        }
        Canvas { img }
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, color);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = glyph_for(ch.to_ascii_uppercase());
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..5 {
                    if bits & (1 << (4 - col)) != 0 {
                        self.put(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| SrdaError::format(path, e.to_string()))
    }
}

/// Validation DSC over training for every run, one colored line per method.
pub fn render_dsc_curves(runs: &[RunInfo], path: &Path) -> Result<()> {
    let (w, h) = (860u32, 520u32);
    let (ml, mr, mt, mb) = (70i64, 30i64, 30i64, 60i64);
    let plot_w = w as i64 - ml - mr;
    let plot_h = h as i64 - mt - mb;
    let mut canvas = Canvas::new(w, h);

    let max_epoch = runs
        .iter()
        .flat_map(|r| r.curve.iter().map(|(e, _)| *e))
        .max()
        .unwrap_or(1)
        .max(1);

    // Axes and grid.
    for i in 0..=10 {
        let y = mt + plot_h - plot_h * i / 10;
        canvas.line(ml, y, ml + plot_w, y, GRID);
        canvas.text(ml - 30, y - 3, &format!("{:.1}", i as f64 / 10.0), FG);
    }
    let x_ticks = 8.min(max_epoch);
    for i in 0..=x_ticks {
        let epoch = max_epoch * i / x_ticks.max(1);
        let x = ml + plot_w * i as i64 / x_ticks.max(1) as i64;
        canvas.line(x, mt, x, mt + plot_h, GRID);
        canvas.text(x - 6, mt + plot_h + 8, &format!("{epoch}"), FG);
    }
    canvas.line(ml, mt, ml, mt + plot_h, FG);
    canvas.line(ml, mt + plot_h, ml + plot_w, mt + plot_h, FG);
    canvas.text(ml + plot_w / 2 - 20, h as i64 - 24, "EPOCH", FG);
    canvas.text(6, mt - 10, "VAL DSC", FG);

    for run in runs {
        let color = method_color(run.summary.method);
        let mut prev: Option<(i64, i64)> = None;
        for &(epoch, dsc) in &run.curve {
            let x = ml + plot_w * epoch as i64 / max_epoch as i64;
            let y = mt + plot_h - (dsc.clamp(0.0, 1.0) * plot_h as f64) as i64;
            if let Some((px, py)) = prev {
                canvas.line(px, py, x, y, color);
                canvas.line(px, py + 1, x, y + 1, color);
            }
            prev = Some((x, y));
        }
    }

    // Legend.
    let mut ly = mt + 10;
    for run in runs {
        let color = method_color(run.summary.method);
        canvas.fill_rect(ml + plot_w - 150, ly, 18, 8, color);
        canvas.text(
            ml + plot_w - 125,
            ly,
            &run.summary.method.to_string(),
            FG,
        );
        ly += 16;
    }

    canvas.save(path)
}

/// Results table as CSV and aligned text.
pub fn render_table(runs: &[RunInfo], csv_path: &Path, txt_path: &Path) -> Result<()> {
    let mut csv = String::from("method,dsc_mean,dsc_std,hd_mean,hd_std,val_entropy_mean\n");
    let mut txt = String::new();
    txt.push_str(&format!(
        "{:<12} {:>16} {:>16} {:>14}\n",
        "method", "DSC (%)", "HD (pix)", "val entropy"
    ));
    for run in runs {
        let s = &run.summary;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.method, s.eval.dsc_mean, s.eval.dsc_std, s.eval.hd_mean, s.eval.hd_std,
            s.eval.entropy_mean
        ));
        txt.push_str(&format!(
            "{:<12} {:>8.1} - {:<4.1} {:>8.2} - {:<4.2} {:>14.4}\n",
            s.method.to_string(),
            100.0 * s.eval.dsc_mean,
            100.0 * s.eval.dsc_std,
            s.eval.hd_mean,
            s.eval.hd_std,
            s.eval.entropy_mean
        ));
    }
    txt.push_str(
        "\nmean - std over validation volumes; per-volume scores average 2D slice\n\
         metrics over slices whose ground truth contains foreground.\n",
    );
    std::fs::write(csv_path, csv)?;
    std::fs::write(txt_path, txt)?;
    Ok(())
}

fn gray_tile(values: &ndarray::Array2<f64>, scale: usize) -> RgbImage {
    let (h, w) = values.dim();
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (values[[y, x]].clamp(0.0, 1.0) * 255.0) as u8;
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(
                        (x * scale + dx) as u32,
                        (y * scale + dy) as u32,
                        Rgb([v, v, v]),
                    );
                }
            }
        }
    }
    img
}

/// Four-anchor heat ramp for entropy maps, normalized by ln K.
fn heat_color(t: f64) -> Rgb<u8> {
    let anchors = [
        (0.0, [10.0, 8.0, 40.0]),
        (0.35, [120.0, 28.0, 109.0]),
        (0.7, [237.0, 105.0, 37.0]),
        (1.0, [252.0, 255.0, 164.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in anchors.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return Rgb([
                (c0[0] + f * (c1[0] - c0[0])) as u8,
                (c0[1] + f * (c1[1] - c0[1])) as u8,
                (c0[2] + f * (c1[2] - c0[2])) as u8,
            ]);
        }
    }
    Rgb([252, 255, 164])
}

fn heat_tile(values: &ndarray::Array2<f64>, max_value: f64, scale: usize) -> RgbImage {
    let (h, w) = values.dim();
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h {
        for x in 0..w {
            let c = heat_color(values[[y, x]] / max_value.max(1e-12));
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel((x * scale + dx) as u32, (y * scale + dy) as u32, c);
                }
            }
        }
    }
    img
}

fn blit(canvas: &mut Canvas, tile: &RgbImage, x: i64, y: i64) {
    for (tx, ty, p) in tile.enumerate_pixels() {
        canvas.put(x + tx as i64, y + ty as i64, *p);
    }
}

/// Per-subject panel: for the validation volume's most foreground-heavy
/// slice, show input, ground truth, then each method's prediction and
/// prediction-entropy map.
pub fn render_subject_panel(
    runs: &[RunInfo],
    volume: &LoadedVolume,
    classes: usize,
    path: &Path,
) -> Result<()> {
    // Representative slice: largest foreground area.
    let depth = volume.mask.dim().0;
    let z = (0..depth)
        .max_by_key(|&z| {
            volume
                .mask
                .index_axis(Axis(0), z)
                .iter()
                .filter(|&&v| v != 0)
                .count()
        })
        .unwrap_or(0);
    let image = volume.image.index_axis(Axis(0), z).to_owned();
    let gt = volume.mask.index_axis(Axis(0), z).mapv(|v| v as f64);

    let scale = 2usize;
    let (ih, iw) = image.dim();
    let tile_w = (iw * scale) as i64;
    let tile_h = (ih * scale) as i64;
    let pad = 8i64;
    let label_w = 80i64;
    let header_h = 24i64;
    let cols = 4i64;
    let w = label_w + cols * (tile_w + pad) + pad;
    let h = header_h + runs.len() as i64 * (tile_h + pad) + pad;
    let mut canvas = Canvas::new(w as u32, h as u32);

    for (c, title) in ["INPUT", "GROUND TRUTH", "PREDICTION", "ENTROPY"]
        .iter()
        .enumerate()
    {
        canvas.text(label_w + c as i64 * (tile_w + pad) + 4, 8, title, FG);
    }

    let max_entropy = (classes as f64).ln();
    for (r, run) in runs.iter().enumerate() {
        let y = header_h + r as i64 * (tile_h + pad);
        canvas.text(4, y + tile_h / 2 - 4, run.summary.method.as_str(), FG);

        let ckpt = run.dir.join(BEST_CHECKPOINT_FILE);
        let model = load_checkpoint(&ckpt)?.model;
        let probs = model.probs(&image)?;
        let pred = argmax_mask(&probs);
        let ent = entropy_map(&probs);

        blit(&mut canvas, &gray_tile(&image, scale), label_w, y);
        blit(
            &mut canvas,
            &gray_tile(&gt, scale),
            label_w + (tile_w + pad),
            y,
        );
        let pred_f = pred.values().mapv(|v| v as f64);
        blit(
            &mut canvas,
            &gray_tile(&pred_f, scale),
            label_w + 2 * (tile_w + pad),
            y,
        );
        blit(
            &mut canvas,
            &heat_tile(&ent, max_entropy, scale),
            label_w + 3 * (tile_w + pad),
            y,
        );
    }
    canvas.save(path)
}

pub struct ReportPaths {
    pub curves: PathBuf,
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
    pub panels: Vec<PathBuf>,
}

/// Produce every report artifact into `out_dir`. Subject panels need the
/// dataset; when `data_root` is `None` they are skipped.
pub fn write_report(
    runs_root: &Path,
    data_root: Option<&Path>,
    out_dir: &Path,
) -> Result<ReportPaths> {
    let runs = scan_runs(runs_root)?;
    std::fs::create_dir_all(out_dir)?;

    let curves = out_dir.join("dsc_curves.png");
    render_dsc_curves(&runs, &curves)?;

    let table_csv = out_dir.join("table.csv");
    let table_txt = out_dir.join("table.txt");
    render_table(&runs, &table_csv, &table_txt)?;

    let mut panels = Vec::new();
    if let Some(data_root) = data_root {
        // Use the first adaptation-style run's config for split and modality;
        // fall back to the first run.
        let reference = runs
            .iter()
            .find(|r| r.summary.config.target_data.is_some())
            .unwrap_or(&runs[0]);
        let cfg = &reference.summary.config;
        let layout = SliceLayout::for_modality(cfg.target_modality);
        let volumes = load_volumes(data_root, &layout)?;
        let (_, val) = split(&volumes, cfg.train_volumes, cfg.val_volumes)?;
        for vol in val {
            let path = out_dir.join(format!("entropy_{}.png", vol.name));
            render_subject_panel(&runs, vol, cfg.classes, &path)?;
            panels.push(path);
        }
    }

    Ok(ReportPaths {
        curves,
        table_csv,
        table_txt,
        panels,
    })
}

/// 5x7 bitmap glyphs; each byte is one row, low 5 bits used.
fn glyph_for(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0x00; 7],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), Rgb([10, 8, 40]));
        assert_eq!(heat_color(1.0), Rgb([252, 255, 164]));
        // Monotone-ish brightness.
        let lo = heat_color(0.1);
        let hi = heat_color(0.9);
        let lum = |c: Rgb<u8>| c.0.iter().map(|&v| v as u32).sum::<u32>();
        assert!(lum(hi) > lum(lo));
    }

    #[test]
    fn glyphs_cover_needed_alphabet() {
        for ch in "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,-+%()/=:_".chars() {
            assert_ne!(glyph_for(ch), [0u8; 7], "missing glyph for {ch}");
        }
        assert_eq!(glyph_for(' '), [0u8; 7]);
    }
}
