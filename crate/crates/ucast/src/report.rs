//! Static-figure rendering: relative-skill scorecards and training-curve
//! charts as PNG images, each with a CSV sidecar that is the source of
//! truth for the plotted values.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::verification::SkillTable;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
const BLUE: Rgb<u8> = Rgb([40, 80, 200]);
const RED: Rgb<u8> = Rgb([200, 40, 40]);
const HATCH_BG: Rgb<u8> = Rgb([235, 235, 235]);
const HATCH_FG: Rgb<u8> = Rgb([150, 150, 150]);

const PALETTE: [Rgb<u8>; 5] = [
    Rgb([40, 80, 200]),
    Rgb([220, 120, 30]),
    Rgb([30, 150, 70]),
    Rgb([170, 40, 170]),
    Rgb([90, 90, 90]),
];

/// 5x7 bitmap glyphs; each byte is one row, low 5 bits used.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
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
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
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
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
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
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..5 {
                if bits & (0x10 >> dx) != 0 {
                    put(img, cx + dx as i64, y + dy as i64, color);
                }
            }
        }
        cx += 6;
    }
}

fn text_width(text: &str) -> i64 {
    6 * text.chars().count() as i64
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            put(img, x, y, color);
        }
    }
}

fn hatch_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64) {
    fill_rect(img, x0, y0, w, h, HATCH_BG);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if (x - x0 + y - y0) % 5 == 0 {
                put(img, x, y, HATCH_FG);
            }
        }
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(
            img,
            (x0 + t * (x1 - x0)).round() as i64,
            (y0 + t * (y1 - y0)).round() as i64,
            color,
        );
    }
}

/// Diverging blue-white-red map, white at zero, saturated at `bound`.
fn diverging_color(value: f64, bound: f64) -> Rgb<u8> {
    let t = (value / bound).clamp(-1.0, 1.0);
    let lerp = |a: u8, b: u8, f: f64| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    let (target, f) = if t < 0.0 { (BLUE, -t) } else { (RED, t) };
    Rgb([
        lerp(WHITE[0], target[0], f),
        lerp(WHITE[1], target[1], f),
        lerp(WHITE[2], target[2], f),
    ])
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("failed to write {}: {e}", path.display())))
}

/// Render a relative-skill table as a variable x lead heatmap. Negative
/// percentages (improvement) are blue, positive red, NaN cells hatched.
/// A CSV sidecar with the exact cell values is written next to the image.
pub fn render_scorecard(table: &SkillTable, path: &Path) -> Result<()> {
    if table.cells.is_empty() {
        return Err(Error::invalid("cannot render an empty scorecard"));
    }
    let mut variables: Vec<String> = Vec::new();
    for cell in &table.cells {
        if !variables.contains(&cell.variable) {
            variables.push(cell.variable.clone());
        }
    }
    let mut leads: Vec<usize> = table.cells.iter().map(|c| c.lead).collect();
    leads.sort_unstable();
    leads.dedup();

    let lookup = |var: &str, lead: usize| -> Option<f64> {
        table
            .cells
            .iter()
            .find(|c| c.variable == var && c.lead == lead)
            .map(|c| c.percent)
    };
    let bound = table
        .cells
        .iter()
        .map(|c| c.percent.abs())
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let cell_w: i64 = 58;
    let cell_h: i64 = 24;
    let label_w = variables.iter().map(|v| text_width(v)).fold(0, i64::max) + 16;
    let top: i64 = 22;
    let legend_h: i64 = 16;
    let width = label_w + cell_w * leads.len() as i64 + 8;
    let height = top + cell_h * variables.len() as i64 + legend_h + 8;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, WHITE);

    for (j, lead) in leads.iter().enumerate() {
        let text = format!("L{lead}");
        let x = label_w + cell_w * j as i64 + (cell_w - text_width(&text)) / 2;
        draw_text(&mut img, x, 8, &text, BLACK);
    }
    for (i, var) in variables.iter().enumerate() {
        let y = top + cell_h * i as i64 + (cell_h - 7) / 2;
        draw_text(&mut img, 8, y, var, BLACK);
        for (j, lead) in leads.iter().enumerate() {
            let x0 = label_w + cell_w * j as i64;
            let y0 = top + cell_h * i as i64;
            match lookup(var, *lead) {
                Some(v) if v.is_finite() => {
                    fill_rect(&mut img, x0 + 1, y0 + 1, cell_w - 2, cell_h - 2,
                        diverging_color(v, bound));
                    let text = format!("{v:.1}");
                    let tx = x0 + (cell_w - text_width(&text)) / 2;
                    draw_text(&mut img, tx, y0 + (cell_h - 7) / 2, &text, BLACK);
                }
                _ => hatch_rect(&mut img, x0 + 1, y0 + 1, cell_w - 2, cell_h - 2),
            }
        }
    }
    draw_text(
        &mut img,
        8,
        height - legend_h,
        "BLUE = BETTER  RED = WORSE  HATCHED = N/A",
        BLACK,
    );
    save_png(&img, path)?;

    let csv_path = path.with_extension("csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    writer
        .write_record(["metric", "variable", "lead", "percent"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for cell in &table.cells {
        writer
            .write_record([
                format!("{:?}", table.metric).to_lowercase(),
                cell.variable.clone(),
                cell.lead.to_string(),
                format!("{}", cell.percent),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainingCurve {
    pub label: String,
    /// (global step, metric value)
    pub points: Vec<(usize, f64)>,
}

/// Overlay one curve per run, with an optional horizontal dashed baseline
/// (e.g. the deterministic Stage-1 level). Empty input is a warning no-op.
pub fn render_training_curves(
    runs: &[TrainingCurve],
    baseline: Option<f64>,
    path: &Path,
) -> Result<()> {
    if runs.iter().all(|r| r.points.is_empty()) {
        eprintln!(
            "warning: no training history to plot, skipping {}",
            path.display()
        );
        return Ok(());
    }
    let (width, height) = (640i64, 400i64);
    let (ml, mr, mt, mb) = (56i64, 16i64, 16i64, 40i64);
    let mut img = RgbImage::from_pixel(width as u32, height as u32, WHITE);

    let xs: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.points.iter().map(|p| p.0 as f64))
        .collect();
    let mut ys: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .collect();
    if let Some(b) = baseline {
        ys.push(b);
    }
    let (x_min, x_max) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y_min, mut y_max) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if !(y_max > y_min) {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;
    let x_span = (x_max - x_min).max(1.0);

    let px = |x: f64| ml as f64 + (x - x_min) / x_span * (width - ml - mr) as f64;
    let py = |y: f64| (height - mb) as f64 - (y - y_min) / (y_max - y_min) * (height - mt - mb) as f64;

    // axes
    draw_line(&mut img, ml as f64, mt as f64, ml as f64, (height - mb) as f64, BLACK);
    draw_line(
        &mut img,
        ml as f64,
        (height - mb) as f64,
        (width - mr) as f64,
        (height - mb) as f64,
        BLACK,
    );
    draw_text(&mut img, 4, py(y_max - pad) as i64, &format!("{:.3}", y_max - pad), BLACK);
    draw_text(&mut img, 4, py(y_min + pad) as i64, &format!("{:.3}", y_min + pad), BLACK);
    draw_text(&mut img, ml, height - mb + 6, &format!("{}", x_min as i64), BLACK);
    {
        let text = format!("{}", x_max as i64);
        draw_text(&mut img, width - mr - text_width(&text), height - mb + 6, &text, BLACK);
    }
    draw_text(&mut img, width / 2 - 12, height - 14, "STEP", BLACK);

    if let Some(b) = baseline {
        let y = py(b);
        let mut x = px(x_min);
        while x < px(x_max) {
            draw_line(&mut img, x, y, (x + 5.0).min(px(x_max)), y, BLACK);
            x += 10.0;
        }
        draw_text(&mut img, ml + 4, y as i64 - 10, "BASELINE", BLACK);
    }

    let mut legend_y = mt + 4;
    for (i, run) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = run
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(s, v)| (px(s as f64), py(v)))
            .collect();
        for w2 in pts.windows(2) {
            draw_line(&mut img, w2[0].0, w2[0].1, w2[1].0, w2[1].1, color);
        }
        for &(x, y) in &pts {
            fill_rect(&mut img, x as i64 - 1, y as i64 - 1, 3, 3, color);
        }
        fill_rect(&mut img, width - mr - 110, legend_y, 10, 3, color);
        draw_text(&mut img, width - mr - 96, legend_y - 3, &run.label, BLACK);
        legend_y += 12;
    }
    save_png(&img, path)?;

    let csv_path = path.with_extension("csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    writer
        .write_record(["run", "step", "value"])
        .map_err(|e| Error::Format(e.to_string()))?;
    if let Some(b) = baseline {
        writer
            .write_record(["baseline", "", &format!("{b}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for run in runs {
        for &(step, value) in &run.points {
            writer
                .write_record([run.label.as_str(), &step.to_string(), &format!("{value}")])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{SkillCell, SkillMetric};

    fn table(cells: Vec<SkillCell>) -> SkillTable {
        let aggregate = if cells.is_empty() {
            f64::NAN
        } else {
            cells.iter().map(|c| c.percent).sum::<f64>() / cells.len() as f64
        };
        SkillTable {
            metric: SkillMetric::Crps,
            cells,
            aggregate,
        }
    }

    fn cell(variable: &str, lead: usize, percent: f64) -> SkillCell {
        SkillCell {
            variable: variable.into(),
            lead,
            percent,
        }
    }

    #[test]
    fn empty_table_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = render_scorecard(&table(vec![]), &dir.path().join("card.png")).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn single_negative_cell_is_blue_with_csv_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("card.png");
        render_scorecard(&table(vec![cell("z500", 4, -12.5)]), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // sample just inside the cell corner, away from the value label
        let px = img.get_pixel(img.width() - 10, 26);
        assert!(px[2] > px[0], "expected a blue cell, got {px:?}");
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        assert!(csv.contains("-12.5"));
        assert!(csv.contains("z500"));
    }

    #[test]
    fn all_zero_table_is_neutral() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("card.png");
        let cells = vec![cell("a", 1, 0.0), cell("a", 2, 0.0), cell("b", 1, 0.0), cell("b", 2, 0.0)];
        render_scorecard(&table(cells), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // corners of every cell should be pure white (no tint)
        assert_eq!(*img.get_pixel(img.width() - 10, 26), WHITE);
    }

    #[test]
    fn nan_cell_is_hatched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("card.png");
        render_scorecard(&table(vec![cell("a", 1, f64::NAN), cell("a", 2, 3.0)]), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let n_hatch = img.pixels().filter(|p| **p == HATCH_FG).count();
        assert!(n_hatch > 10, "expected hatching, found {n_hatch} pixels");
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(vec![cell("a", 1, -3.0), cell("a", 2, 5.0)]);
        let p1 = dir.path().join("one.png");
        let p2 = dir.path().join("two.png");
        render_scorecard(&t, &p1).unwrap();
        render_scorecard(&t, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn curves_with_baseline_write_image_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.png");
        let runs = vec![
            TrainingCurve {
                label: "CURRICULUM".into(),
                points: (0..10).map(|i| (i * 5, 1.0 / (i + 1) as f64)).collect(),
            },
            TrainingCurve {
                label: "SCRATCH".into(),
                points: (0..10).map(|i| (i * 5, 1.3 / (i + 1) as f64)).collect(),
            },
        ];
        render_training_curves(&runs, Some(0.4), &path).unwrap();
        assert!(path.exists());
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        assert!(csv.contains("baseline"));
        assert!(csv.contains("CURRICULUM"));
    }

    #[test]
    fn constant_metric_flat_line_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.png");
        let runs = vec![TrainingCurve {
            label: "RUN".into(),
            points: (0..5).map(|i| (i, 2.0)).collect(),
        }];
        render_training_curves(&runs, None, &path).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn empty_history_is_a_noop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.png");
        render_training_curves(&[], None, &path).unwrap();
        assert!(!path.exists());
    }
}
