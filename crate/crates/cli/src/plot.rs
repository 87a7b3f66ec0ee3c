//! Static bar charts rendered to PNG with a built-in 5x7 bitmap font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};

const GLYPH_W: u32 = 5;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [225, 225, 225];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, Rgb(WHITE)),
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (w, h) = (self.img.width() as i64, self.img.height() as i64);
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                self.img.put_pixel(x as u32, y as u32, Rgb(c));
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, scale: u32, c: [u8; 3]) {
        let k = scale as i64;
        for (i, ch) in s.chars().enumerate() {
            let gx = x + i as i64 * (GLYPH_W as i64 + 1) * k;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        let px = gx + col as i64 * k;
                        let py = y + row as i64 * k;
                        self.fill(px, py, px + k, py + k, c);
                    }
                }
            }
        }
    }

    fn centered(&mut self, cx: i64, y: i64, s: &str, scale: u32, c: [u8; 3]) {
        self.text(cx - text_width(s, scale) / 2, y, s, scale, c);
    }
}

fn text_width(s: &str, scale: u32) -> i64 {
    let n = s.chars().count() as i64;
    if n == 0 {
        0
    } else {
        (n * (GLYPH_W as i64 + 1) - 1) * scale as i64
    }
}

/// One bar per category; `spread` draws a min-max whisker.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub spread: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Debug)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
}

impl BarChart {
    pub fn render(&self) -> RgbImage {
        let n_cat = self.categories.len().max(1) as i64;
        let n_ser = self.series.len().max(1) as i64;
        let legend = self.series.len() > 1;
        let (left, right, top, bottom) = (64i64, if legend { 150 } else { 24 }, 40i64, 44i64);
        let group_w = (n_ser * 14 + 16).max(56);
        let width = (left + right + n_cat * group_w).max(text_width(&self.title, 2) + 40);
        let height = 360i64;
        let mut cv = Canvas::new(width as u32, height as u32);
        let plot_h = height - top - bottom;

        let peak = self
            .series
            .iter()
            .flat_map(|s| s.values.iter().flatten().chain(s.spread.iter().flatten().map(|(_, hi)| hi)))
            .fold(0.0f64, |m, &v| m.max(v));
        let y_max = ((peak / 10.0).ceil() * 10.0).max(10.0);
        let step = if y_max > 50.0 { 20.0 } else { 10.0 };
        let y_of = |v: f64| top + plot_h - ((v.clamp(0.0, y_max) / y_max) * plot_h as f64).round() as i64;

        let mut tick = 0.0;
        while tick <= y_max + 1e-9 {
            let y = y_of(tick);
            cv.fill(left, y, width - right, y + 1, GRID);
            let label = format!("{tick:.0}");
            cv.text(left - 8 - text_width(&label, 1), y - 3, &label, 1, BLACK);
            tick += step;
        }
        cv.fill(left, top, left + 1, top + plot_h + 1, BLACK);
        cv.fill(left, top + plot_h, width - right, top + plot_h + 1, BLACK);
        cv.centered(width / 2, 12, &self.title, 2, BLACK);
        cv.text(4, top - 16, &self.y_label, 1, BLACK);

        for (ci, cat) in self.categories.iter().enumerate() {
            let gx = left + ci as i64 * group_w;
            let inner = n_ser * 14;
            let x0 = gx + (group_w - inner) / 2;
            for (si, s) in self.series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                let bx = x0 + si as i64 * 14;
                if let Some(Some(v)) = s.values.get(ci) {
                    cv.fill(bx + 1, y_of(*v), bx + 13, top + plot_h, color);
                    if !legend {
                        let label = format!("{v:.1}");
                        cv.centered(bx + 7, y_of(*v) - 10, &label, 1, BLACK);
                    }
                }
                if let Some(Some((lo, hi))) = s.spread.get(ci) {
                    let (ylo, yhi) = (y_of(*lo), y_of(*hi));
                    cv.fill(bx + 6, yhi, bx + 8, ylo + 1, BLACK);
                    cv.fill(bx + 3, yhi, bx + 11, yhi + 1, BLACK);
                    cv.fill(bx + 3, ylo, bx + 11, ylo + 1, BLACK);
                }
            }
            cv.centered(gx + group_w / 2, top + plot_h + 10, cat, 1, BLACK);
        }

        if legend {
            let lx = width - right + 12;
            for (si, s) in self.series.iter().enumerate() {
                let y = top + si as i64 * 14;
                cv.fill(lx, y, lx + 10, y + 8, PALETTE[si % PALETTE.len()]);
                cv.text(lx + 16, y, &s.name, 1, BLACK);
            }
        }
        cv.img
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render().save(path).map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_glyph_fits_the_cell() {
        for c in (' '..='~').chain(['?']) {
            assert!(glyph(c).iter().all(|row| row >> GLYPH_W == 0), "{c:?}");
        }
        assert_eq!(text_width("", 1), 0);
        assert_eq!(text_width("AB", 2), 22);
    }

    #[test]
    fn bars_are_drawn_in_series_colors() {
        let chart = BarChart {
            title: "T".into(),
            y_label: "MIOU".into(),
            categories: vec!["S1".into(), "S2".into()],
            series: vec![Series {
                name: "a".into(),
                values: vec![Some(40.0), None],
                spread: vec![Some((35.0, 45.0)), None],
            }],
        };
        let img = chart.render();
        let bar = img.pixels().filter(|p| p.0 == PALETTE[0]).count();
        assert!(bar > 100);
    }
}
