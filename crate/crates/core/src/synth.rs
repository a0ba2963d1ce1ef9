//! Procedural toy corpus: cluttered gray scenes, each with one high-contrast
//! 2:1 stick figure whose bounding box is the ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Result};
use crate::geometry::BBox;
use crate::imaging::{save_pgm, GrayImage};

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub width: usize,
    pub height: usize,
    pub min_figure_h: f64,
    pub max_figure_h: f64,
    pub min_clutter: usize,
    pub max_clutter: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Minimum |figure − local background| intensity difference.
    pub contrast: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            width: 144,
            height: 208,
            min_figure_h: 128.0,
            max_figure_h: 180.0,
            min_clutter: 6,
            max_clutter: 12,
            noise: 0.02,
            contrast: 0.45,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_figure_h > self.max_figure_h || self.min_figure_h <= 0.0 {
            return arg_err("figure height range is empty");
        }
        if self.max_figure_h > self.height as f64 || self.max_figure_h * 0.5 > self.width as f64 {
            return arg_err("largest figure does not fit the scene");
        }
        if self.min_clutter > self.max_clutter {
            return arg_err("clutter range is empty");
        }
        Ok(())
    }
}

/// A rendered scene and the boxes of its figures.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub image: GrayImage<f32>,
    pub figures: Vec<BBox>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Paints `value` wherever `inside(x, y)` holds, within the given bounds.
    fn paint(&mut self, bounds: (f64, f64, f64, f64), value: f64, inside: impl Fn(f64, f64) -> bool) {
        let (x0, y0, x1, y1) = bounds;
        let xs = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize).min(self.w);
        let ys = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize).min(self.h);
        for y in ys {
            for x in xs.clone() {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.w + x] = value;
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, value: f64) {
        let bounds = (a.0.min(b.0) - radius, a.1.min(b.1) - radius, a.0.max(b.0) + radius, a.1.max(b.1) + radius);
        self.paint(bounds, value, |x, y| seg_dist((x, y), a, b) <= radius);
    }

    fn disc(&mut self, c: (f64, f64), r: f64, value: f64) {
        self.paint((c.0 - r, c.1 - r, c.0 + r, c.1 + r), value, |x, y| (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r);
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, value: f64) {
        self.paint((x, y, x + w, y + h), value, |_, _| true);
    }

    fn mean_in(&self, b: &BBox) -> f64 {
        let (x0, y0) = (b.x.max(0.0) as usize, b.y.max(0.0) as usize);
        let (x1, y1) = (((b.x + b.w) as usize).min(self.w), ((b.y + b.h) as usize).min(self.h));
        let mut s = 0.0;
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                s += self.px[y * self.w + x];
                n += 1;
            }
        }
        if n == 0 {
            0.5
        } else {
            s / n as f64
        }
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Draws a figure filling `b` (w = h / 2): head, torso, arms and legs.
fn draw_figure<R: Rng>(c: &mut Canvas, b: &BBox, value: f64, rng: &mut R) {
    let at = |fx: f64, fy: f64| (b.x + fx * b.w, b.y + fy * b.h);
    let sway = rng.gen_range(-0.08..0.08);
    c.disc(at(0.5, 0.1), 0.085 * b.h, value);
    c.rect(b.x + 0.3 * b.w, b.y + 0.19 * b.h, 0.4 * b.w, 0.38 * b.h, value);
    let arm = 0.055 * b.w;
    c.segment(at(0.33, 0.23), at(0.12 + sway, 0.52), arm, value);
    c.segment(at(0.67, 0.23), at(0.88 - sway, 0.52), arm, value);
    let leg = 0.075 * b.w;
    c.segment(at(0.4, 0.56), at(0.26 + sway, 0.98 - leg / b.h), leg, value);
    c.segment(at(0.6, 0.56), at(0.74 - sway, 0.98 - leg / b.h), leg, value);
}

/// Renders one scene with a single figure.
pub fn render_toy_image<R: Rng>(cfg: &ToyConfig, rng: &mut R) -> Result<ToyImage> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let base = rng.gen_range(0.3..0.7);
    let (gx, gy) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let mut c = Canvas { w, h, px: Vec::with_capacity(w * h) };
    for y in 0..h {
        for x in 0..w {
            c.px.push(base + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5));
        }
    }
    let clutter = rng.gen_range(cfg.min_clutter..=cfg.max_clutter);
    for _ in 0..clutter {
        let v = (base + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0);
        match rng.gen_range(0..3) {
            0 => {
                let (cw, ch) = (rng.gen_range(6.0..50.0), rng.gen_range(6.0..50.0));
                c.rect(rng.gen_range(-10.0..w as f64), rng.gen_range(-10.0..h as f64), cw, ch, v);
            }
            1 => c.disc((rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)), rng.gen_range(3.0..22.0), v),
            _ => {
                let a = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                let b = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                c.segment(a, b, rng.gen_range(1.0..4.0), v);
            }
        }
    }
    let fh = rng.gen_range(cfg.min_figure_h..=cfg.max_figure_h);
    let fw = fh * 0.5;
    let fx = rng.gen_range(0.0..=(w as f64 - fw));
    let fy = rng.gen_range(0.0..=(h as f64 - fh));
    let bbox = BBox::new(fx, fy, fw, fh);
    let local = c.mean_in(&bbox);
    let value = if local < 0.5 {
        (local + cfg.contrast + rng.gen_range(0.0..0.1)).min(1.0)
    } else {
        (local - cfg.contrast - rng.gen_range(0.0..0.1)).max(0.0)
    };
    draw_figure(&mut c, &bbox, value, rng);

    let bytes: Vec<u8> = c
        .px
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            ((v + cfg.noise * n).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(ToyImage { image: GrayImage::from_u8(w, h, &bytes)?, figures: vec![bbox] })
}

/// `n` scenes from one seed.
pub fn toy_corpus(cfg: &ToyConfig, n: usize, seed: u64) -> Result<Vec<ToyImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| render_toy_image(cfg, &mut rng)).collect()
}

/// Writes `img_NNNN.pgm` files and an `annotations.csv` into `dir`.
pub fn write_toy_corpus(dir: &Path, images: &[ToyImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("image_path,x,y,w,h\n");
    for (i, t) in images.iter().enumerate() {
        let name = format!("img_{i:04}.pgm");
        save_pgm(&dir.join(&name), &t.image)?;
        for b in &t.figures {
            let _ = writeln!(csv, "{name},{:.6},{:.6},{:.6},{:.6}", b.x, b.y, b.w, b.h);
        }
    }
    fs::write(dir.join("annotations.csv"), csv)?;
    Ok(())
}
