//! Grayscale images, resampling, pyramids, derivative filters, and patch or
//! window extraction.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, format_err, Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Side length of the square pretraining patch.
pub const PATCH_SIZE: usize = 16;
/// Detection window width.
pub const WINDOW_W: usize = 64;
/// Detection window height.
pub const WINDOW_H: usize = 128;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T = f32> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    /// Validating constructor: `data.len() == width * height` and every value
    /// lies in `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return arg_err(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            ));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return arg_err(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        let value = value.max(T::zero()).min(T::one());
        GrayImage { width, height, data: vec![value; width * height] }
    }

    /// Builds an image from `f(x, y)`, clamping each value into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).max(T::zero()).min(T::one()));
            }
        }
        GrayImage { width, height, data }
    }

    /// Interprets bytes as `v / 255`.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return arg_err("byte buffer does not match image dimensions");
        }
        let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Ok(GrayImage { width, height, data })
    }

    /// Quantizes to bytes with `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with replicate-border semantics.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn cast<U: Scalar>(&self) -> GrayImage<U> {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Sub-image fully inside the bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return arg_err(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            ));
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y..y + h {
            data.extend_from_slice(&self.data[row * self.width + x..row * self.width + x + w]);
        }
        Ok(GrayImage { width: w, height: h, data })
    }

    /// Applies `f` pointwise and clamps back into range.
    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v).max(T::zero()).min(T::one())).collect(),
        }
    }
}

/// Unbounded scalar field on the pixel grid (derivative responses).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ScalarMap<T> {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSource {
    pub image: usize,
    pub x: usize,
    pub y: usize,
}

/// A 16×16 pretraining patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T = f32> {
    pub pixels: GrayImage<T>,
    pub source: PatchSource,
}

impl<T: Scalar> Patch<T> {
    pub fn new(pixels: GrayImage<T>, source: PatchSource) -> Result<Self> {
        if pixels.width() != PATCH_SIZE || pixels.height() != PATCH_SIZE {
            return arg_err(format!(
                "patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
                pixels.width(),
                pixels.height()
            ));
        }
        Ok(Patch { pixels, source })
    }
}

// ---------------------------------------------------------------------------
// I/O

const PNG_MAGIC: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Loads an 8-bit PGM (P5) or PNG (gray or RGB) as intensities in `[0, 1]`.
///
/// RGB is reduced with the 0.299 / 0.587 / 0.114 luminance weights.
pub fn load_image(path: &Path) -> Result<GrayImage<f32>> {
    let bytes = fs::read(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes an in-memory PGM (P5) or PNG.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage<f32>> {
    let format = if bytes.starts_with(b"P5") {
        image::ImageFormat::Pnm
    } else if bytes.starts_with(PNG_MAGIC) {
        image::ImageFormat::Png
    } else {
        return format_err("unsupported image format (expected PGM P5 or PNG)");
    };
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => GrayImage::from_u8(w, h, buf.as_raw()),
        image::DynamicImage::ImageRgb8(buf) => {
            let data = buf
                .as_raw()
                .chunks_exact(3)
                .map(|px| {
                    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                    ((y / 255.0).clamp(0.0, 1.0)) as f32
                })
                .collect();
            Ok(GrayImage { width: w, height: h, data })
        }
        other => format_err(format!("unsupported pixel layout {:?}", other.color())),
    }
}

/// Writes a binary PGM (P5, maxval 255).
pub fn save_pgm<T: Scalar>(path: &Path, img: &GrayImage<T>) -> Result<()> {
    let mut out = Vec::with_capacity(img.width * img.height + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    out.extend_from_slice(&img.to_u8());
    fs::write(path, out)?;
    Ok(())
}

/// Lists `.pgm` / `.png` files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("pgm") | Some("png")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image: PathBuf,
    pub bbox: BBox,
}

/// Parses `image_path,x,y,w,h` rows; paths resolve against `base_dir`.
///
/// Blank lines, `#` comments, and a leading `image_path,...` header are
/// skipped.
pub fn parse_annotations(text: &str, base_dir: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("image_path")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return format_err(format!("annotation line {}: expected 5 fields", lineno + 1));
        }
        let mut nums = [0.0f64; 4];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|_| {
                Error::Format(format!("annotation line {}: bad number {field:?}", lineno + 1))
            })?;
        }
        let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3]);
        if !bbox.is_valid() {
            return format_err(format!("annotation line {}: non-positive box extent", lineno + 1));
        }
        out.push(Annotation { image: base_dir.join(fields[0]), bbox });
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_annotations(&text, base)
}

/// Groups annotations by image path, preserving first-appearance order.
pub fn group_annotations(anns: &[Annotation]) -> Vec<(PathBuf, Vec<BBox>)> {
    let mut index: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut groups: Vec<(PathBuf, Vec<BBox>)> = Vec::new();
    for a in anns {
        let slot = *index.entry(a.image.clone()).or_insert_with(|| {
            groups.push((a.image.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(a.bbox);
    }
    groups
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel-centered sampling; output clamped to `[0, 1]`.
pub fn resize_bilinear<T: Scalar>(img: &GrayImage<T>, out_w: usize, out_h: usize) -> Result<GrayImage<T>> {
    if out_w == 0 || out_h == 0 {
        return arg_err("resize target dimensions must be positive");
    }
    if img.width == 0 || img.height == 0 {
        return arg_err("cannot resize an empty image");
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let xs: Vec<(usize, usize, T)> =
        (0..out_w).map(|x| sample_axis((x as f64 + 0.5) * sx - 0.5, img.width)).collect();
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis((y as f64 + 0.5) * sy - 0.5, img.height);
        for &(x0, x1, fx) in &xs {
            data.push(bilerp(img, x0, x1, fx, y0, y1, fy));
        }
    }
    Ok(GrayImage { width: out_w, height: out_h, data })
}

/// Clamped source coordinate to (lower index, upper index, fraction).
#[inline]
fn sample_axis<T: Scalar>(pos: f64, len: usize) -> (usize, usize, T) {
    let p = pos.clamp(0.0, (len - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, T::lit(p - i0 as f64))
}

#[inline]
fn bilerp<T: Scalar>(img: &GrayImage<T>, x0: usize, x1: usize, fx: T, y0: usize, y1: usize, fy: T) -> T {
    let a = img.get(x0, y0);
    let b = img.get(x1, y0);
    let c = img.get(x0, y1);
    let d = img.get(x1, y1);
    // a + f·(b − a) reproduces constants exactly.
    let top = a + fx * (b - a);
    let bottom = c + fx * (d - c);
    (top + fy * (bottom - top)).max(T::zero()).min(T::one())
}

// ---------------------------------------------------------------------------
// Pyramid

/// Image pyramid parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidConfig {
    /// Ratio between consecutive levels (> 1).
    pub step: f64,
    /// Number of factor-of-two ranges to cover.
    pub octaves: u32,
    pub min_w: usize,
    pub min_h: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { step: 1.07, octaves: 3, min_w: WINDOW_W, min_h: WINDOW_H }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<T = f32> {
    /// Level size over original size, in `(0, 1]`.
    pub scale: f64,
    pub image: GrayImage<T>,
}

/// Level scales `step^-k` for `k = 0..` while the scale stays at or above
/// `2^-octaves` and the resized dimensions stay at or above the minimum.
pub fn pyramid_scales(width: usize, height: usize, cfg: &PyramidConfig) -> Result<Vec<(f64, usize, usize)>> {
    if !(cfg.step > 1.0) {
        return arg_err("pyramid step must exceed 1");
    }
    let floor = 0.5f64.powi(cfg.octaves as i32);
    let mut levels = Vec::new();
    for k in 0.. {
        let scale = cfg.step.powi(-k);
        if scale < floor {
            break;
        }
        let w = (width as f64 * scale).round() as usize;
        let h = (height as f64 * scale).round() as usize;
        if w < cfg.min_w || h < cfg.min_h {
            break;
        }
        levels.push((scale, w, h));
    }
    Ok(levels)
}

pub fn build_pyramid<T: Scalar>(img: &GrayImage<T>, cfg: &PyramidConfig) -> Result<Vec<PyramidLevel<T>>> {
    pyramid_scales(img.width, img.height, cfg)?
        .into_iter()
        .map(|(scale, w, h)| {
            let image = if w == img.width && h == img.height {
                img.clone()
            } else {
                resize_bilinear(img, w, h)?
            };
            Ok(PyramidLevel { scale, image })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Patches

/// Draws `n` 16×16 patches: image uniform over eligible images, offset
/// uniform over valid top-left positions. Deterministic per seed.
pub fn sample_patches<T: Scalar>(images: &[GrayImage<T>], n: usize, seed: u64) -> Result<Vec<Patch<T>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, im)| im.width >= PATCH_SIZE && im.height >= PATCH_SIZE)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return arg_err("no image is at least 16x16");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = eligible[rng.gen_range(0..eligible.len())];
        let im = &images[idx];
        let x = rng.gen_range(0..=im.width - PATCH_SIZE);
        let y = rng.gen_range(0..=im.height - PATCH_SIZE);
        let pixels = im.crop(x, y, PATCH_SIZE, PATCH_SIZE)?;
        out.push(Patch { pixels, source: PatchSource { image: idx, x, y } });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Derivatives

/// Derivative filter selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeKind {
    Dx,
    Dy,
    Dxx,
    Dyy,
}

/// Centered `[-1, 0, 1]` (first order) or `[1, -2, 1]` (second order)
/// filtering along one axis with replicate padding.
pub fn derivative_map<T: Scalar>(img: &GrayImage<T>, kind: DerivativeKind) -> Result<ScalarMap<T>> {
    let (w, h) = (img.width, img.height);
    let horizontal = matches!(kind, DerivativeKind::Dx | DerivativeKind::Dxx);
    let extent = if horizontal { w } else { h };
    if extent < 3 {
        return arg_err(format!("derivative needs at least 3 pixels along the axis, got {extent}"));
    }
    let two = T::lit(2.0);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let (prev, next) = if horizontal {
                (img.get_clamped(xi - 1, yi), img.get_clamped(xi + 1, yi))
            } else {
                (img.get_clamped(xi, yi - 1), img.get_clamped(xi, yi + 1))
            };
            let v = match kind {
                DerivativeKind::Dx | DerivativeKind::Dy => next - prev,
                DerivativeKind::Dxx | DerivativeKind::Dyy => next - two * img.get(x, y) + prev,
            };
            data.push(v);
        }
    }
    Ok(ScalarMap { width: w, height: h, data })
}

// ---------------------------------------------------------------------------
// Windows

/// Expands `bbox` symmetrically to a 1:2 aspect, samples it with
/// replicate-edge semantics, and resamples to 64×128.
pub fn crop_normalize_window<T: Scalar>(img: &GrayImage<T>, bbox: &BBox) -> Result<GrayImage<T>> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return arg_err("window box must have positive extent");
    }
    let region = normalize_aspect(bbox);
    let sx = region.w / WINDOW_W as f64;
    let sy = region.h / WINDOW_H as f64;
    let xs: Vec<(usize, usize, T)> = (0..WINDOW_W)
        .map(|u| sample_axis(region.x + (u as f64 + 0.5) * sx - 0.5, img.width))
        .collect();
    let mut data = Vec::with_capacity(WINDOW_W * WINDOW_H);
    for v in 0..WINDOW_H {
        let (y0, y1, fy) = sample_axis(region.y + (v as f64 + 0.5) * sy - 0.5, img.height);
        for &(x0, x1, fx) in &xs {
            data.push(bilerp(img, x0, x1, fx, y0, y1, fy));
        }
    }
    Ok(GrayImage { width: WINDOW_W, height: WINDOW_H, data })
}

/// Grows the narrow dimension so that `w : h == 1 : 2`, keeping the center.
pub fn normalize_aspect(bbox: &BBox) -> BBox {
    let (cx, cy) = bbox.center();
    let (w, h) = if bbox.w * 2.0 < bbox.h {
        (bbox.h * 0.5, bbox.h)
    } else {
        (bbox.w, bbox.w * 2.0)
    };
    BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h, score: bbox.score }
}
