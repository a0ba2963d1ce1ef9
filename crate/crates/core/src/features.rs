//! Hand-designed descriptors used as regression targets: the 36-dimensional
//! HOG block of a 16×16 patch and the log-Euclidean region covariance of the
//! same patch.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{arg_err, format_err, Error, Result};
use crate::imaging::{derivative_map, DerivativeKind, GrayImage, PATCH_SIZE};
use crate::linalg::{symmetric_eigen, SquareMatrix};
use crate::scalar::Scalar;

/// Length of both descriptors.
pub const FEATURE_DIM: usize = 36;
/// Length of the per-pixel covariance feature.
pub const PIXEL_FEATURE_DIM: usize = 8;

/// Divisor guard for HOG normalization.
pub const DEFAULT_HOG_NORM_EPS: f64 = 1e-6;
/// Diagonal regularizer applied before the matrix logarithm.
pub const DEFAULT_COV_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Hog,
    Cov,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Hog => "hog",
            FeatureKind::Cov => "cov",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hog" => Ok(FeatureKind::Hog),
            "cov" => Ok(FeatureKind::Cov),
            _ => arg_err(format!("unknown feature kind {s:?} (expected hog or cov)")),
        }
    }
}

/// A 36-component descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec36<T = f32> {
    pub v: [T; FEATURE_DIM],
    pub kind: FeatureKind,
}

impl<T: Scalar> FeatureVec36<T> {
    pub fn to_f32(&self) -> [f32; FEATURE_DIM] {
        let mut out = [0.0f32; FEATURE_DIM];
        for (o, v) in out.iter_mut().zip(&self.v) {
            *o = v.as_f32();
        }
        out
    }
}

/// HOG layout for one block over a 16×16 patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogParams {
    pub cell: usize,
    pub block: usize,
    pub bins: usize,
    pub norm_eps: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams { cell: 8, block: 16, bins: 9, norm_eps: DEFAULT_HOG_NORM_EPS }
    }
}

impl HogParams {
    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || !self.block.is_multiple_of(self.cell) || self.bins < 2 {
            return arg_err("HOG block must be a multiple of the cell size and bins >= 2");
        }
        let cells = self.block / self.cell;
        if self.block != PATCH_SIZE || cells * cells * self.bins != FEATURE_DIM {
            return arg_err("HOG parameters must map a 16x16 patch to 36 values");
        }
        Ok(())
    }
}

fn check_patch<T: Scalar>(patch: &GrayImage<T>) -> Result<()> {
    if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
        return arg_err(format!(
            "descriptor input must be {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
            patch.width(),
            patch.height()
        ));
    }
    Ok(())
}

/// HOG block descriptor of a 16×16 patch.
///
/// Gradients come from the centered derivative masks, orientations are
/// unsigned in `[0°, 180°)` with hard bin assignment, and every cell
/// histogram is divided by the L2 norm of the element-wise sum of the
/// block's cell histograms (plus `norm_eps`). Cells are emitted row-major,
/// bins ascending.
pub fn hog_patch<T: Scalar>(patch: &GrayImage<T>, params: &HogParams) -> Result<FeatureVec36<T>> {
    params.validate()?;
    check_patch(patch)?;
    let gx = derivative_map(patch, DerivativeKind::Dx)?;
    let gy = derivative_map(patch, DerivativeKind::Dy)?;
    let cells_per_side = params.block / params.cell;
    let bins = params.bins;
    let pi = T::lit(PI);
    let bin_width = pi / T::lit(bins as f64);

    let mut hist = vec![T::zero(); cells_per_side * cells_per_side * bins];
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let (dx, dy) = (gx.get(x, y), gy.get(x, y));
            let mag = (dx * dx + dy * dy).sqrt();
            let mut theta = dy.atan2(dx);
            if theta < T::zero() {
                theta += pi;
            }
            if theta >= pi {
                theta -= pi;
            }
            let bin = (theta / bin_width).floor().to_usize().unwrap_or(0).min(bins - 1);
            let cell = (y / params.cell) * cells_per_side + x / params.cell;
            hist[cell * bins + bin] += mag;
        }
    }

    let mut sum = vec![T::zero(); bins];
    for cell in hist.chunks_exact(bins) {
        for (s, h) in sum.iter_mut().zip(cell) {
            *s += *h;
        }
    }
    let norm = sum.iter().map(|v| *v * *v).sum::<T>().sqrt() + T::lit(params.norm_eps);
    let mut v = [T::zero(); FEATURE_DIM];
    for (o, h) in v.iter_mut().zip(&hist) {
        *o = *h / norm;
    }
    Ok(FeatureVec36 { v, kind: FeatureKind::Hog })
}

/// Eight per-pixel feature planes, channel-major:
/// `[x, y, |Ix|, |Iy|, sqrt(Ix² + Iy²), |Ixx|, |Iyy|, atan(Ix / Iy)]`.
///
/// The angle uses `sign(Ix)·π/2` when `Iy == 0`, and 0 when both vanish.
pub fn pixel_feature_map<T: Scalar>(patch: &GrayImage<T>) -> Result<Vec<T>> {
    check_patch(patch)?;
    let ix = derivative_map(patch, DerivativeKind::Dx)?;
    let iy = derivative_map(patch, DerivativeKind::Dy)?;
    let ixx = derivative_map(patch, DerivativeKind::Dxx)?;
    let iyy = derivative_map(patch, DerivativeKind::Dyy)?;
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut out = vec![T::zero(); PIXEL_FEATURE_DIM * plane];
    let half_pi = T::lit(PI / 2.0);
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let p = y * PATCH_SIZE + x;
            let (dx, dy) = (ix.get(x, y), iy.get(x, y));
            let angle = if dy == T::zero() {
                if dx == T::zero() {
                    T::zero()
                } else {
                    half_pi * dx.signum()
                }
            } else {
                (dx / dy).atan()
            };
            let q = [
                T::lit(x as f64),
                T::lit(y as f64),
                dx.abs(),
                dy.abs(),
                (dx * dx + dy * dy).sqrt(),
                ixx.get(x, y).abs(),
                iyy.get(x, y).abs(),
                angle,
            ];
            for (c, value) in q.into_iter().enumerate() {
                out[c * plane + p] = value;
            }
        }
    }
    Ok(out)
}

/// Sample covariance (divisor `N − 1`) of the 8 pixel-feature planes.
pub fn pixel_covariance<T: Scalar>(patch: &GrayImage<T>) -> Result<SquareMatrix<T>> {
    let planes = pixel_feature_map(patch)?;
    let n = PATCH_SIZE * PATCH_SIZE;
    let mut mean = [T::zero(); PIXEL_FEATURE_DIM];
    for (c, m) in mean.iter_mut().enumerate() {
        *m = planes[c * n..(c + 1) * n].iter().copied().sum::<T>() / T::lit(n as f64);
    }
    let mut cov = SquareMatrix::zeros(PIXEL_FEATURE_DIM);
    let denom = T::lit((n - 1) as f64);
    for i in 0..PIXEL_FEATURE_DIM {
        for j in i..PIXEL_FEATURE_DIM {
            let a = &planes[i * n..(i + 1) * n];
            let b = &planes[j * n..(j + 1) * n];
            let s = a.iter().zip(b).map(|(&u, &v)| (u - mean[i]) * (v - mean[j])).sum::<T>() / denom;
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(cov)
}

/// Log-Euclidean embedding: `C + eps·I = U S Uᵀ`, returns `U log(S) Uᵀ`
/// symmetrized.
pub fn matrix_log_spd<T: Scalar>(c: &SquareMatrix<T>, eps: T) -> Result<SquareMatrix<T>> {
    if !c.is_finite() || !eps.is_finite() {
        return Err(Error::Numeric("matrix logarithm of non-finite input".into()));
    }
    let n = c.dim();
    let mut reg = c.clone();
    for i in 0..n {
        reg[(i, i)] += eps;
    }
    let eig = symmetric_eigen(&reg)?;
    if let Some(bad) = eig.values.iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Numeric(format!(
            "matrix is not positive definite after regularization (eigenvalue {bad})"
        )));
    }
    let logs: Vec<T> = eig.values.iter().map(|v| v.ln()).collect();
    let u = &eig.vectors;
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut s = T::zero();
            for (k, l) in logs.iter().enumerate() {
                s += u[(i, k)] * *l * u[(j, k)];
            }
            out[(i, j)] = s;
        }
    }
    let half = T::lit(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let avg = (out[(i, j)] + out[(j, i)]) * half;
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    Ok(out)
}

/// Upper triangle including the diagonal, row-major.
pub fn upper_triangle<T: Scalar>(m: &SquareMatrix<T>) -> Vec<T> {
    let n = m.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`upper_triangle`], mirroring into the lower triangle.
pub fn from_upper_triangle<T: Scalar>(v: &[T], n: usize) -> Result<SquareMatrix<T>> {
    if v.len() != n * (n + 1) / 2 {
        return arg_err("upper-triangle length does not match matrix size");
    }
    let mut m = SquareMatrix::zeros(n);
    let mut it = v.iter();
    for i in 0..n {
        for j in i..n {
            let x = *it.next().expect("length checked");
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    Ok(m)
}

/// Region covariance descriptor: covariance of the pixel features,
/// regularized, log-mapped, and flattened to its 36-entry upper triangle.
pub fn cov_patch<T: Scalar>(patch: &GrayImage<T>, eps: T) -> Result<FeatureVec36<T>> {
    let cov = pixel_covariance(patch)?;
    let log = matrix_log_spd(&cov, eps)?;
    let flat = upper_triangle(&log);
    let mut v = [T::zero(); FEATURE_DIM];
    v.copy_from_slice(&flat);
    Ok(FeatureVec36 { v, kind: FeatureKind::Cov })
}

/// Descriptor of `kind` with default parameters.
pub fn extract<T: Scalar>(patch: &GrayImage<T>, kind: FeatureKind) -> Result<FeatureVec36<T>> {
    match kind {
        FeatureKind::Hog => hog_patch(patch, &HogParams::default()),
        FeatureKind::Cov => cov_patch(patch, T::lit(DEFAULT_COV_EPS)),
    }
}

// ---------------------------------------------------------------------------
// FV36 container: "FV36", u32 count, count × 36 little-endian f32.

const FV36_MAGIC: &[u8; 4] = b"FV36";

pub fn encode_fv36(records: &[[f32; FEATURE_DIM]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + records.len() * FEATURE_DIM * 4);
    out.extend_from_slice(FV36_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        for v in r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_fv36(bytes: &[u8]) -> Result<Vec<[f32; FEATURE_DIM]>> {
    if bytes.len() < 8 || &bytes[..4] != FV36_MAGIC {
        return format_err("missing FV36 header");
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if count.checked_mul(FEATURE_DIM * 4) != Some(body.len()) {
        return format_err(format!("FV36 body holds {} bytes, expected {count} records", body.len()));
    }
    Ok(body
        .chunks_exact(FEATURE_DIM * 4)
        .map(|rec| {
            let mut r = [0.0f32; FEATURE_DIM];
            for (o, b) in r.iter_mut().zip(rec.chunks_exact(4)) {
                *o = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            r
        })
        .collect())
}

pub fn write_fv36(path: &Path, records: &[[f32; FEATURE_DIM]]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_fv36(records))?;
    Ok(())
}

pub fn read_fv36(path: &Path) -> Result<Vec<[f32; FEATURE_DIM]>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_fv36(&bytes)
}
