//! Squared-hinge linear SVM on backbone features and ridge bounding-box
//! regression.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{nms, DetectorNet, HEAD_INPUT};
use crate::error::{arg_err, format_err, Error, Result};
use crate::geometry::BBox;
use crate::imaging::{crop_normalize_window, GrayImage};
use crate::linalg::cholesky_solve;
use crate::neural::{read_tensors, write_tensors, Tensor};
use crate::scalar::Scalar;

/// One training example for the SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub x: Vec<f32>,
    /// +1 pedestrian, −1 background.
    pub y: i8,
    pub weight: f64,
}

impl FeatureRow {
    pub fn new(x: Vec<f32>, y: i8, weight: f64) -> Result<Self> {
        if y != 1 && y != -1 {
            return arg_err(format!("label must be +1 or -1, got {y}"));
        }
        if !(weight > 0.0) {
            return arg_err("row weight must be positive");
        }
        Ok(FeatureRow { x, y, weight })
    }
}

/// Flattened backbone features (36×29×13, channel-major) of each window.
pub fn extract_features<T: Scalar>(net: &DetectorNet<T>, windows: &[&GrayImage<f32>]) -> Result<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let f = net.window_features(chunk)?;
        for i in 0..f.batch() {
            out.push(f.sample(i).iter().map(|v| v.as_f32()).collect());
        }
    }
    debug_assert!(out.iter().all(|r| r.len() == HEAD_INPUT));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Cost multiplier of negative rows relative to positive ones.
    pub neg_weight: f64,
    pub max_epochs: usize,
    /// Stop when the relative objective change over an epoch falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, neg_weight: 20.0, max_epochs: 1000, tol: 1e-6, seed: 0 }
    }
}

/// Objective after each solver epoch, starting with the zero model.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmReport {
    pub objectives: Vec<f64>,
    pub epochs: usize,
}

impl SvmReport {
    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("contains the initial objective")
    }
}

fn row_cost(row: &FeatureRow, cfg: &SvmConfig) -> f64 {
    row.weight * if row.y < 0 { cfg.neg_weight } else { 1.0 }
}

/// `(1/2)‖w‖² + C Σ cᵢ max(0, 1 − yᵢ(w·xᵢ + b))²`.
pub fn svm_objective(model: &SvmModel, rows: &[FeatureRow], cfg: &SvmConfig) -> Result<f64> {
    let reg = 0.5 * model.w.iter().map(|v| v * v).sum::<f64>();
    Ok(reg + model.c * hinge_sum(model, rows, cfg)?)
}

/// `Σ cᵢ max(0, 1 − yᵢ(w·xᵢ + b))²`.
pub fn hinge_sum(model: &SvmModel, rows: &[FeatureRow], cfg: &SvmConfig) -> Result<f64> {
    let mut s = 0.0;
    for r in rows {
        let slack = 1.0 - r.y as f64 * svm_score(model, &r.x)?;
        if slack > 0.0 {
            s += row_cost(r, cfg) * slack * slack;
        }
    }
    Ok(s)
}

pub fn svm_score(model: &SvmModel, x: &[f32]) -> Result<f64> {
    if x.len() != model.w.len() {
        return arg_err(format!("feature dim {} does not match model dim {}", x.len(), model.w.len()));
    }
    Ok(model.w.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + model.b)
}

/// Primal coordinate descent with a Newton step and backtracking line
/// search per coordinate; the bias is an extra, unregularized coordinate.
/// Every accepted step strictly decreases the objective.
pub fn train_svm(rows: &[FeatureRow], cfg: &SvmConfig) -> Result<(SvmModel, SvmReport)> {
    let pos = rows.iter().filter(|r| r.y > 0).count();
    if pos == 0 || pos == rows.len() {
        return arg_err("SVM training needs both classes");
    }
    if !(cfg.c > 0.0) || !(cfg.neg_weight > 0.0) {
        return arg_err("C and the negative weight must be positive");
    }
    let d = rows[0].x.len();
    if rows.iter().any(|r| r.x.len() != d) {
        return arg_err("feature rows differ in length");
    }
    let n = rows.len();
    // Column-major copy for coordinate access.
    let mut cols = vec![0.0f32; d * n];
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.x.iter().enumerate() {
            cols[j * n + i] = v;
        }
    }
    let ones = vec![1.0f32; n];
    let y: Vec<f64> = rows.iter().map(|r| r.y as f64).collect();
    let cost: Vec<f64> = rows.iter().map(|r| cfg.c * row_cost(r, cfg)).collect();
    let mut w = vec![0.0f64; d];
    let mut bias = 0.0f64;
    // slack[i] = 1 − yᵢ(w·xᵢ + b)
    let mut slack = vec![1.0f64; n];
    let objective = |w: &[f64], slack: &[f64]| -> f64 {
        0.5 * w.iter().map(|v| v * v).sum::<f64>()
            + slack.iter().zip(&cost).filter(|(s, _)| **s > 0.0).map(|(s, c)| c * s * s).sum::<f64>()
    };
    let mut objectives = vec![objective(&w, &slack)];
    let mut order: Vec<usize> = (0..=d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    const SIGMA: f64 = 0.01;
    const BETA: f64 = 0.5;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for &j in &order {
            let (col, wj, reg) = if j == d { (&ones[..], bias, 0.0) } else { (&cols[j * n..(j + 1) * n], w[j], 1.0) };
            let (mut g, mut h) = (reg * wj, reg);
            for i in 0..n {
                if slack[i] > 0.0 {
                    let x = col[i] as f64;
                    g -= 2.0 * cost[i] * y[i] * x * slack[i];
                    h += 2.0 * cost[i] * x * x;
                }
            }
            if h <= 0.0 || g == 0.0 {
                continue;
            }
            let step = -g / h;
            let loss_at = |z: f64| -> f64 {
                let mut s = 0.0;
                for i in 0..n {
                    let t = slack[i] - y[i] * z * col[i] as f64;
                    if t > 0.0 {
                        s += cost[i] * t * t;
                    }
                }
                s
            };
            let base = loss_at(0.0) + 0.5 * reg * wj * wj;
            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let z = lambda * step;
                let val = loss_at(z) + 0.5 * reg * (wj + z) * (wj + z);
                if val - base <= -SIGMA * z * z {
                    accepted = Some(z);
                    break;
                }
                lambda *= BETA;
            }
            if let Some(z) = accepted {
                for i in 0..n {
                    slack[i] -= y[i] * z * col[i] as f64;
                }
                if j == d {
                    bias += z;
                } else {
                    w[j] += z;
                }
            }
        }
        let obj = objective(&w, &slack);
        let prev = *objectives.last().expect("non-empty");
        objectives.push(obj);
        if !obj.is_finite() {
            return Err(Error::Numeric("SVM objective became non-finite".into()));
        }
        if (prev - obj).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok((SvmModel { w, b: bias, c: cfg.c }, SvmReport { objectives, epochs }))
}

pub fn save_svm(path: &Path, model: &SvmModel) -> Result<()> {
    let w = Tensor::from_vec(&[model.w.len()], model.w.clone())?;
    let b = Tensor::from_vec(&[1], vec![model.b])?;
    write_tensors(path, &[("svm.w", &w), ("svm.b", &b)])
}

pub fn load_svm(path: &Path, c: f64) -> Result<SvmModel> {
    let t = read_tensors(path)?;
    let get = |name: &str| {
        t.iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>())
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let b = get("svm.b")?;
    if b.len() != 1 {
        return format_err("svm.b must hold one value");
    }
    Ok(SvmModel { w: get("svm.w")?, b: b[0], c })
}

// ---------------------------------------------------------------------------
// Box regression

/// Offsets of `g` relative to proposal `p`: center shifts normalized by the
/// proposal size and log size ratios.
pub fn encode_box(p: &BBox, g: &BBox) -> [f64; 4] {
    let (pcx, pcy) = p.center();
    let (gcx, gcy) = g.center();
    [(gcx - pcx) / p.w, (gcy - pcy) / p.h, (g.w / p.w).ln(), (g.h / p.h).ln()]
}

/// Inverse of [`encode_box`]; the score of `p` is carried over.
pub fn decode_box(p: &BBox, t: &[f64; 4]) -> BBox {
    let (pcx, pcy) = p.center();
    let (cx, cy) = (pcx + t[0] * p.w, pcy + t[1] * p.h);
    let (w, h) = (p.w * t[2].exp(), p.h * t[3].exp());
    BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h, score: p.score }
}

/// A (features, proposal, ground truth) training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPair {
    pub features: Vec<f32>,
    pub proposal: BBox,
    pub truth: BBox,
}

/// Four independent ridge regressions, one per offset.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxRegressor {
    pub w: [Vec<f64>; 4],
    pub b: [f64; 4],
    pub lambda: f64,
}

const BOX_TARGETS: [&str; 4] = ["tx", "ty", "tw", "th"];

impl BBoxRegressor {
    pub fn zero(dim: usize, lambda: f64) -> Self {
        BBoxRegressor { w: std::array::from_fn(|_| vec![0.0; dim]), b: [0.0; 4], lambda }
    }

    pub fn dim(&self) -> usize {
        self.w[0].len()
    }

    pub fn predict(&self, x: &[f32]) -> Result<[f64; 4]> {
        if x.len() != self.dim() {
            return arg_err(format!("feature dim {} does not match regressor dim {}", x.len(), self.dim()));
        }
        let mut t = [0.0; 4];
        for k in 0..4 {
            t[k] = self.w[k].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + self.b[k];
        }
        Ok(t)
    }
}

/// Largest system solved by direct factorization.
const DIRECT_LIMIT: usize = 3000;

/// Minimizes `Σ (w·xᵢ + b − tᵢ)² + λ‖w‖²` for each of the four offsets;
/// the bias is unregularized (handled by centering).
pub fn train_bbox_regressors(pairs: &[BoxPair], lambda: f64) -> Result<BBoxRegressor> {
    if pairs.is_empty() {
        return arg_err("no box pairs to train on");
    }
    if !(lambda >= 0.0) {
        return arg_err("ridge lambda must be non-negative");
    }
    let d = pairs[0].features.len();
    if pairs.iter().any(|p| p.features.len() != d) {
        return arg_err("feature rows differ in length");
    }
    let n = pairs.len();
    let mut mean = vec![0.0f64; d];
    for p in pairs {
        for (m, &v) in mean.iter_mut().zip(&p.features) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc: Vec<Vec<f64>> = pairs.iter().map(|p| p.features.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect()).collect();
    let targets: Vec<[f64; 4]> = pairs.iter().map(|p| encode_box(&p.proposal, &p.truth)).collect();
    let mut tmean = [0.0f64; 4];
    for t in &targets {
        for k in 0..4 {
            tmean[k] += t[k] / n as f64;
        }
    }
    let tc: Vec<[f64; 4]> = targets.iter().map(|t| std::array::from_fn(|k| t[k] - tmean[k])).collect();

    let w: [Vec<f64>; 4] = if n <= d && n <= DIRECT_LIMIT {
        // Dual: (XcXcᵀ + λI) α = tc, w = Xcᵀ α.
        let mut k = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = xc[i].iter().zip(&xc[j]).map(|(a, b)| a * b).sum();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
            k[i * n + i] += lambda.max(1e-12);
        }
        let mut rhs: Vec<f64> = tc.iter().flat_map(|t| t.iter().copied()).collect();
        cholesky_solve(&k, n, &mut rhs, 4)?;
        std::array::from_fn(|c| {
            let mut w = vec![0.0f64; d];
            for i in 0..n {
                let a = rhs[i * 4 + c];
                for (wj, x) in w.iter_mut().zip(&xc[i]) {
                    *wj += a * x;
                }
            }
            w
        })
    } else if d <= DIRECT_LIMIT {
        // Primal: (XcᵀXc + λI) w = Xcᵀ tc.
        let mut a = vec![0.0f64; d * d];
        let mut rhs = vec![0.0f64; d * 4];
        for (x, t) in xc.iter().zip(&tc) {
            for i in 0..d {
                for j in 0..=i {
                    a[i * d + j] += x[i] * x[j];
                }
                for c in 0..4 {
                    rhs[i * 4 + c] += x[i] * t[c];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                a[j * d + i] = a[i * d + j];
            }
            a[i * d + i] += lambda.max(1e-12);
        }
        cholesky_solve(&a, d, &mut rhs, 4)?;
        std::array::from_fn(|c| (0..d).map(|i| rhs[i * 4 + c]).collect())
    } else {
        let mut out: [Vec<f64>; 4] = Default::default();
        for (c, slot) in out.iter_mut().enumerate() {
            let t: Vec<f64> = tc.iter().map(|t| t[c]).collect();
            *slot = ridge_cg(&xc, &t, lambda.max(1e-12))?;
        }
        out
    };
    let b = std::array::from_fn(|k| tmean[k] - w[k].iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>());
    Ok(BBoxRegressor { w, b, lambda })
}

/// Conjugate gradients on `(XᵀX + λI) w = Xᵀ t` to relative residual 1e-10.
fn ridge_cg(x: &[Vec<f64>], t: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let d = x[0].len();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|a| a * lambda).collect();
        for row in x {
            let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, r) in out.iter_mut().zip(row) {
                *o += s * r;
            }
        }
        out
    };
    let mut rhs = vec![0.0f64; d];
    for (row, &ti) in x.iter().zip(t) {
        for (r, v) in rhs.iter_mut().zip(row) {
            *r += ti * v;
        }
    }
    let norm_b = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut w = vec![0.0f64; d];
    if norm_b == 0.0 {
        return Ok(w);
    }
    let mut r = rhs;
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..10 * d {
        if rr.sqrt() <= 1e-10 * norm_b {
            return Ok(w);
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..d {
            w[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let next: f64 = r.iter().map(|v| v * v).sum();
        let beta = next / rr;
        rr = next;
        for i in 0..d {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::Numeric("ridge conjugate gradients did not converge".into()))
}

/// Applies the learned offsets to proposal `p`.
pub fn apply_bbox_regression(reg: &BBoxRegressor, x: &[f32], p: &BBox) -> Result<BBox> {
    let t = reg.predict(x)?;
    let g = decode_box(p, &t);
    if !(g.x.is_finite() && g.y.is_finite() && g.w.is_finite() && g.h.is_finite()) {
        return Err(Error::Numeric("box regression produced a non-finite box".into()));
    }
    Ok(g)
}

/// Keeps detections with score at least `min_score` whose best-overlapping
/// ground truth has IoU at least `min_iou`, paired with that ground truth.
pub fn select_box_pairs(dets: &[(Vec<f32>, BBox)], truths: &[BBox], min_score: f64, min_iou: f64) -> Vec<BoxPair> {
    let mut out = Vec::new();
    for (x, p) in dets {
        if p.score_or_min() < min_score {
            continue;
        }
        let best = truths.iter().map(|g| (p.iou(g), g)).max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((iou, g)) = best {
            if iou >= min_iou {
                out.push(BoxPair { features: x.clone(), proposal: *p, truth: *g });
            }
        }
    }
    out
}

pub fn save_bbox(path: &Path, reg: &BBoxRegressor) -> Result<()> {
    let tensors: Vec<Tensor<f64>> = (0..4)
        .map(|k| {
            let mut v = reg.w[k].clone();
            v.push(reg.b[k]);
            Tensor::from_vec(&[v.len()], v)
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = BOX_TARGETS.iter().map(|t| format!("bbox.{t}.w")).collect();
    let named: Vec<(&str, &Tensor<f64>)> = names.iter().map(String::as_str).zip(&tensors).collect();
    write_tensors(path, &named)
}

/// Loads a regressor; each stored vector holds the weights then the bias.
pub fn load_bbox(path: &Path, lambda: f64) -> Result<BBoxRegressor> {
    let t = read_tensors(path)?;
    let mut reg = BBoxRegressor::zero(0, lambda);
    for (k, name) in BOX_TARGETS.iter().enumerate() {
        let key = format!("bbox.{name}.w");
        let (_, v) = t.iter().find(|(n, _)| *n == key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
        let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        let b = data.pop().ok_or_else(|| Error::Format(format!("{key} is empty")))?;
        reg.w[k] = data;
        reg.b[k] = b;
    }
    if reg.w.iter().any(|w| w.len() != reg.w[0].len()) {
        return format_err("box regressors differ in dimension");
    }
    Ok(reg)
}

/// Network candidates re-scored by the SVM (kept when the margin exceeds
/// `svm_threshold`), suppressed, then refined by box regression.
pub fn rescore_and_refine<T: Scalar>(
    net: &DetectorNet<T>,
    svm: &SvmModel,
    reg: Option<&BBoxRegressor>,
    img: &GrayImage<f32>,
    candidates: &[BBox],
    svm_threshold: f64,
    nms_iou: f64,
    nms_io2: f64,
) -> Result<Vec<BBox>> {
    let windows: Vec<GrayImage<f32>> = candidates.iter().map(|b| crop_normalize_window(img, b)).collect::<Result<_>>()?;
    let refs: Vec<&GrayImage<f32>> = windows.iter().collect();
    let feats = extract_features(net, &refs)?;
    let mut scored = Vec::new();
    let mut kept_feats = Vec::new();
    for (b, f) in candidates.iter().zip(feats) {
        let s = svm_score(svm, &f)?;
        if s > svm_threshold {
            scored.push(b.with_score(s));
            kept_feats.push((b.with_score(s), f));
        }
    }
    let survivors = nms(&scored, nms_iou, nms_io2);
    match reg {
        None => Ok(survivors),
        Some(r) => survivors
            .iter()
            .map(|s| {
                let (_, f) = kept_feats.iter().find(|(b, _)| b == s).expect("survivor comes from the scored set");
                apply_bbox_regression(r, f, s)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_codec_cases() {
        let p = BBox::scored(10.0, 20.0, 30.0, 60.0, 0.7);
        assert_eq!(decode_box(&p, &[0.0; 4]), p);
        let wide = decode_box(&p, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((wide.w - 60.0).abs() < 1e-12 && (wide.center().0 - p.center().0).abs() < 1e-12);
        let g = BBox::new(13.0, 18.0, 27.0, 70.0);
        let back = decode_box(&p, &encode_box(&p, &g));
        assert!((back.x - g.x).abs() < 1e-9 && (back.h - g.h).abs() < 1e-9);
        assert_eq!(back.score, Some(0.7));
    }

    #[test]
    fn svm_single_class_rejected_and_zero_model_scores_zero() {
        let rows = vec![FeatureRow::new(vec![1.0], 1, 1.0).unwrap()];
        assert!(train_svm(&rows, &SvmConfig::default()).is_err());
        let m = SvmModel { w: vec![0.0; 3], b: 0.0, c: 1.0 };
        assert_eq!(svm_score(&m, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(svm_score(&m, &[1.0]).is_err());
    }

    #[test]
    fn svm_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SvmModel { w: vec![0.5, -0.25], b: 0.125, c: 1.0 };
        save_svm(&dir.path().join("s.frnc"), &m).unwrap();
        assert_eq!(load_svm(&dir.path().join("s.frnc"), 1.0).unwrap(), m);
        let r = BBoxRegressor { w: std::array::from_fn(|k| vec![k as f64, 0.5]), b: [1.0, 2.0, 3.0, 4.0], lambda: 1000.0 };
        save_bbox(&dir.path().join("b.frnc"), &r).unwrap();
        assert_eq!(load_bbox(&dir.path().join("b.frnc"), 1000.0).unwrap(), r);
    }

    #[test]
    fn single_pair_interpolates() {
        let pair = BoxPair {
            features: vec![0.3, -1.0, 2.0],
            proposal: BBox::new(0.0, 0.0, 10.0, 20.0),
            truth: BBox::new(1.0, -1.0, 12.0, 18.0),
        };
        let reg = train_bbox_regressors(std::slice::from_ref(&pair), 1e-9).unwrap();
        let t = reg.predict(&pair.features).unwrap();
        let want = encode_box(&pair.proposal, &pair.truth);
        for k in 0..4 {
            assert!((t[k] - want[k]).abs() < 1e-12);
        }
    }
}
