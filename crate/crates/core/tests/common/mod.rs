//! Naive reference implementations shared by the integration tests and the
//! acceptance suite. Written from the descriptor definitions with plain
//! loops; nothing here calls into the library's numeric code.

#![allow(dead_code)]

use featrep::geometry::BBox;
use featrep::neural::{LayerSpec, NetworkSpec};
use rand::Rng;

pub const N: usize = 16;

/// Random patch in [0, 1].
pub fn random_patch<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..N * N).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Patch of multiples of 1/256 in [0, 200/256], so adding another multiple
/// of 1/256 below 56/256 is exact.
pub fn dyadic_patch<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..N * N).map(|_| rng.gen_range(0..=200u32) as f64 / 256.0).collect()
}

fn px(p: &[f64], x: i64, y: i64) -> f64 {
    let cx = x.clamp(0, N as i64 - 1) as usize;
    let cy = y.clamp(0, N as i64 - 1) as usize;
    p[cy * N + cx]
}

/// (Ix, Iy, Ixx, Iyy) at (x, y) with replicated borders.
fn derivs(p: &[f64], x: usize, y: usize) -> (f64, f64, f64, f64) {
    let (x, y) = (x as i64, y as i64);
    let c = px(p, x, y);
    (
        px(p, x + 1, y) - px(p, x - 1, y),
        px(p, x, y + 1) - px(p, x, y - 1),
        px(p, x + 1, y) - 2.0 * c + px(p, x - 1, y),
        px(p, x, y + 1) - 2.0 * c + px(p, x, y - 1),
    )
}

/// HOG block in degrees with four explicit cell histograms.
pub fn naive_hog(p: &[f64]) -> [f64; 36] {
    let mut cells = [[0.0f64; 9]; 4];
    for y in 0..N {
        for x in 0..N {
            let (gx, gy, _, _) = derivs(p, x, y);
            let mag = (gx * gx + gy * gy).sqrt();
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            let mut bin = (deg / 20.0) as usize;
            if bin > 8 {
                bin = 8;
            }
            let cell = if y < 8 { 0 } else { 2 } + if x < 8 { 0 } else { 1 };
            cells[cell][bin] += mag;
        }
    }
    let mut norm2 = 0.0;
    for b in 0..9 {
        let s = cells[0][b] + cells[1][b] + cells[2][b] + cells[3][b];
        norm2 += s * s;
    }
    let d = norm2.sqrt() + 1e-6;
    let mut out = [0.0; 36];
    for c in 0..4 {
        for b in 0..9 {
            out[c * 9 + b] = cells[c][b] / d;
        }
    }
    out
}

/// Cyclic Jacobi rotations; returns (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &[[f64; 8]; 8]) -> ([f64; 8], [[f64; 8]; 8]) {
    let mut a = *a;
    let mut v = [[0.0; 8]; 8];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..8 {
            for q in p + 1..8 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..8 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..8 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut w = [0.0; 8];
    for i in 0..8 {
        w[i] = a[i][i];
    }
    (w, v)
}

pub fn naive_covariance(p: &[f64]) -> [[f64; 8]; 8] {
    let mut feats = Vec::with_capacity(N * N);
    for y in 0..N {
        for x in 0..N {
            let (ix, iy, ixx, iyy) = derivs(p, x, y);
            let ang = if iy == 0.0 {
                if ix > 0.0 {
                    std::f64::consts::FRAC_PI_2
                } else if ix < 0.0 {
                    -std::f64::consts::FRAC_PI_2
                } else {
                    0.0
                }
            } else {
                (ix / iy).atan()
            };
            feats.push([x as f64, y as f64, ix.abs(), iy.abs(), (ix * ix + iy * iy).sqrt(), ixx.abs(), iyy.abs(), ang]);
        }
    }
    let mut mean = [0.0; 8];
    for f in &feats {
        for k in 0..8 {
            mean[k] += f[k];
        }
    }
    for m in &mut mean {
        *m /= feats.len() as f64;
    }
    let mut c = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for f in &feats {
                s += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
            c[i][j] = s / (feats.len() - 1) as f64;
        }
    }
    c
}

/// `U log(S) Uᵀ` of `c + eps·I` via Jacobi.
pub fn naive_log(c: &[[f64; 8]; 8], eps: f64) -> [[f64; 8]; 8] {
    let mut r = *c;
    for (i, row) in r.iter_mut().enumerate() {
        row[i] += eps;
    }
    let (w, v) = jacobi_eigen(&r);
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += v[i][k] * w[k].ln() * v[j][k];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn naive_cov(p: &[f64]) -> [f64; 36] {
    let l = naive_log(&naive_covariance(p), 1e-5);
    let mut out = [0.0; 36];
    let mut k = 0;
    for i in 0..8 {
        for j in i..8 {
            out[k] = 0.5 * (l[i][j] + l[j][i]);
            k += 1;
        }
    }
    out
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Scaling and squaring with a 20-term Taylor series.
pub fn mat_exp(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) * n as f64;
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v / 2f64.powi(s)).collect()).collect();
    let mut result: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut term = result.clone();
    for k in 1..=20 {
        term = mat_mul(&term, &scaled);
        for r in term.iter_mut() {
            for v in r.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        result = mat_mul(&result, &result);
    }
    result
}

fn inter(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let i = inter(a, b);
    i / (a.w * a.h + b.w * b.h - i)
}

/// Dual-pass suppression by repeated scans: each pass keeps the best
/// remaining box, then drops everything it overlaps beyond the limit.
pub fn brute_nms(boxes: &[BBox], iou_thr: f64, io2_thr: f64) -> Vec<BBox> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    // selection sort on (score desc, area desc, index asc)
    for i in 0..idx.len() {
        let mut best = i;
        for j in i + 1..idx.len() {
            let (a, b) = (&boxes[idx[j]], &boxes[idx[best]]);
            let (sa, sb) = (a.score.unwrap(), b.score.unwrap());
            let better = sa > sb || (sa == sb && (a.w * a.h > b.w * b.h || (a.w * a.h == b.w * b.h && idx[j] < idx[best])));
            if better {
                best = j;
            }
        }
        idx.swap(i, best);
    }
    let ordered: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
    let pass = |list: Vec<BBox>, f: &dyn Fn(&BBox, &BBox) -> f64, thr: f64| -> Vec<BBox> {
        let mut alive = vec![true; list.len()];
        for i in 0..list.len() {
            if !alive[i] {
                continue;
            }
            for j in i + 1..list.len() {
                if alive[j] && f(&list[i], &list[j]) > thr {
                    alive[j] = false;
                }
            }
        }
        list.into_iter().zip(alive).filter(|(_, a)| *a).map(|(b, _)| b).collect()
    };
    let first = pass(ordered, &naive_iou, iou_thr);
    pass(first, &|a: &BBox, b: &BBox| inter(a, b) / (b.w * b.h), io2_thr)
}

/// Greedy matching by scanning all (detection, truth) pairs per step.
pub fn brute_match(dets: &[BBox], gts: &[BBox], iou_min: f64) -> Vec<Option<usize>> {
    let mut used_d = vec![false; dets.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for _ in 0..dets.len() {
        // next detection: highest score, earliest index
        let mut next: Option<usize> = None;
        for d in 0..dets.len() {
            if used_d[d] {
                continue;
            }
            if next.is_none_or(|n| dets[d].score.unwrap() > dets[n].score.unwrap()) {
                next = Some(d);
            }
        }
        let d = next.unwrap();
        used_d[d] = true;
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gts.len() {
            let o = naive_iou(&dets[d], &gts[g]);
            if !used_g[g] && o >= iou_min && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used_g[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

pub fn random_boxes<R: Rng>(rng: &mut R, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let w = rng.gen_range(5.0..60.0);
            // quantized scores make ties likely
            let s = (rng.gen_range(0..20) as f64) / 20.0;
            BBox::scored(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), w, w * rng.gen_range(1.0..2.5), s)
        })
        .collect()
}

/// Small networks exercising each layer type and both losses; the flag is
/// true for the softmax-xent loss.
pub fn gradcheck_cases() -> Vec<GradCase> {
    let spec = |name: &'static str, layers: Vec<LayerSpec>, input| NetworkSpec { name: name.into(), layers, input };
    let case = |name, spec, softmax, batch| GradCase { name, spec, softmax, batch };
    vec![
        case("conv-pad", spec("conv-pad", vec![LayerSpec::conv(3, 3, 1)], (2, 6, 5)), false, 2),
        case("conv-relu", spec("conv-relu", vec![LayerSpec::conv(4, 3, 0), LayerSpec::Relu], (1, 7, 7)), false, 2),
        case("maxpool", spec("maxpool", vec![LayerSpec::conv(2, 3, 1), LayerSpec::MaxPool2], (1, 8, 6)), false, 2),
        case("fc", spec("fc", vec![LayerSpec::Fc { out_units: 5 }], (3, 2, 2)), false, 2),
        case("dropout-eval", spec("dropout-eval", vec![LayerSpec::Fc { out_units: 4 }, LayerSpec::Dropout { rate: 0.5 }, LayerSpec::Fc { out_units: 3 }], (2, 2, 2)), false, 2),
        case("softmax-layer", spec("softmax-layer", vec![LayerSpec::Fc { out_units: 4 }, LayerSpec::Softmax], (2, 3, 1)), false, 2),
        case("softmax-xent", spec("softmax-xent", vec![LayerSpec::conv(3, 3, 1), LayerSpec::Relu, LayerSpec::Fc { out_units: 3 }], (1, 5, 5)), true, 2),
        case("hognet3", NetworkSpec::hognet3_with([3, 4, 36]), false, 1),
        case("covnet4", NetworkSpec::covnet4_with([3, 4, 5, 36]), false, 1),
        case("autonet3", NetworkSpec::autonet3_with([3, 4, 36]), false, 1),
        case("detector", NetworkSpec::detector(&NetworkSpec::hognet3_with([2, 2, 36]), 0.5).with_input((1, 24, 16)), true, 1),
    ]
}

pub struct GradCase {
    pub name: &'static str,
    pub spec: NetworkSpec,
    pub softmax: bool,
    pub batch: usize,
}

/// Central-difference check of one case at one seed.
pub fn check_case<T: featrep::Scalar>(case: &GradCase, seed: u64, tol: f64) -> featrep::Result<featrep::neural::GradCheckReport> {
    use featrep::neural::{grad_check, LossTarget, Network, Tensor};
    use rand::SeedableRng;
    let spec = &case.spec;
    let net = Network::<T>::init(spec.clone(), seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let (c, h, w) = spec.input;
    let batch = case.batch;
    let x = Tensor::from_vec(&[batch, c, h, w], (0..batch * c * h * w).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect())?;
    let (oc, oh, ow) = spec.output_shape()?;
    if case.softmax {
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..oc)).collect();
        grad_check(&net, &x, LossTarget::Softmax(&labels), GRADCHECK_EPS_SMOOTH, tol)
    } else {
        let n = batch * oc * oh * ow;
        let t = Tensor::from_vec(&[batch, oc, oh, ow], (0..n).map(|_| T::lit(rng.gen_range(0.0..0.5))).collect())?;
        grad_check(&net, &x, LossTarget::Euclidean(&t), GRADCHECK_EPS, tol)
    }
}

/// Finite-difference step for the Euclidean loss. Along one coordinate the
/// loss is quadratic between kinks, so only roundoff limits the step.
pub const GRADCHECK_EPS: f64 = 1e-2;

/// Step for the softmax loss, which is smooth but not polynomial.
pub const GRADCHECK_EPS_SMOOTH: f64 = 1e-3;
