//! Detection matching and miss rate against false positives per image.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::geometry::BBox;

pub use crate::geometry::{overlap, OverlapKind};

/// Outcome of matching one image's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched ground-truth index for each detection, in input order.
    pub det_to_gt: Vec<Option<usize>>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Greedy matching: detections in descending score order (ties by input
/// order) each claim the unclaimed ground truth of highest IoU, provided
/// that IoU is at least `iou_min`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_min: f64) -> Matching {
    let mut claimed = vec![false; gts.len()];
    let mut det_to_gt = vec![None; dets.len()];
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score_or_min().total_cmp(&dets[a].score_or_min()));
    for k in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let iou = dets[k].iou(gt);
            if iou >= iou_min && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            det_to_gt[k] = Some(g);
        }
    }
    let tp = det_to_gt.iter().filter(|m| m.is_some()).count();
    Matching { tp, fp: dets.len() - tp, fn_count: gts.len() - tp, det_to_gt }
}

/// Points ordered by descending score threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

pub const MATCH_IOU: f64 = 0.5;

/// Sweeps the threshold over every distinct detection score.
///
/// Greedy matching in score order makes the matches above a threshold a
/// prefix of the full matching, so each image is matched once.
pub fn miss_rate_curve(dets: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<EvalCurve> {
    if dets.len() != gts.len() {
        return arg_err(format!("{} detection lists for {} images", dets.len(), gts.len()));
    }
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return arg_err("no ground truth boxes");
    }
    let n_img = dets.len() as f64;
    let matchings: Vec<Matching> = dets.par_iter().zip(gts.par_iter()).map(|(d, g)| match_detections(d, g, MATCH_IOU)).collect();
    // (score, is_tp) over all images
    let mut events: Vec<(f64, bool)> = Vec::new();
    for (d, m) in dets.iter().zip(&matchings) {
        for (b, g) in d.iter().zip(&m.det_to_gt) {
            events.push((b.score_or_min(), g.is_some()));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    if events.is_empty() {
        points.push(CurvePoint { threshold: f64::INFINITY, fppi: 0.0, miss_rate: 1.0 });
        return Ok(EvalCurve { points });
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            if events[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint { threshold: t, fppi: fp as f64 / n_img, miss_rate: (total_gt - tp) as f64 / total_gt as f64 });
    }
    Ok(EvalCurve { points })
}

/// Miss rate of the last point whose fppi does not exceed `fppi`; 1 when
/// the curve starts to the right of it.
pub fn miss_rate_at(curve: &EvalCurve, fppi: f64) -> f64 {
    curve.points.iter().take_while(|p| p.fppi <= fppi).last().map_or(1.0, |p| p.miss_rate)
}

/// The nine reference fppi values, evenly spaced in log scale over [0.01, 1].
pub fn reference_fppi() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf((k as f64 - 8.0) / 4.0))
}

/// Mean miss rate over the nine reference fppi values.
pub fn log_avg_miss_rate(curve: &EvalCurve) -> f64 {
    let refs = reference_fppi();
    refs.iter().map(|&f| miss_rate_at(curve, f)).sum::<f64>() / refs.len() as f64
}

pub fn curve_csv(curve: &EvalCurve) -> String {
    let mut s = String::from("fppi,miss_rate\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{}", p.fppi, p.miss_rate);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(pts: &[(f64, f64)]) -> EvalCurve {
        EvalCurve { points: pts.iter().map(|&(fppi, miss_rate)| CurvePoint { threshold: 0.0, fppi, miss_rate }).collect() }
    }

    #[test]
    fn overlap_example() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((overlap(&a, &b, OverlapKind::Iou) - 1.0 / 3.0).abs() < 1e-12);
        assert!((overlap(&a, &b, OverlapKind::Io2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_cases() {
        let g = BBox::new(0.0, 0.0, 10.0, 20.0);
        let m = match_detections(&[g.with_score(1.0)], &[g], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_count), (1, 0, 0));
        let m = match_detections(&[g.with_score(0.2), g.translated(1.0, 0.0).with_score(0.9)], &[g], 0.5);
        assert_eq!(m.det_to_gt, vec![None, Some(0)]);
    }

    #[test]
    fn trivial_curves() {
        let g = BBox::new(0.0, 0.0, 10.0, 20.0);
        let c = miss_rate_curve(&[vec![g.with_score(0.9)]], &[vec![g]]).unwrap();
        assert!(c.points.iter().any(|p| p.fppi == 0.0 && p.miss_rate == 0.0));
        let c = miss_rate_curve(&[vec![]], &[vec![g]]).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!((c.points[0].fppi, c.points[0].miss_rate), (0.0, 1.0));
        assert!(miss_rate_curve(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn log_average_cases() {
        assert_eq!(log_avg_miss_rate(&curve(&[(0.0, 0.5), (3.0, 0.5)])), 0.5);
        assert_eq!(log_avg_miss_rate(&curve(&[(0.0, 0.0)])), 0.0);
        let step = curve(&[(0.0, 0.8), (0.12, 0.2)]);
        assert!((log_avg_miss_rate(&step) - (4.0 + 0.8) / 9.0).abs() < 1e-15);
    }
}
