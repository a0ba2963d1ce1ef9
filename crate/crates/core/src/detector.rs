//! Window classifier finetuning, fully-convolutional multiscale scanning,
//! dual-measure NMS and hard-negative mining.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::geometry::{overlap, BBox, OverlapKind};
use crate::imaging::{build_pyramid, crop_normalize_window, GrayImage, PyramidConfig, WINDOW_H, WINDOW_W};
use crate::neural::layers::conv2d_forward;
use crate::neural::loss::positive_probability;
use crate::neural::{loss_softmax_xent, lr_inverse, Hyper, LayerSpec, Mode, Network, NetworkSpec, Sgd, Tensor, WINDOW_INPUT};
use crate::scalar::Scalar;

/// Input pixels per score-map cell (two 2×2 poolings).
pub const SCORE_STRIDE: usize = 4;
/// Backbone feature map of one window: (channels, rows, cols).
pub const WINDOW_FEATURES: (usize, usize, usize) = (36, 29, 13);
pub const HEAD_INPUT: usize = 36 * 29 * 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Background = 0,
    Pedestrian = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Annotated,
    Augmented,
    RandomNegative,
    HardNegative,
}

/// A 64×128 training window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub pixels: GrayImage<f32>,
    pub label: Label,
    pub provenance: Provenance,
}

impl WindowSample {
    pub fn new(pixels: GrayImage<f32>, label: Label, provenance: Provenance) -> Result<Self> {
        if pixels.width() != WINDOW_W || pixels.height() != WINDOW_H {
            return arg_err(format!("window must be 64x128, got {}x{}", pixels.width(), pixels.height()));
        }
        Ok(WindowSample { pixels, label, provenance })
    }
}

/// Augmentation and negative-sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSetConfig {
    pub scale_factors: Vec<f64>,
    pub shifts_per_positive: usize,
    /// Shift range as a fraction of box height, per axis.
    pub shift_frac: f64,
    pub neg_count: usize,
    /// Random negatives must overlap every annotation by less than this IoU.
    pub neg_max_iou: f64,
    pub seed: u64,
}

impl Default for FinetuneSetConfig {
    fn default() -> Self {
        FinetuneSetConfig {
            scale_factors: vec![1.05, 0.95],
            shifts_per_positive: 2,
            shift_frac: 0.02,
            neg_count: 1000,
            neg_max_iou: 0.2,
            seed: 0,
        }
    }
}

/// Positives (annotations plus rescaled and shifted copies) and random
/// negatives, all resampled to 64×128.
///
/// `boxes[i]` lists the annotations of `images[i]`. Negatives are 1:2 boxes
/// whose IoU with every annotation of their image is below the limit;
/// images without annotations are therefore pure negative sources.
pub fn build_finetune_set(images: &[GrayImage<f32>], boxes: &[Vec<BBox>], cfg: &FinetuneSetConfig) -> Result<Vec<WindowSample>> {
    if images.len() != boxes.len() {
        return arg_err("one annotation list per image is required");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (img, anns) in images.iter().zip(boxes) {
        for b in anns {
            out.push(WindowSample::new(crop_normalize_window(img, b)?, Label::Pedestrian, Provenance::Annotated)?);
            for &f in &cfg.scale_factors {
                let s = b.scaled_about_center(f);
                out.push(WindowSample::new(crop_normalize_window(img, &s)?, Label::Pedestrian, Provenance::Augmented)?);
            }
            for _ in 0..cfg.shifts_per_positive {
                let r = cfg.shift_frac * b.h;
                let (dx, dy) = if r > 0.0 { (rng.gen_range(-r..=r), rng.gen_range(-r..=r)) } else { (0.0, 0.0) };
                let s = b.translated(dx, dy);
                out.push(WindowSample::new(crop_normalize_window(img, &s)?, Label::Pedestrian, Provenance::Augmented)?);
            }
        }
    }
    let sources: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, im)| im.height() >= 2)
        .map(|(i, _)| i)
        .collect();
    let mut made = 0;
    let mut attempts = 0usize;
    let max_attempts = 100 * cfg.neg_count.max(1);
    while made < cfg.neg_count && !sources.is_empty() {
        if attempts >= max_attempts {
            return Err(Error::Argument(format!(
                "could only place {made} of {} negatives clear of annotations",
                cfg.neg_count
            )));
        }
        attempts += 1;
        let i = sources[rng.gen_range(0..sources.len())];
        let img = &images[i];
        let (w, h) = (img.width() as f64, img.height() as f64);
        let hmax = h.min(2.0 * w);
        let hmin = (WINDOW_H as f64).min(hmax);
        let bh = if hmax > hmin { rng.gen_range(hmin..=hmax) } else { hmax };
        let bw = bh * 0.5;
        let cand = BBox::new(rng.gen_range(0.0..=(w - bw)), rng.gen_range(0.0..=(h - bh)), bw, bh);
        if boxes[i].iter().all(|a| cand.iou(a) < cfg.neg_max_iou) {
            out.push(WindowSample::new(crop_normalize_window(img, &cand)?, Label::Background, Provenance::RandomNegative)?);
            made += 1;
        }
    }
    Ok(out)
}

/// A backbone with a dropout + two-way fully-connected head on 64×128
/// windows. Class 1 is "pedestrian".
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorNet<T> {
    net: Network<T>,
}

impl<T: Scalar> DetectorNet<T> {
    /// Wraps a network whose spec has the detector layout.
    pub fn from_network(net: Network<T>) -> Result<Self> {
        let spec = net.spec();
        let bl = spec.backbone_len();
        let shapes = spec.shapes()?;
        if spec.input != WINDOW_INPUT || shapes[bl] != WINDOW_FEATURES {
            return arg_err(format!("{} does not map 64x128 windows to 36x29x13 features", spec.name));
        }
        match &spec.layers[bl..] {
            [LayerSpec::Dropout { .. }, LayerSpec::Fc { out_units: 2 }] => Ok(DetectorNet { net }),
            _ => arg_err("detector head must be dropout followed by a 2-unit fc layer"),
        }
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn backbone_len(&self) -> usize {
        self.net.spec().backbone_len()
    }

    fn head(&self) -> (&Tensor<T>, &Tensor<T>) {
        let n = self.net.params().len();
        (&self.net.params()[n - 2], &self.net.params()[n - 1])
    }

    /// Backbone output for 64×128 windows, flattened per window (13572 each).
    pub fn window_features(&self, windows: &[&GrayImage<f32>]) -> Result<Tensor<T>> {
        let x = window_batch::<T>(windows)?;
        let f = self.net.forward_range(&x, 0..self.backbone_len(), None)?;
        let n = f.batch();
        f.reshape(&[n, HEAD_INPUT])
    }

    /// Pedestrian probability of each 64×128 window.
    pub fn score_windows(&self, windows: &[&GrayImage<f32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(64) {
            let y = self.net.forward(&window_batch::<T>(chunk)?)?;
            out.extend(y.data().chunks_exact(2).map(|l| positive_probability(l[0].as_f64(), l[1].as_f64())));
        }
        Ok(out)
    }

    /// Scores the window whose top-left corner is `(x, y)` in `img`, using
    /// the image content around it (zero outside the image) exactly as a
    /// whole-image convolutional pass sees it.
    pub fn score_window_in_context(&self, img: &GrayImage<f32>, x: usize, y: usize) -> Result<f64> {
        let pad = match self.net.spec().layers.first() {
            Some(LayerSpec::Conv { pad, .. }) => *pad,
            _ => 0,
        };
        let (w, h) = (WINDOW_W + 2 * pad, WINDOW_H + 2 * pad);
        let mut data = vec![T::zero(); w * h];
        for r in 0..h {
            let iy = (y + r) as isize - pad as isize;
            if iy < 0 || iy as usize >= img.height() {
                continue;
            }
            for c in 0..w {
                let ix = (x + c) as isize - pad as isize;
                if ix >= 0 && (ix as usize) < img.width() {
                    data[r * w + c] = T::lit(img.get(ix as usize, iy as usize) as f64);
                }
            }
        }
        let t = Tensor::from_vec(&[1, 1, h, w], data)?;
        let bl = self.backbone_len();
        let f = self.net.forward_range(&t, 0..bl, Some(0))?;
        let l = self.net.forward_range(&f, bl..self.net.spec().layers.len(), None)?;
        Ok(positive_probability(l.data()[0].as_f64(), l.data()[1].as_f64()))
    }
}

fn window_batch<T: Scalar>(windows: &[&GrayImage<f32>]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(windows.len() * WINDOW_W * WINDOW_H);
    for w in windows {
        if w.width() != WINDOW_W || w.height() != WINDOW_H {
            return arg_err("windows must be 64x128");
        }
        data.extend(w.data().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::from_vec(&[windows.len(), 1, WINDOW_H, WINDOW_W], data)
}

/// Builds a detector from `backbone`: its convolutional layers and parameters
/// are copied, the head is freshly initialized from `seed`.
pub fn attach_head<T: Scalar>(backbone: &Network<T>, dropout: f64, seed: u64) -> Result<DetectorNet<T>> {
    let spec = NetworkSpec::detector(backbone.spec(), dropout);
    let bl = spec.backbone_len();
    if spec.shapes()?[bl] != WINDOW_FEATURES {
        return arg_err(format!("{} backbone does not map 64x128 windows to 36x29x13", backbone.spec().name));
    }
    let mut net = Network::init(spec, seed)?;
    let nb = net.params().len() - 2;
    for (dst, src) in net.params_mut()[..nb].iter_mut().zip(backbone.params()) {
        if dst.dims() != src.dims() {
            return arg_err("backbone parameter shapes do not match");
        }
        *dst = src.clone();
    }
    DetectorNet::from_network(net)
}

/// Per-epoch finetuning summary.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches (dropout active).
    pub loss: f64,
    /// Fraction of samples classified correctly during the epoch.
    pub accuracy: f64,
}

/// Minibatch SGD on the softmax loss, all layers trainable.
pub fn finetune<T: Scalar>(net: &mut DetectorNet<T>, samples: &[WindowSample], hyper: &Hyper) -> Result<Vec<FinetuneEpoch>> {
    hyper.validate()?;
    let pos = samples.iter().filter(|s| s.label == Label::Pedestrian).count();
    if pos == 0 || pos == samples.len() {
        return arg_err("finetuning needs both pedestrian and background samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut sgd = Sgd::new(&net.net);
    let mut grads = net.net.zero_grads();
    let mut iter = 0u64;
    let mut reports = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for idx in order.chunks(hyper.batch) {
            let wins: Vec<&GrayImage<f32>> = idx.iter().map(|&i| &samples[i].pixels).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label as usize).collect();
            let x = window_batch::<T>(&wins)?;
            let trace = net.net.forward_train(&x, Mode::Train, &mut rng)?;
            let lr = lr_inverse(iter, hyper);
            let loss = loss_softmax_xent(trace.output(), &labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged { epoch, lr, detail: format!("softmax loss {} at iteration {iter}", loss.value) });
            }
            for (l, &y) in trace.output().data().chunks_exact(2).zip(&labels) {
                let pred = usize::from(l[1] > l[0]);
                correct += usize::from(pred == y);
            }
            grads.zero();
            net.net.backward(&trace, &loss.grad, &mut grads, false)?;
            sgd.step(&mut net.net, &grads, hyper, lr);
            loss_sum += loss.value;
            batches += 1;
            iter += 1;
        }
        reports.push(FinetuneEpoch { epoch, loss: loss_sum / batches as f64, accuracy: correct as f64 / samples.len() as f64 });
    }
    Ok(reports)
}

/// Dense pedestrian probabilities for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scale: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major; cell `(i, j)` is the window with top-left `(4j, 4i)` in
    /// level pixels.
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    /// The cell's window in original-image coordinates.
    pub fn cell_box(&self, row: usize, col: usize) -> BBox {
        let s = self.scale;
        BBox::scored(
            (SCORE_STRIDE * col) as f64 / s,
            (SCORE_STRIDE * row) as f64 / s,
            WINDOW_W as f64 / s,
            WINDOW_H as f64 / s,
            self.get(row, col),
        )
    }
}

/// Runs the backbone over the whole image and slides the head over the
/// feature map. The image is first cropped to multiples of 4 pixels; images
/// smaller than a window yield an empty map.
pub fn score_image<T: Scalar>(net: &DetectorNet<T>, img: &GrayImage<f32>, scale: f64) -> Result<ScoreMap> {
    let (w4, h4) = (img.width() / SCORE_STRIDE * SCORE_STRIDE, img.height() / SCORE_STRIDE * SCORE_STRIDE);
    if w4 < WINDOW_W || h4 < WINDOW_H {
        return Ok(ScoreMap { scale, rows: 0, cols: 0, scores: Vec::new() });
    }
    let mut data = Vec::with_capacity(w4 * h4);
    for y in 0..h4 {
        data.extend(img.data()[y * img.width()..y * img.width() + w4].iter().map(|&v| T::lit(v as f64)));
    }
    let x = Tensor::from_vec(&[1, 1, h4, w4], data)?;
    let feat = net.net.forward_range(&x, 0..net.backbone_len(), None)?;
    let (hw, hb) = net.head();
    let (c, kh, kw) = WINDOW_FEATURES;
    let kernel = hw.clone().reshape(&[2, c, kh, kw])?;
    let logits = conv2d_forward(&feat, &kernel, hb.data(), 0)?;
    let (_, _, rows, cols) = logits.nchw();
    let (l0, l1) = logits.data().split_at(rows * cols);
    let scores = l0.iter().zip(l1).map(|(a, b)| positive_probability(a.as_f64(), b.as_f64())).collect();
    Ok(ScoreMap { scale, rows, cols, scores })
}

/// Detection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub pyramid: PyramidConfig,
    /// Cells with score strictly above this are emitted.
    pub threshold: f64,
    pub nms_iou: f64,
    pub nms_io2: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { pyramid: PyramidConfig::default(), threshold: 0.5, nms_iou: 0.4, nms_io2: 0.6 }
    }
}

/// All above-threshold windows over the pyramid, before NMS, in level then
/// row-major cell order.
pub fn detect_candidates<T: Scalar>(net: &DetectorNet<T>, img: &GrayImage<f32>, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    let levels = build_pyramid(img, &cfg.pyramid)?;
    let maps: Vec<ScoreMap> = levels
        .par_iter()
        .map(|l| score_image(net, &l.image, l.scale))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for m in &maps {
        for r in 0..m.rows {
            for c in 0..m.cols {
                if m.get(r, c) > cfg.threshold {
                    out.push(m.cell_box(r, c));
                }
            }
        }
    }
    Ok(out)
}

pub fn detect_multiscale<T: Scalar>(net: &DetectorNet<T>, img: &GrayImage<f32>, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    Ok(nms(&detect_candidates(net, img, cfg)?, cfg.nms_iou, cfg.nms_io2))
}

/// Score-descending order; ties go to the larger box, then input order.
pub fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ba, bb) = (&boxes[a], &boxes[b]);
        bb.score_or_min()
            .partial_cmp(&ba.score_or_min())
            .unwrap_or(Ordering::Equal)
            .then(bb.area().partial_cmp(&ba.area()).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    idx
}

fn suppress(boxes: Vec<BBox>, kind: OverlapKind, thr: f64) -> Vec<BBox> {
    let mut kept: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if kept.iter().all(|k| overlap(k, &b, kind) <= thr) {
            kept.push(b);
        }
    }
    kept
}

/// Greedy suppression by IoU, then by Io2 (intersection over the
/// lower-scored box) on the survivors. Output is in score order.
pub fn nms(boxes: &[BBox], iou_thr: f64, io2_thr: f64) -> Vec<BBox> {
    let sorted: Vec<BBox> = score_order(boxes).into_iter().map(|i| boxes[i]).collect();
    suppress(suppress(sorted, OverlapKind::Iou, iou_thr), OverlapKind::Io2, io2_thr)
}

/// Hard-negative mining settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub top_k: usize,
    pub fp_stop: usize,
    pub max_runs: usize,
    /// A detection is a false positive when its IoU with every annotation is below this.
    pub fp_iou: f64,
    pub detect: DetectConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { top_k: 20_000, fp_stop: 2_000, max_runs: 8, fp_iou: 0.5, detect: DetectConfig::default() }
    }
}

/// One mining round.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningRun {
    pub run: usize,
    pub fp_count: usize,
    /// Negatives in the training set after this round's additions.
    pub neg_set_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub runs: Vec<MiningRun>,
    /// False positives of the final detector (after the last retraining).
    pub final_fp_count: usize,
}

pub fn mining_report_csv(runs: &[MiningRun]) -> String {
    let mut s = String::from("run,fp_count,neg_set_size\n");
    for r in runs {
        let _ = writeln!(s, "{},{},{}", r.run, r.fp_count, r.neg_set_size);
    }
    s
}

/// Post-NMS false positives on every image, scored, in image then score order.
pub fn false_positives<T: Scalar>(
    net: &DetectorNet<T>,
    images: &[GrayImage<f32>],
    boxes: &[Vec<BBox>],
    cfg: &MiningConfig,
) -> Result<Vec<(usize, BBox)>> {
    let per_image: Vec<Vec<BBox>> = images
        .par_iter()
        .map(|img| detect_multiscale(net, img, &cfg.detect))
        .collect::<Result<_>>()?;
    let mut fps = Vec::new();
    for (i, dets) in per_image.into_iter().enumerate() {
        for d in dets {
            if boxes[i].iter().all(|g| d.iou(g) < cfg.fp_iou) {
                fps.push((i, d));
            }
        }
    }
    Ok(fps)
}

/// Repeatedly detects on the training images, adds the top-scoring false
/// positives as negatives, and finetunes from the current parameters.
///
/// Each run stops the loop early when its false-positive count is below
/// `fp_stop`; otherwise at most `max_runs` retrainings happen. The detector
/// is re-evaluated once more at the end to report `final_fp_count`.
pub fn mine_hard<T: Scalar>(
    net: &mut DetectorNet<T>,
    images: &[GrayImage<f32>],
    boxes: &[Vec<BBox>],
    samples: &mut Vec<WindowSample>,
    cfg: &MiningConfig,
    hyper: &Hyper,
) -> Result<MiningOutcome> {
    if images.len() != boxes.len() {
        return arg_err("one annotation list per image is required");
    }
    let mut runs = Vec::new();
    let mut fps = false_positives(net, images, boxes, cfg)?;
    for run in 1..=cfg.max_runs {
        let fp_count = fps.len();
        if fp_count < cfg.fp_stop {
            runs.push(MiningRun { run, fp_count, neg_set_size: negatives(samples) });
            return Ok(MiningOutcome { runs, final_fp_count: fp_count });
        }
        let order = score_order(&fps.iter().map(|(_, b)| *b).collect::<Vec<_>>());
        for &k in order.iter().take(cfg.top_k) {
            let (i, b) = &fps[k];
            samples.push(WindowSample::new(crop_normalize_window(&images[*i], b)?, Label::Background, Provenance::HardNegative)?);
        }
        runs.push(MiningRun { run, fp_count, neg_set_size: negatives(samples) });
        let run_hyper = Hyper { seed: hyper.seed.wrapping_add(run as u64), ..hyper.clone() };
        finetune(net, samples, &run_hyper)?;
        fps = false_positives(net, images, boxes, cfg)?;
    }
    Ok(MiningOutcome { runs, final_fp_count: fps.len() })
}

fn negatives(samples: &[WindowSample]) -> usize {
    samples.iter().filter(|s| s.label == Label::Background).count()
}

/// `image_path,x,y,w,h,score` rows, six decimals.
pub fn detections_csv(per_image: &[(String, Vec<BBox>)]) -> String {
    let mut s = String::from("image_path,x,y,w,h,score\n");
    for (path, dets) in per_image {
        for b in dets {
            let _ = writeln!(s, "{path},{:.6},{:.6},{:.6},{:.6},{:.6}", b.x, b.y, b.w, b.h, b.score_or_min());
        }
    }
    s
}

/// Parses [`detections_csv`] output into `(image_path, box)` rows.
pub fn parse_detections_csv(text: &str) -> Result<Vec<(String, BBox)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("image_path")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("detections line {}: expected 6 fields", i + 1)));
        }
        let mut v = [0.0f64; 5];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| Error::Format(format!("detections line {}: bad number {s:?}", i + 1)))?;
        }
        out.push((f[0].to_string(), BBox::scored(v[0], v[1], v[2], v[3], v[4])));
    }
    Ok(out)
}
