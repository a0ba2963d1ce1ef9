//! Pretraining by descriptor replication, and the reconstruction baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg_err, format_err, Error, Result};
use crate::features::{extract, FeatureKind, FEATURE_DIM};
use crate::imaging::{resize_bilinear, sample_patches, GrayImage, Patch, PatchSource, PATCH_SIZE};
use crate::neural::{loss_euclidean, lr_inverse, Hyper, Mode, Network, Sgd, Tensor};
use crate::scalar::Scalar;

const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE;
const EVAL_BATCH: usize = 512;

/// Patches paired with the descriptor the network should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationDataset {
    pub patches: Vec<Patch<f32>>,
    pub targets: Vec<[f32; FEATURE_DIM]>,
    pub kind: FeatureKind,
}

impl ReplicationDataset {
    pub fn new(patches: Vec<Patch<f32>>, targets: Vec<[f32; FEATURE_DIM]>, kind: FeatureKind) -> Result<Self> {
        if patches.len() != targets.len() {
            return arg_err(format!("{} patches but {} targets", patches.len(), targets.len()));
        }
        if kind == FeatureKind::Hog && targets.iter().flatten().any(|&v| v < 0.0) {
            return arg_err("HOG targets must be non-negative");
        }
        Ok(ReplicationDataset { patches, targets, kind })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Mean absolute target component.
    pub fn target_mean_abs(&self) -> f64 {
        mean_abs(self.targets.iter().map(|t| t.as_slice()))
    }
}

fn mean_abs<'a>(rows: impl Iterator<Item = &'a [f32]>) -> f64 {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for r in rows {
        sum += r.iter().map(|v| v.abs() as f64).sum::<f64>();
        count += r.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Samples `n` patches and computes their descriptors (in 64-bit, stored as
/// 32-bit). Deterministic per seed and independent of the thread count.
pub fn build_replication_dataset(images: &[GrayImage<f32>], n: usize, kind: FeatureKind, seed: u64) -> Result<ReplicationDataset> {
    let patches = sample_patches(images, n, seed)?;
    let targets = descriptor_targets(&patches, kind)?;
    ReplicationDataset::new(patches, targets, kind)
}

pub fn descriptor_targets(patches: &[Patch<f32>], kind: FeatureKind) -> Result<Vec<[f32; FEATURE_DIM]>> {
    patches
        .par_iter()
        .map(|p| extract(&p.pixels.cast::<f64>(), kind).map(|f| f.to_f32()))
        .collect()
}

/// Per-epoch training summary; errors are mean absolute error per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_err: f64,
    pub test_err: f64,
    /// Mean |target| over the test set.
    pub target_mean_abs: f64,
}

pub fn epoch_reports_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from("epoch,train_err,test_err,target_mean_abs\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", r.epoch, r.train_err, r.test_err, r.target_mean_abs);
    }
    s
}

/// Result of comparing predictions with targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicationError {
    pub mae: f64,
    pub target_mean_abs: f64,
}

impl ReplicationError {
    /// `mae / target_mean_abs`; 1 means no better than predicting zero.
    pub fn ratio(&self) -> f64 {
        self.mae / self.target_mean_abs
    }
}

/// Flat inputs (16×16 each) and flat targets for a regression run.
struct RegressionSet<'a> {
    inputs: Vec<&'a [f32]>,
    targets: Vec<&'a [f32]>,
}

impl<'a> RegressionSet<'a> {
    fn replication(data: &'a ReplicationDataset) -> Self {
        RegressionSet {
            inputs: data.patches.iter().map(|p| p.pixels.data()).collect(),
            targets: data.targets.iter().map(|t| t.as_slice()).collect(),
        }
    }
}

fn batch_tensor<T: Scalar>(rows: &[&[f32]], sample_dims: &[usize]) -> Result<Tensor<T>> {
    let per: usize = sample_dims.iter().product();
    let mut data = Vec::with_capacity(per * rows.len());
    for r in rows {
        if r.len() != per {
            return arg_err("sample has the wrong length");
        }
        data.extend(r.iter().map(|&v| T::lit(v as f64)));
    }
    let mut dims = vec![rows.len()];
    dims.extend_from_slice(sample_dims);
    Tensor::from_vec(&dims, data)
}

fn predict_rows<T: Scalar>(net: &Network<T>, inputs: &[&[f32]]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in inputs.chunks(EVAL_BATCH) {
        let x = batch_tensor::<T>(chunk, &[1, PATCH_SIZE, PATCH_SIZE])?;
        out.extend(net.forward(&x)?.data().iter().map(|v| v.as_f32()));
    }
    Ok(out)
}

fn regression_error<T: Scalar>(net: &Network<T>, set: &RegressionSet<'_>) -> Result<ReplicationError> {
    let pred = predict_rows(net, &set.inputs)?;
    let width = set.targets.first().map_or(0, |t| t.len());
    if pred.len() != width * set.targets.len() {
        return arg_err("network output width does not match the targets");
    }
    let mut sum = 0.0f64;
    for (p, t) in pred.chunks_exact(width.max(1)).zip(&set.targets) {
        sum += p.iter().zip(t.iter()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>();
    }
    let count = (width * set.targets.len()).max(1) as f64;
    Ok(ReplicationError { mae: sum / count, target_mean_abs: mean_abs(set.targets.iter().copied()) })
}

/// Mean absolute error per dimension of `net` on `data`.
pub fn eval_replication<T: Scalar>(net: &Network<T>, data: &ReplicationDataset) -> Result<ReplicationError> {
    regression_error(net, &RegressionSet::replication(data))
}

/// Pearson correlation between prediction and target, per dimension, averaged
/// over dimensions whose targets vary.
pub fn prediction_correlation<T: Scalar>(net: &Network<T>, data: &ReplicationDataset) -> Result<f64> {
    let set = RegressionSet::replication(data);
    let pred = predict_rows(net, &set.inputs)?;
    let n = data.len() as f64;
    let (mut total, mut dims) = (0.0, 0usize);
    for d in 0..FEATURE_DIM {
        let p: Vec<f64> = pred.iter().skip(d).step_by(FEATURE_DIM).map(|&v| v as f64).collect();
        let t: Vec<f64> = data.targets.iter().map(|r| r[d] as f64).collect();
        let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
        let cov: f64 = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum();
        let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
        let vt: f64 = t.iter().map(|b| (b - mt).powi(2)).sum();
        if vt > 0.0 {
            total += if vp > 0.0 { cov / (vp * vt).sqrt() } else { 0.0 };
            dims += 1;
        }
    }
    Ok(if dims == 0 { 0.0 } else { total / dims as f64 })
}

fn fit_regression<T: Scalar>(
    net: &mut Network<T>,
    train: &RegressionSet<'_>,
    test: &RegressionSet<'_>,
    hyper: &Hyper,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    hyper.validate()?;
    if train.inputs.is_empty() {
        return arg_err("training set is empty");
    }
    let out_len = train.targets[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    let mut sgd = Sgd::new(net);
    let mut grads = net.zero_grads();
    let mut iter = 0u64;
    let mut reports = Vec::with_capacity(hyper.epochs);
    let mut inputs = Vec::with_capacity(hyper.batch);
    let mut targets = Vec::with_capacity(hyper.batch);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(hyper.batch) {
            inputs.clear();
            targets.clear();
            inputs.extend(idx.iter().map(|&i| train.inputs[i]));
            targets.extend(idx.iter().map(|&i| train.targets[i]));
            let x = batch_tensor::<T>(&inputs, &[1, PATCH_SIZE, PATCH_SIZE])?;
            let trace = net.forward_train(&x, Mode::Train, &mut rng)?;
            let t = batch_tensor::<T>(&targets, &[out_len, 1, 1])?;
            let lr = lr_inverse(iter, hyper);
            let loss = loss_euclidean(trace.output(), &t)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged { epoch, lr, detail: format!("loss {} at iteration {iter}", loss.value) });
            }
            grads.zero();
            net.backward(&trace, &loss.grad, &mut grads, false)?;
            sgd.step(net, &grads, hyper, lr);
            iter += 1;
        }
        if net.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                epoch,
                lr: lr_inverse(iter, hyper),
                detail: "non-finite parameters".into(),
            });
        }
        let tr = regression_error(net, train)?;
        let te = if test.inputs.is_empty() { tr } else { regression_error(net, test)? };
        let report = EpochReport { epoch, train_err: tr.mae, test_err: te.mae, target_mean_abs: te.target_mean_abs };
        on_epoch(&report, net)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Minibatch SGD on the Euclidean loss with the inverse learning-rate
/// schedule. After every epoch the train and test errors are evaluated and
/// `on_epoch` is called (checkpointing hooks in here).
pub fn train_replication<T: Scalar>(
    net: &mut Network<T>,
    train: &ReplicationDataset,
    test: &ReplicationDataset,
    hyper: &Hyper,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let out = net.spec().output_shape()?;
    if out != (FEATURE_DIM, 1, 1) {
        return arg_err(format!("replication needs a 36-dim output, network gives {out:?}"));
    }
    if net.spec().input != (1, PATCH_SIZE, PATCH_SIZE) {
        return arg_err("replication networks take 16x16 patches");
    }
    fit_regression(net, &RegressionSet::replication(train), &RegressionSet::replication(test), hyper, on_epoch)
}

/// Reconstruction target: the patch resized to 8×8, flattened.
pub fn half_size_target(patch: &GrayImage<f32>) -> Result<Vec<f32>> {
    Ok(resize_bilinear(patch, PATCH_SIZE / 2, PATCH_SIZE / 2)?.into_data())
}

/// End-to-end training of the AutoNet3 reconstruction network.
pub fn train_autoencoder<T: Scalar>(
    net: &mut Network<T>,
    train: &[Patch<f32>],
    test: &[Patch<f32>],
    hyper: &Hyper,
    on_epoch: &mut dyn FnMut(&EpochReport, &Network<T>) -> Result<()>,
) -> Result<Vec<EpochReport>> {
    let out = net.spec().output_shape()?;
    if out != (PATCH_LEN / 4, 1, 1) {
        return arg_err(format!("autoencoder needs a 64-dim output, network gives {out:?}"));
    }
    let build = |ps: &[Patch<f32>]| -> Result<Vec<Vec<f32>>> { ps.iter().map(|p| half_size_target(&p.pixels)).collect() };
    let (tr_t, te_t) = (build(train)?, build(test)?);
    let tr = RegressionSet {
        inputs: train.iter().map(|p| p.pixels.data()).collect(),
        targets: tr_t.iter().map(Vec::as_slice).collect(),
    };
    let te = RegressionSet {
        inputs: test.iter().map(|p| p.pixels.data()).collect(),
        targets: te_t.iter().map(Vec::as_slice).collect(),
    };
    fit_regression(net, &tr, &te, hyper, on_epoch)
}

/// Mean absolute per-pixel reconstruction error of an autoencoder.
pub fn eval_autoencoder<T: Scalar>(net: &Network<T>, patches: &[Patch<f32>]) -> Result<f64> {
    let targets: Vec<Vec<f32>> = patches.iter().map(|p| half_size_target(&p.pixels)).collect::<Result<_>>()?;
    let set = RegressionSet {
        inputs: patches.iter().map(|p| p.pixels.data()).collect(),
        targets: targets.iter().map(Vec::as_slice).collect(),
    };
    Ok(regression_error(net, &set)?.mae)
}

// ---------------------------------------------------------------------------
// P16G container: "P16G", u32 count, count × 256 u8 pixels.

const P16G_MAGIC: &[u8; 4] = b"P16G";

pub fn encode_p16g(patches: &[Patch<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + PATCH_LEN * patches.len());
    out.extend_from_slice(P16G_MAGIC);
    out.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        out.extend_from_slice(&p.pixels.to_u8());
    }
    out
}

/// Decodes patches; their source is recorded as their index in the file.
pub fn decode_p16g(bytes: &[u8]) -> Result<Vec<Patch<f32>>> {
    if bytes.len() < 8 || &bytes[..4] != P16G_MAGIC {
        return format_err("not a P16G patch file");
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if count.checked_mul(PATCH_LEN) != Some(body.len()) {
        return format_err(format!("P16G header says {count} patches but the payload holds {} bytes", body.len()));
    }
    body.chunks_exact(PATCH_LEN)
        .enumerate()
        .map(|(i, px)| {
            let pixels = GrayImage::from_u8(PATCH_SIZE, PATCH_SIZE, px)?;
            Patch::new(pixels, PatchSource { image: i, x: 0, y: 0 })
        })
        .collect()
}

pub fn write_p16g(path: &Path, patches: &[Patch<f32>]) -> Result<()> {
    fs::write(path, encode_p16g(patches))?;
    Ok(())
}

pub fn read_p16g(path: &Path) -> Result<Vec<Patch<f32>>> {
    decode_p16g(&fs::read(path)?)
}
