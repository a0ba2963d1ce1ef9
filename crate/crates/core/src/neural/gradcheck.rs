//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Mode;
use super::loss::{loss_euclidean, loss_softmax_xent, LossKind};
use super::network::{LayerSpec, Network};
use super::tensor::Tensor;
use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;

/// Largest network checked exhaustively.
pub const MAX_CHECK_PARAMS: usize = 50_000;

/// What the loss compares the network output against.
#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a, T> {
    Euclidean(&'a Tensor<T>),
    Softmax(&'a [usize]),
}

impl<T: Scalar> LossTarget<'_, T> {
    pub fn kind(&self) -> LossKind {
        match self {
            LossTarget::Euclidean(_) => LossKind::Euclidean,
            LossTarget::Softmax(_) => LossKind::SoftmaxXent,
        }
    }
}

/// Worst coordinate of one gradient tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<10} max_rel_err={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
                e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric
            )?;
        }
        Ok(())
    }
}

fn loss_value(net: &Network<f64>, x: &Tensor<f64>, target: &LossTarget<'_, f64>) -> Result<(f64, Vec<usize>)> {
    let (y, pattern) = net.activation_pattern(x)?;
    let v = match target {
        LossTarget::Euclidean(t) => loss_euclidean(&y, t)?.value,
        LossTarget::Softmax(l) => loss_softmax_xent(&y, l)?.value,
    };
    Ok((v, pattern))
}

/// Smallest step tried when a perturbation crosses a ReLU or pooling kink.
const MIN_STEP_FRACTION: f64 = 1e-3;

/// Derivative of the loss along one coordinate from probes that stay in the
/// activation pattern of the unperturbed point. `set` writes the
/// coordinate's value and evaluates.
///
/// Tries a central difference, Richardson-extrapolated unless the loss is
/// known to be quadratic along the coordinate, then a one-sided three-point
/// difference on whichever side keeps the pattern (the point may sit exactly
/// on a kink), then retries with a tenfold smaller step, down to
/// `eps * MIN_STEP_FRACTION`.
fn central_difference(
    orig: f64,
    f0: f64,
    eps: f64,
    quadratic: bool,
    base: &[usize],
    set: &mut dyn FnMut(f64) -> Result<(f64, Vec<usize>)>,
) -> Result<f64> {
    let mut h = eps;
    let mut last = 0.0;
    while h >= eps * MIN_STEP_FRACTION {
        let mut probe = |k: f64| -> Result<(f64, bool)> {
            let (v, p) = set(orig + k * h)?;
            Ok((v, p == base))
        };
        let (u1, su1) = probe(1.0)?;
        let (d1, sd1) = probe(-1.0)?;
        let c1 = (u1 - d1) / (2.0 * h);
        if quadratic && su1 && sd1 {
            set(orig)?;
            return Ok(c1);
        }
        let (u2, su2) = probe(0.5)?;
        let (d2, sd2) = probe(-0.5)?;
        last = (4.0 * (u2 - d2) / h - c1) / 3.0;
        if su1 && sd1 && su2 && sd2 {
            set(orig)?;
            return Ok(last);
        }
        if su1 && su2 {
            set(orig)?;
            return Ok((-3.0 * f0 + 4.0 * u2 - u1) / h);
        }
        if sd1 && sd2 {
            set(orig)?;
            return Ok((3.0 * f0 - 4.0 * d2 + d1) / h);
        }
        h /= 10.0;
    }
    set(orig)?;
    Ok(last)
}

/// Relative error with a floor tied to the tensor's gradient scale, so
/// coordinates whose true gradient is negligible do not dominate. The floor
/// is `floor_frac` times the largest numeric gradient in the tensor.
fn compare(name: &str, analytic: &[f64], numeric: &[f64], floor_frac: f64) -> GradCheckEntry {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_frac * scale).max(1e-12);
    let mut entry = GradCheckEntry { name: name.into(), max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > entry.max_rel_err || i == 0 {
            entry = GradCheckEntry { name: name.into(), max_rel_err: rel, worst_index: i, analytic: a, numeric: n };
        }
    }
    entry
}

/// Scale fraction below which a coordinate is measured against the floor:
/// 1e-3 in 64-bit and 1e-1 in 32-bit, where backward roundoff reaches a few
/// `1e-6` of the tensor scale once contributions cancel.
pub fn floor_fraction<T: Scalar>() -> f64 {
    (1e6 * T::epsilon().as_f64()).clamp(1e-3, 1e-1)
}

/// Compares analytic gradients (computed in `T`) of every parameter tensor
/// and of the input against central differences computed in 64-bit.
///
/// Dropout runs in evaluation mode. The input receives a small seeded jitter
/// first so max-pooling windows have no ties. Steps that move a ReLU input
/// across zero or change a pooling winner are shrunk for that coordinate. Fails with
/// [`Error::CheckFailed`] naming the worst coordinate when any relative
/// error exceeds `tol`.
pub fn grad_check<T: Scalar>(
    net: &Network<T>,
    input: &Tensor<T>,
    target: LossTarget<'_, T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if net.param_count() > MAX_CHECK_PARAMS {
        return arg_err(format!(
            "gradient check limited to {MAX_CHECK_PARAMS} parameters, network has {}",
            net.param_count()
        ));
    }
    if !(eps > 0.0) {
        return arg_err("finite-difference step must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let amp = input.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())).max(1.0) * 1e-3;
    let jittered: Vec<T> = input.data().iter().map(|&v| v + T::lit(rng.gen_range(-amp..amp))).collect();
    let x = Tensor::from_vec(input.dims(), jittered)?;

    let trace = net.forward_train(&x, Mode::Eval, &mut rng)?;
    let out = trace.output();
    let loss = match target {
        LossTarget::Euclidean(t) => loss_euclidean(out, t)?,
        LossTarget::Softmax(l) => loss_softmax_xent(out, l)?,
    };
    let mut grads = net.zero_grads();
    let gin = net.backward(&trace, &loss.grad, &mut grads, true)?.expect("input gradient requested");

    let mut net64: Network<f64> = net.cast();
    let mut x64: Tensor<f64> = x.cast();
    let target_t;
    let target64 = match target {
        LossTarget::Euclidean(t) => {
            target_t = t.cast::<f64>();
            LossTarget::Euclidean(&target_t)
        }
        LossTarget::Softmax(l) => LossTarget::Softmax(l),
    };

    // Euclidean loss over a piecewise-linear network is quadratic along any
    // coordinate while the activation pattern holds.
    let quadratic = matches!(target, LossTarget::Euclidean(_)) && !net.spec().layers.iter().any(|l| matches!(l, LayerSpec::Softmax));
    let (f0, base) = loss_value(&net64, &x64, &target64)?;
    let mut entries = Vec::new();
    for p in 0..net64.params().len() {
        let mut numeric = Vec::with_capacity(net64.params()[p].len());
        for i in 0..net64.params()[p].len() {
            let orig = net64.params()[p].data()[i];
            let mut set = |v: f64| {
                net64.params_mut()[p].data_mut()[i] = v;
                loss_value(&net64, &x64, &target64)
            };
            numeric.push(central_difference(orig, f0, eps, quadratic, &base, &mut set)?);
        }
        let analytic: Vec<f64> = grads.tensors[p].data().iter().map(|v| v.as_f64()).collect();
        entries.push(compare(&net64.param_names()[p], &analytic, &numeric, floor_fraction::<T>()));
    }
    let mut numeric = Vec::with_capacity(x64.len());
    for i in 0..x64.len() {
        let orig = x64.data()[i];
        let mut set = |v: f64| {
            x64.data_mut()[i] = v;
            loss_value(&net64, &x64, &target64)
        };
        numeric.push(central_difference(orig, f0, eps, quadratic, &base, &mut set)?);
    }
    let analytic: Vec<f64> = gin.data().iter().map(|v| v.as_f64()).collect();
    entries.push(compare("input", &analytic, &numeric, floor_fraction::<T>()));

    let report = GradCheckReport { entries };
    if let Some(w) = report.worst() {
        if w.max_rel_err > tol || !w.max_rel_err.is_finite() {
            return Err(Error::CheckFailed(format!(
                "{}[{}]: relative error {:.3e} exceeds {tol:.1e} (analytic {:.6e}, numeric {:.6e})",
                w.name, w.worst_index, w.max_rel_err, w.analytic, w.numeric
            )));
        }
    }
    Ok(report)
}
