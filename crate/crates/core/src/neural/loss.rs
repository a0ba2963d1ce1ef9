use super::tensor::Tensor;
use crate::error::{arg_err, Result};
use crate::scalar::Scalar;

/// Loss functions understood by training and gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Euclidean,
    SoftmaxXent,
}

/// A loss value together with its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// `(1/2B) Σ ‖pred − target‖²` with gradient `(pred − target) / B`.
pub fn loss_euclidean<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossOutput<T>> {
    if pred.len() != target.len() || pred.batch() != target.batch() {
        return arg_err(format!(
            "euclidean loss: prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        ));
    }
    let b = pred.batch().max(1);
    let inv_b = T::lit(1.0 / b as f64);
    let mut sum = 0.0f64;
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.as_f64() * d.as_f64();
            d * inv_b
        })
        .collect();
    Ok(LossOutput { value: sum / (2.0 * b as f64), grad: Tensor::from_vec(pred.dims(), grad)? })
}

/// Softmax over the flattened sample followed by the negative log
/// likelihood of `labels[i]`, averaged over the batch.
pub fn loss_softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let b = logits.batch();
    let k = logits.sample_len();
    if labels.len() != b {
        return arg_err(format!("softmax loss: {} labels for batch of {b}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return arg_err(format!("softmax loss: label {bad} out of range for {k} classes"));
    }
    let inv_b = 1.0 / b.max(1) as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label].as_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::lit((e / z - onehot) * inv_b));
        }
    }
    Ok(LossOutput { value: total * inv_b, grad: Tensor::from_vec(logits.dims(), grad)? })
}

/// Two-class softmax probability of class 1, `1 / (1 + exp(l0 − l1))`.
pub fn positive_probability(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}
