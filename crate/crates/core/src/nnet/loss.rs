use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Scalar loss together with its gradient w.r.t. the network output.
#[derive(Clone, Debug)]
pub struct Loss<T: Scalar = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Mean squared error averaged over every element.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>, NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(NnError::Shape("mse: empty tensors".into()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        sum += d * d;
        grad.push(T::from_f64(2.0 * d / n));
    }
    let value = sum / n;
    if !value.is_finite() {
        return Err(NnError::NonFinite(format!("mse loss is {value}")));
    }
    Ok(Loss {
        value,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Sum of all output elements; d/d output is all ones.
pub fn sum_loss<T: Scalar>(pred: &Tensor<T>) -> Result<Loss<T>, NnError> {
    let value: f64 = pred.data().iter().map(|v| v.to_f64()).sum();
    if !value.is_finite() {
        return Err(NnError::NonFinite(format!("sum loss is {value}")));
    }
    Ok(Loss {
        value,
        grad: Tensor::filled(pred.shape().to_vec(), T::ONE),
    })
}

/// Numerically stable log-softmax cross-entropy for one row of logits.
/// Returns (loss, d loss / d logits).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(logits[target] - max - sum.ln());
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, &e)| e / sum - if j == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}
