use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[class]` and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], class: usize) -> Result<(T, Vec<T>)> {
    if class >= logits.len() {
        return Err(Error::invalid(format!(
            "class index {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = logits
        .iter()
        .map(|&v| (v - max).exp())
        .fold(T::zero(), |a, b| a + b);
    let log_z = max + sum.ln();
    let loss = log_z - logits[class];
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - log_z).exp()).collect();
    grad[class] = grad[class] - T::one();
    Ok((loss, grad))
}

/// Summed smooth-L1 (Huber with unit knee): `0.5·d²` for `|d| < 1`,
/// `|d| - 0.5` otherwise.
pub fn smooth_l1<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "smooth_l1",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let half = T::of(0.5);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < T::one() {
                loss = loss + half * d * d;
                d
            } else {
                loss = loss + d.abs() - half;
                d.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}
