//! Loss functions. Reductions are means (per element for L1, per sample for
//! cross-entropy) so loss weights are batch-size independent. Scalar
//! accumulation runs in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean absolute difference over all elements, with the gradient w.r.t.
/// `pred`. Subgradient at zero difference is zero.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "l1 extent mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let mut acc = 0.0f64;
    let mut grad = vec![0.0f32; pred.numel()];
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        acc += d.abs() as f64;
        grad[i] = if d > 0.0 {
            (1.0 / n) as f32
        } else if d < 0.0 {
            (-1.0 / n) as f32
        } else {
            0.0
        };
    }
    Ok((
        (acc / n) as f32,
        Tensor::new(pred.shape().to_vec(), grad)?,
    ))
}

fn softmax_rows(logits: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (b, k) = logits.dims2()?;
    let mut probs = vec![0.0f64; b * k];
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v as f64) - max).exp();
            probs[bi * k + j] = e;
            z += e;
        }
        for p in &mut probs[bi * k..(bi + 1) * k] {
            *p /= z;
        }
    }
    Ok((b, k, probs))
}

fn check_labels(labels: &[usize], b: usize, k: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "expected {b} labels, got {}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean negative log softmax probability of the true class, with the
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, k, probs) = softmax_rows(logits)?;
    check_labels(labels, b, k)?;
    let mut acc = 0.0f64;
    let mut grad = vec![0.0f32; b * k];
    let inv_b = 1.0 / b as f64;
    for (bi, &label) in labels.iter().enumerate() {
        let p = probs[bi * k + label].max(f64::MIN_POSITIVE);
        acc -= p.ln();
        for j in 0..k {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[bi * k + j] = ((probs[bi * k + j] - onehot) * inv_b) as f32;
        }
    }
    Ok((
        (acc * inv_b) as f32,
        Tensor::new(vec![b, k], grad)?,
    ))
}

/// Paper-literal task loss variant: mean absolute difference between the
/// softmax output and the one-hot label, differentiated through the softmax.
pub fn l1_onehot_loss(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, k, probs) = softmax_rows(logits)?;
    check_labels(labels, b, k)?;
    let n = (b * k) as f64;
    let mut acc = 0.0f64;
    let mut grad = vec![0.0f32; b * k];
    for (bi, &label) in labels.iter().enumerate() {
        // dL/ds per softmax output, then through the softmax Jacobian:
        // dL/dz_j = s_j * (g_j - sum_i g_i s_i)
        let row = &probs[bi * k..(bi + 1) * k];
        let mut g = vec![0.0f64; k];
        let mut dot = 0.0f64;
        for j in 0..k {
            let onehot = if j == label { 1.0 } else { 0.0 };
            let d = row[j] - onehot;
            acc += d.abs();
            g[j] = d.signum() / n;
            dot += g[j] * row[j];
        }
        for j in 0..k {
            grad[bi * k + j] = (row[j] * (g[j] - dot)) as f32;
        }
    }
    Ok(((acc / n) as f32, Tensor::new(vec![b, k], grad)?))
}

/// Argmax class per sample.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (b, k) = logits.dims2()?;
    Ok((0..b)
        .map(|bi| {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_of_identical_tensors_is_zero() {
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let (loss, grad) = l1_loss(&x, &x).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn l1_mean_reduction() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = l1_loss(&a, &b).unwrap();
        assert_eq!(loss, 1.5);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(vec![1, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let logits = Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-8, "loss = {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(vec![1, 4]);
        assert!(softmax_cross_entropy(&logits, &[4]).is_err());
    }

    #[test]
    fn l1_onehot_hand_case() {
        // softmax output [0.5, 0.5], true class 0: |0.5-1| + |0.5-0| over 2
        let logits = Tensor::zeros(vec![1, 2]);
        let (loss, _) = l1_onehot_loss(&logits, &[0]).unwrap();
        assert!((loss - 0.5).abs() < 1e-6);
    }

    #[test]
    fn predictions_argmax() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.0, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(predictions(&logits).unwrap(), vec![1, 0]);
    }
}
