use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean of squared differences over all elements.
pub fn mse_loss(output: &Tensor, target: &Tensor) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::shape("mse_loss", output.shape(), target.shape()));
    }
    let sum: f64 = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| (o - t) * (o - t))
        .sum();
    Ok(sum / output.numel() as f64)
}

/// Loss and its gradient with respect to `output`.
pub fn mse_loss_with_grad(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let loss = mse_loss(output, target)?;
    let scale = 2.0 / output.numel() as f64;
    let grad = output.sub(target)?.scale(scale);
    Ok((loss, grad))
}

/// Mean softmax cross-entropy of `B×K` logits against class labels, with
/// the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "expected batch×classes logits".into(),
        });
    };
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes: k,
        });
    }
    let mut grad = vec![0.0; b * k];
    let mut total = 0.0;
    for ((row, g), &y) in logits.data().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (gi, z) in g.iter_mut().zip(row) {
            *gi = (z - log_z).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, Tensor::new(vec![b, k], grad)?))
}
