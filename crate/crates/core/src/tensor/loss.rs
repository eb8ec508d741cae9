use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs in CE and KL.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-wise softmax with max subtraction.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let (rows, cols) = z.expect_matrix("softmax")?;
    if !z.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = z.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(vec![rows, cols], out)
}

/// Mean over the batch of `-ln p_c`, `c` the true class of each row of `y`.
pub fn cross_entropy(p: &Tensor, y: &Tensor) -> Result<f64> {
    p.expect_matrix("cross_entropy")?;
    p.expect_same_shape(y, "cross_entropy")?;
    let rows = p.rows();
    let total: f64 = (0..rows)
        .map(|r| {
            p.row(r)
                .iter()
                .zip(y.row(r))
                .filter(|(_, &t)| t > 0.0)
                .map(|(&pc, &t)| -t * pc.max(LOG_CLAMP).ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

/// `KL(target ‖ pred)` averaged over the batch. The target is a constant.
pub fn kl_divergence(target: &Tensor, pred: &Tensor) -> Result<f64> {
    let valid = vec![true; target.shape().first().copied().unwrap_or(0)];
    kl_divergence_masked(target, pred, &valid)
}

/// KL averaged over rows flagged in `valid` only; `0` when no row is valid.
pub fn kl_divergence_masked(target: &Tensor, pred: &Tensor, valid: &[bool]) -> Result<f64> {
    target.expect_matrix("kl_divergence")?;
    target.expect_same_shape(pred, "kl_divergence")?;
    if valid.len() != target.rows() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{} valid flags for {} rows", valid.len(), target.rows()),
        ));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..target.rows())
        .filter(|&r| valid[r])
        .map(|r| kl_row(target.row(r), pred.row(r)))
        .sum();
    Ok(total / count as f64)
}

pub(crate) fn kl_row(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * (t.ln() - q.max(LOG_CLAMP).ln()))
        .sum()
}
