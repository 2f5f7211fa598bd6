//! Loss terms and the weighted joint objective.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss weights must be finite, non-negative and not all zero")]
    InvalidWeights,
    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),
    #[error("empty input")]
    Empty,
}

/// Rate, distortion and cross-entropy weights of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, LossError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !(ok(alpha) && ok(beta) && ok(gamma)) || alpha + beta + gamma == 0.0 {
            return Err(LossError::InvalidWeights);
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `α·rate + β·distortion + γ·ce`.
pub fn joint_loss(rate: f64, distortion: f64, ce: f64, w: &LossWeights) -> Result<f64, LossError> {
    for (v, name) in [(rate, "rate"), (distortion, "distortion"), (ce, "cross-entropy")] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(w.alpha * rate + w.beta * distortion + w.gamma * ce)
}

/// Mean squared error over every element.
pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64, LossError> {
    if x.len() != x_hat.len() {
        return Err(LossError::ShapeMismatch(x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Err(LossError::Empty);
    }
    let sum: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Gradient of [`mse`] with respect to `x_hat`, scaled by `scale`, added into `grad`.
pub fn mse_grad_into(x: &[f64], x_hat: &[f64], scale: f64, grad: &mut [f64]) {
    let k = 2.0 * scale / x.len() as f64;
    for ((g, a), b) in grad.iter_mut().zip(x).zip(x_hat) {
        *g += k * (b - a);
    }
}

/// `log Σ exp(row)` without overflow.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
    m + libm::log(s)
}

fn check_rows(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(), LossError> {
    if classes == 0 || labels.is_empty() {
        return Err(LossError::Empty);
    }
    if logits.len() != classes * labels.len() {
        return Err(LossError::ShapeMismatch(logits.len(), classes * labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean over rows of `-ln softmax(row)[label]` (natural log).
///
/// `logits` is row-major `(labels.len(), classes)`.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64, LossError> {
    check_rows(logits, classes, labels)?;
    let total: f64 = logits
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the logits, times `scale`, added into `grad`.
pub fn cross_entropy_grad_into(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    scale: f64,
    grad: &mut [f64],
) -> Result<(), LossError> {
    check_rows(logits, classes, labels)?;
    let k = scale / labels.len() as f64;
    for ((row, g), &l) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let lse = log_sum_exp(row);
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = libm::exp(v - lse);
            *gj += k * (p - if j == l { 1.0 } else { 0.0 });
        }
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose argmax equals the label.
pub fn top1_correct(logits: &[f64], classes: usize, labels: &[usize]) -> Result<usize, LossError> {
    check_rows(logits, classes, labels)?;
    Ok(logits.chunks_exact(classes).zip(labels).filter(|(row, &l)| argmax(row) == l).count())
}

/// Fraction of rows classified correctly.
pub fn top1_accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64, LossError> {
    Ok(top1_correct(logits, classes, labels)? as f64 / labels.len() as f64)
}
